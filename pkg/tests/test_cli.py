import hashlib
import json

import numpy as np
import pytest

from autodec3d.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from autodec3d.config import dump_config
from autodec3d.geomeval import density_grid
from autodec3d.renderer import RenderSettings
from autodec3d.voxgrid import load_volume

from conftest import tiny_config


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train-autodec -> fit-stats -> train-diffusion on a tiny config."""
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config("synth.n_objects=2", "synth.n_views=3", "synth.image_size=12", "synth.gt_resolution=16",
                      "autodecoder.steps=3", "diffusion.steps=3", "schedule.n_steps=4", "eval.n_views=2",
                      "eval.n_points=256")
    cfg_path = root / "tiny.yaml"
    cfg_path.write_text(dump_config(cfg))
    c = ["--config", cfg_path]
    assert main([str(a) for a in ["synth", *c, "--out", root / "ds"]]) == EXIT_OK
    assert main([str(a) for a in ["train-autodec", *c, "--data", root / "ds", "--out", root / "ad"]]) == EXIT_OK
    assert main([str(a) for a in ["fit-stats", *c, "--ckpt", root / "ad", "--out", root / "stats"]]) == EXIT_OK
    assert main([str(a) for a in ["train-diffusion", *c, "--ckpt", root / "ad", "--stats", root / "stats",
                                  "--out", root / "diff"]]) == EXIT_OK
    return root, c


def test_pipeline_artifacts(pipeline):
    root, _ = pipeline
    assert (root / "ds" / "config.yaml").exists()
    for d in ("ad", "diff"):
        assert json.loads((root / d / "manifest.json").read_text())["hashes"]
    assert json.loads((root / "ad" / "eval.json").read_text())["step"] == 3
    assert (root / "ad" / "train_log.jsonl").read_text().count("\n") == 3


def test_sample_twice_gives_identical_files(pipeline, capsys):
    root, c = pipeline
    for name in ("s1", "s2"):
        code, _, _ = _run(capsys, "sample", *c, "--ckpt", root / "diff", "--n", 2, "--out", root / name)
        assert code == EXIT_OK
    files = sorted(p.name for p in (root / "s1").glob("*.vol"))
    assert len(files) == 4
    for f in files + ["sample_000_view_00.png", "sample_001_view_01.png"]:
        assert _sha(root / "s1" / f) == _sha(root / "s2" / f)


def test_sample_step_counts_log_timing(pipeline, capsys):
    root, c = pipeline
    for steps in (16, 32, 64):
        out = root / f"steps{steps}"
        code, stdout, _ = _run(capsys, "sample", *c, "--ckpt", root / "diff", "--n", 1, "--steps", steps,
                               "--out", out)
        assert code == EXIT_OK and json.loads(stdout)["mean_sample_seconds"] > 0
        rec = json.loads((out / "timing.jsonl").read_text())
        assert rec["steps"] == steps and rec["sample_seconds"] > 0


def test_mesh_and_self_eval_gives_full_coverage(pipeline, capsys):
    root, c = pipeline
    assert _run(capsys, "sample", *c, "--ckpt", root / "diff", "--n", 3, "--out", root / "gen")[0] == EXIT_OK
    # untrained decoders rarely reach the default iso level; pick one from the data
    dens = density_grid(load_volume(root / "gen" / "sample_000.vol"), RenderSettings()).values.numpy()
    iso = float(np.quantile(dens, 0.7))
    code, out, _ = _run(capsys, "mesh", *c, "--volume", root / "gen" / "sample_000.vol", "--iso", iso,
                        "--out", root / "m.obj")
    assert code == EXIT_OK and json.loads(out)["faces"] > 0
    code, out, _ = _run(capsys, "eval", *c, "--set", f"eval.iso_level={iso}", "--generated", root / "gen",
                        "--reference", root / "gen", "--out", root / "report.json")
    assert code == EXIT_OK
    report = json.loads(out)
    assert report["cov"] == 1.0 and report["mmd"] == 0.0 and report["psnr"] == "inf"
    first = (root / "report.json").read_bytes()
    _run(capsys, "eval", *c, "--set", f"eval.iso_level={iso}", "--generated", root / "gen",
         "--reference", root / "gen", "--out", root / "report.json")
    assert (root / "report.json").read_bytes() == first


def test_config_command(capsys, tmp_path):
    code, out, _ = _run(capsys, "config", "--list")
    assert code == EXIT_OK and "desk" in out.split()
    code, out, _ = _run(capsys, "config", "--config", "desk", "--seed", 5)
    assert code == EXIT_OK and "seed: 5" in out


@pytest.mark.parametrize("argv", [
    ["synth", "--out", "x", "--set", "decoder.typo=1"],
    ["synth", "--config", "no_such_preset_or_file"],
    ["synth"],
    ["nonsense"],
    ["train-autodec", "--data", "/nonexistent/ds", "--out", "x"],
    ["mesh", "--volume", "/nonexistent.vol", "--out", "m.obj"],
])
def test_config_errors_exit_2(capsys, argv):
    code, _, err = _run(capsys, *argv)
    assert code == EXIT_CONFIG


def test_device_env_is_a_config_error(capsys, monkeypatch):
    monkeypatch.setenv("AUTODEC3D_DEVICE", "cuda")
    assert _run(capsys, "config")[0] == EXIT_CONFIG


def test_runtime_failure_exits_3(capsys, tmp_path):
    bad = tmp_path / "bad.vol"
    bad.write_bytes(b"not a volume")
    code, _, err = _run(capsys, "mesh", "--volume", bad, "--out", tmp_path / "m.obj")
    assert code == EXIT_RUNTIME and json.loads(err.strip().splitlines()[-1])["error"]
