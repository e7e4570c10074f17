import pytest
import yaml
from pydantic import ValidationError

from autodec3d.config import RunConfig, apply_overrides, dump_config, list_presets, load_config


def test_defaults_are_published_values():
    cfg = RunConfig()
    assert cfg.embedding.dim == cfg.decoder.embed_dim
    assert cfg.render.density_activation == "softplus"
    assert cfg.autodecoder.foreground_weight == 10
    assert cfg.schedule.sigma_min == 0.002 and cfg.schedule.sigma_max == 80 and cfg.schedule.rho == 7


def test_round_trip_is_lossless(tmp_path):
    cfg = load_config(None, ["decoder.n_up_blocks=2", "diffusion.lr=1e-3"], seed=11)
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    back = load_config(path)
    assert back == cfg
    assert dump_config(back) == dump_config(cfg)


def test_effective_config_is_input_plus_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"seed": 3, "decoder": {"n_up_blocks": 2}}))
    dumped = yaml.safe_load(dump_config(load_config(path)))
    expected = RunConfig().model_dump(mode="json")
    expected["seed"] = 3
    expected["decoder"]["n_up_blocks"] = 2
    assert dumped == expected


@pytest.mark.parametrize("bad", [{"decoder": {"typo": 1}}, {"nonsense": 1}, {"schema_version": 99}])
def test_unknown_keys_and_versions_are_errors(tmp_path, bad):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(bad))
    with pytest.raises(ValidationError):
        load_config(path)


def test_overrides():
    assert apply_overrides({}, ["a.b=[1, 2]", "c=true"]) == {"a": {"b": [1, 2]}, "c": True}
    with pytest.raises(ValueError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ValueError):
        apply_overrides({"a": 1}, ["a.b=2"])


@pytest.mark.parametrize("name", list_presets())
def test_presets_validate(name):
    cfg = load_config(name)
    assert isinstance(cfg, RunConfig)
