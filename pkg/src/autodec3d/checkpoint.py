"""Checkpoint directories: a torch parameter archive plus a hashed manifest."""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import torch

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PARAMS = "params.pt"


class CheckpointError(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def save_checkpoint(out_dir, stage: str, config: dict, state: dict, step: int, seeds: dict,
                    extra: dict | None = None, files: dict | None = None) -> Path:
    """Write ``params.pt`` and ``manifest.json`` into ``out_dir``.

    ``files`` maps manifest keys to already-written sibling files (e.g. the
    loss log) whose hashes should be recorded too.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(state, buf)
    (out / PARAMS).write_bytes(buf.getvalue())
    hashes = {PARAMS: sha256_file(out / PARAMS)}
    for name in (files or {}).values():
        if (out / name).exists():
            hashes[name] = sha256_file(out / name)
    manifest = {
        "stage": stage,
        "format_version": FORMAT_VERSION,
        "config": config,
        "step": step,
        "seeds": seeds,
        "files": dict(files or {}),
        "hashes": hashes,
    }
    manifest.update(extra or {})
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_manifest(ckpt_dir) -> dict:
    path = Path(ckpt_dir) / MANIFEST
    if not path.exists():
        raise CheckpointError(f"{ckpt_dir}: no {MANIFEST}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{ckpt_dir}: unsupported checkpoint format {manifest.get('format_version')}")
    return manifest


def load_checkpoint(ckpt_dir, stage: str | None = None, verify: bool = True):
    """Return ``(manifest, state)`` after checking stage and file hashes."""
    ckpt_dir = Path(ckpt_dir)
    manifest = load_manifest(ckpt_dir)
    if stage is not None and manifest["stage"] != stage:
        raise CheckpointError(f"{ckpt_dir}: expected a {stage} checkpoint, found {manifest['stage']}")
    if verify:
        for name, digest in manifest["hashes"].items():
            if sha256_file(ckpt_dir / name) != digest:
                raise CheckpointError(f"{ckpt_dir}/{name}: hash mismatch")
    state = torch.load(ckpt_dir / PARAMS, map_location="cpu", weights_only=False)
    return manifest, state
