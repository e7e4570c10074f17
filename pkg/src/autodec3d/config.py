"""Run configuration schema.

Every module's knobs live here as strict pydantic models (unknown keys are
errors).  Defaults are the published architecture values; the in-repo
presets under ``presets/`` scale them down for CPU runs.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

SCHEMA_VERSION = 1
PRESET_DIR = Path(__file__).parent / "presets"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class RenderConfig(_Strict):
    n_samples: int = Field(128, ge=2)
    n_samples_eval: int = Field(128, ge=2)
    density_activation: Literal["softplus", "relu", "identity"] = "softplus"
    density_shift: float = 0.0
    background_color: tuple[float, float, float] = (0.0, 0.0, 0.0)


class EmbeddingConfig(_Strict):
    dim: int = Field(1024, ge=1)
    mode: Literal["direct", "hashed"] = "direct"
    n_books: int = Field(4, ge=1)
    table_bits: int = Field(8, ge=1, le=32)  # entries per book = 2**table_bits
    word_bits: int = 32
    multiplier: Literal["quadratic", "golden"] = "quadratic"
    init_std: float = 0.01

    @model_validator(mode="after")
    def _check(self):
        if self.mode == "hashed" and self.dim % self.n_books:
            raise ValueError("embedding dim must be divisible by n_books")
        if self.table_bits > self.word_bits:
            raise ValueError("table_bits must not exceed word_bits")
        return self


class DecoderConfig(_Strict):
    embed_dim: int = 1024
    base_resolution: int = 4
    base_channels: int = 512
    n_up_blocks: int = Field(4, ge=1)
    blocks_per_resolution: int = Field(4, ge=1)
    attention_resolutions: list[int] = [8, 16]
    use_attention: bool = True
    out_channels: int = 4
    latent_tap_resolution: int = 8
    norm: Literal["group", "batch"] = "group"
    residual_convs: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check(self):
        reachable = [self.base_resolution * 2**i for i in range(self.n_up_blocks + 1)]
        if self.latent_tap_resolution not in reachable:
            raise ValueError(f"latent tap {self.latent_tap_resolution} not in {reachable}")
        if self.out_channels < 4:
            raise ValueError("out_channels must be 4 (radiance) or 4 + N_p")
        if self.base_channels % 2**self.n_up_blocks:
            raise ValueError("base_channels must stay integral after halving per block")
        return self

    @property
    def output_resolution(self) -> int:
        return self.base_resolution * 2**self.n_up_blocks

    def channels_at(self, resolution: int) -> int:
        level = (resolution // self.base_resolution).bit_length() - 1
        return self.base_channels // 2**level


class ArticulationConfig(_Strict):
    n_parts: int = 10
    n_keypoints: int = 125
    use_gt_poses: bool = False
    predictor_input: int = 64
    predictor_channels: int = 32
    uncovered_eps: float = 1e-4
    bounds_margin: float = 1.7320508075688772


class AutodecoderTrainConfig(_Strict):
    steps: int = 2000
    batch_objects: int = 4
    views_per_object: int = 4
    multi_frame: bool = True
    lr: float = 5e-4
    betas: tuple[float, float] = (0.5, 0.999)
    lr_decay: Literal["linear", "none"] = "linear"
    lr_final_fraction: float = 0.0
    foreground_weight: float = 10.0
    pyramid_levels: int = 2
    rec_reduction: Literal["sum", "mean"] = "mean"
    extractor: Literal["random_pyramid", "identity"] = "random_pyramid"
    extractor_seed: int = 0
    holdout_views: int = 1
    stratified: bool = True
    log_every: int = 50


class DenoiserConfig(_Strict):
    channels: int = 128
    depth: int = 2
    channel_mult: list[int] = [3, 4]
    attention_resolutions: list[int] = [8, 4]
    cross_attention_resolutions: list[int] = [8, 4]
    cond_dim: int = 1024
    transformer_depth: int = 1
    heads: int = 4
    noise_embed_dim: int = 256
    dropout: float = 0.0


class ScheduleConfig(_Strict):
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    n_steps: int = Field(64, ge=1)
    s_churn: float = 0.0
    s_tmin: float = 0.0
    s_tmax: float = 1e9
    s_noise: float = 1.0
    solver: Literal["heun", "euler"] = "heun"

    @model_validator(mode="after")
    def _check(self):
        if not self.sigma_min < self.sigma_max:
            raise ValueError("sigma_min must be below sigma_max")
        return self


class NormalizationConfig(_Strict):
    per_channel: bool = True
    divide_by: Literal["iqr", "normalized_iqr"] = "iqr"


class ConditioningConfig(_Strict):
    enabled: bool = False
    n_classes: int = 12
    tokens_per_label: int = 4
    seq_len: int = 32
    p_uncond: float = 0.1
    guidance_weight: float = 3.0


class DiffusionTrainConfig(_Strict):
    steps: int = 1000
    batch_size: int = 8
    lr: float = 4.5e-5
    lr_decay: Literal["linear", "none"] = "linear"
    log_every: int = 50


class SynthConfig(_Strict):
    n_objects: int = 8
    n_views: int = 8
    image_size: int = 64
    difficulty: str = "easy"
    gt_resolution: int = 64
    color: tuple[float, float, float] | None = None


class EvalConfig(_Strict):
    n_points: int = 2048
    iso_level: float | None = None
    mesh_resolution: int | None = None
    n_views: int = 5


class RunConfig(_Strict):
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    synth: SynthConfig = SynthConfig()
    render: RenderConfig = RenderConfig()
    embedding: EmbeddingConfig = EmbeddingConfig()
    decoder: DecoderConfig = DecoderConfig()
    articulation: ArticulationConfig = ArticulationConfig()
    autodecoder: AutodecoderTrainConfig = AutodecoderTrainConfig()
    denoiser: DenoiserConfig = DenoiserConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    normalization: NormalizationConfig = NormalizationConfig()
    conditioning: ConditioningConfig = ConditioningConfig()
    diffusion: DiffusionTrainConfig = DiffusionTrainConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def _check(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        if self.embedding.dim != self.decoder.embed_dim:
            raise ValueError("embedding.dim must equal decoder.embed_dim")
        return self


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _coerce(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``key.sub=value`` strings; values are parsed as YAML scalars/lists."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = _coerce(raw)
    return data


def load_config(path=None, overrides=None, seed: int | None = None) -> RunConfig:
    """Load a YAML/JSON config (or a preset name), apply overrides, validate."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists() and (PRESET_DIR / f"{path}.yaml").exists():
            p = PRESET_DIR / f"{path}.yaml"
        raw = yaml.safe_load(p.read_text()) or {}
        base = raw.pop("extends", None)
        if base is not None:
            parent = load_config(base).model_dump(mode="json")
            raw = _merge(parent, raw)
        data = raw
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    return RunConfig.model_validate(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)


def list_presets() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.yaml"))
