"""
Run configuration: one YAML file, validated by pydantic, plus flag overrides.

Every command resolves a full `RunConfig` before doing any work, prints it and
writes it next to its outputs. Unknown keys are rejected, and validation errors
surface as `ConfigError` carrying the dotted key path (e.g. `train.clip_len`).

Environment knobs (read via python-dotenv, so a local `.env` works too):
  OWL_LAB_CONFIG   default config path (configs/default.yaml)
  OWL_LAB_THREADS  torch intra-op threads (default 1, keeps runs reproducible)
  OWL_LAB_QUIET    "1" silences tqdm progress bars
  OWL_LAB_SLOW     "1" enables the long directional ablation tests
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

load_dotenv()

SCHEMA_VERSION = 1
REPO_DIR = Path(__file__).resolve().parent
DEFAULT_CONFIG_PATH = REPO_DIR / "configs" / "default.yaml"

SEED_PURPOSES = ("data", "augment", "model", "dropout", "sampler", "eval")


class ConfigError(ValueError):
    """Invalid configuration; `key_path` names the offending dotted key."""

    def __init__(self, key_path: str, message: str):
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataConfig(_Block):
    num_known: int = Field(3, ge=1)
    num_unknown: int = Field(2, ge=1)
    prompt_dim: int = Field(32, ge=2)
    frame_size: int = Field(64, ge=16)
    lane_height: int = Field(16, ge=8)
    fps: float = Field(4.0, gt=0)
    annotation_fps: float = Field(1.0, gt=0)
    duration_s: float = Field(16.0, gt=0)
    train_videos: int = Field(40, ge=0)
    eval_videos: int = Field(20, ge=0)
    stills: int = Field(40, ge=0)
    min_objects: int = Field(1, ge=0)
    max_objects: int = Field(3, ge=0)
    motions: list[Literal["linear", "crossing", "occluding"]] = ["linear", "crossing", "occluding"]
    enter_exit_rate: float = Field(0.3, ge=0, le=1)
    speed_range: tuple[float, float] = (0.01, 0.04)  # frame widths per native frame
    object_size: tuple[int, int] = (8, 14)  # pixels, inclusive

    @model_validator(mode="after")
    def _check(self) -> "DataConfig":
        if self.max_objects < self.min_objects:
            raise ValueError("max_objects must be >= min_objects")
        ratio = self.fps / self.annotation_fps
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("fps must be an integer multiple of annotation_fps")
        if self.object_size[0] > self.object_size[1] or self.object_size[1] >= self.lane_height:
            raise ValueError("object_size must be an increasing range below lane_height")
        if self.speed_range[0] > self.speed_range[1] or self.speed_range[0] < 0:
            raise ValueError("speed_range must be a non-negative increasing range")
        if not self.motions:
            raise ValueError("motions must not be empty")
        return self


class ModelConfig(_Block):
    patch_size: int = Field(8, ge=1)
    dim: int = Field(32, ge=2)
    layers: int = Field(2, ge=0)
    heads: int = Field(4, ge=1)
    qkv_dim: int = Field(32, ge=1)
    mlp_dim: int = Field(128, ge=1)
    num_queries: int = Field(16, ge=1)
    dropout: float = Field(0.1, ge=0, lt=1)
    box_hidden_layers: int = Field(2, ge=0)
    logit_scale_init: float = 5.0
    logit_shift_init: float = -4.0
    dtype: Literal["float32", "float64"] = "float32"
    # Reference scale: 6 layers, 8 heads, 4096 mlp, 1024 qkv, 100 queries.

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if self.qkv_dim % self.heads:
            raise ValueError("qkv_dim must be divisible by heads")
        return self


class TrainConfig(_Block):
    batch_size: int = Field(8, ge=1)  # reference: 32
    base_lr: float = Field(3e-4, gt=0)  # reference: 3e-6 on a frozen large backbone
    warmup_steps: int = Field(200, ge=0)  # reference: 1k
    phase1_steps: int = Field(2000, ge=0)  # pseudo-video only; reference: 100k
    phase2_steps: int = Field(3000, ge=0)  # pseudo + real mixture; reference: 100k
    clip_len: int = Field(4, ge=1)
    supervision: Literal["mixed", "pseudo", "real"] = "mixed"
    pseudo_fraction: float = Field(0.5, ge=0, le=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    grad_clip_norm: float = Field(1.0, gt=0)
    w_cls: float = Field(1.0, ge=0)
    w_l1: float = Field(1.0, ge=0)
    w_giou: float = Field(1.0, ge=0)
    focal_alpha: float = Field(0.3, ge=0, le=1)
    focal_gamma: float = Field(2.0, ge=0)
    log_every: int = Field(50, ge=1)
    eval_every: int = Field(500, ge=0)  # 0 disables in-loop eval
    eval_videos: int = Field(4, ge=0)

    @property
    def total_steps(self) -> int:
        return self.phase1_steps + self.phase2_steps


class AugmentConfig(_Block):
    flip_prob: float = Field(0.5, ge=0, le=1)
    reverse_prob: float = Field(0.5, ge=0, le=1)
    crop_prob: float = Field(0.5, ge=0, le=1)
    crop_frac: float = Field(0.75, gt=0, le=1)  # ~480x640 out of a 640x853 original
    subsample: bool = True
    mosaic_prob: float = Field(0.5, ge=0, le=1)
    pseudo_video_len: int = Field(4, ge=2)
    pseudo_crop_frac: float = Field(0.5, gt=0, le=1)
    min_retained: float = Field(0.5, ge=0, le=1)


class EvalConfig(_Block):
    thresholds: list[float] = [round(0.05 * i, 2) for i in range(1, 20)]
    grid_size: int = Field(64, ge=1)
    calibration_factor: float = Field(0.3, ge=0, le=1)
    enforce_constraint: bool = True
    eval_fps: float = Field(1.0, gt=0)
    bucket_edges: tuple[float, float] = (3.0, 10.0)  # seconds
    slot_floor: float = Field(0.2, gt=0, lt=1)  # probability space

    @field_validator("thresholds")
    @classmethod
    def _increasing(cls, v: list[float]) -> list[float]:
        if not v:
            raise ValueError("at least one threshold is required")
        if any(not 0 < t < 1 for t in v):
            raise ValueError("thresholds must lie in (0, 1)")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("thresholds must be strictly increasing")
        return v


class BaselineConfig(_Block):
    sim_threshold: float = Field(0.5, ge=-1, le=1)
    top_k: int = Field(8, ge=1)


class RunConfig(_Block):
    version: Literal[1] = SCHEMA_VERSION
    seed: int = Field(0, ge=0)
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    augment: AugmentConfig = AugmentConfig()
    eval: EvalConfig = EvalConfig()
    baseline: BaselineConfig = BaselineConfig()


# ---------------------------------------------------------------------------
# Loading and overrides
# ---------------------------------------------------------------------------
def default_config_path() -> Path:
    return Path(os.getenv("OWL_LAB_CONFIG") or DEFAULT_CONFIG_PATH)


def _set_dotted(raw: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = raw
    for i, key in enumerate(keys[:-1]):
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(".".join(keys[: i + 1]), "is not a block")
        node = child
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """`train.clip_len=2` -> ("train.clip_len", 2); the value is parsed as YAML."""
    key, sep, value = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError("", f"override must look like key.path=value, got {text!r}")
    return key, yaml.safe_load(value) if value.strip() else None


def validate_config(raw: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        key_path = ".".join(str(part) for part in first["loc"])
        raise ConfigError(key_path, first["msg"]) from exc


def load_config(
    path: str | os.PathLike | None = None,
    overrides: list[tuple[str, Any]] | None = None,
) -> RunConfig:
    """Read YAML (default path when None), apply dotted overrides, validate."""
    cfg_path = Path(path) if path is not None else default_config_path()
    raw: dict = {}
    if cfg_path.exists():
        try:
            loaded = yaml.safe_load(cfg_path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError("", f"{cfg_path} is not valid YAML: {exc}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError("", f"{cfg_path} must contain a mapping")
        raw = loaded or {}
    elif path is not None:
        raise ConfigError("", f"config file not found: {cfg_path}")
    for key, value in overrides or []:
        _set_dotted(raw, key, value)
    return validate_config(raw)


def with_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    raw = cfg.model_dump(mode="json")
    for key, value in overrides.items():
        _set_dotted(raw, key, value)
    return validate_config(raw)


def resolved_yaml(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)


def write_resolved(cfg: RunConfig, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.yaml"
    path.write_text(resolved_yaml(cfg), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Seeds and runtime knobs
# ---------------------------------------------------------------------------
def derive_seed(root: int, purpose: str) -> int:
    """Stable 63-bit child seed for one purpose (data, augment, model, ...)."""
    digest = hashlib.sha256(f"{root}:{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def quiet() -> bool:
    return os.getenv("OWL_LAB_QUIET", "0").lower() in ("1", "true", "yes")


def slow_tests_enabled() -> bool:
    return os.getenv("OWL_LAB_SLOW", "0").lower() in ("1", "true", "yes")


def configure_torch() -> int:
    """Pin torch threads from OWL_LAB_THREADS; returns the thread count used."""
    import torch

    threads = max(1, int(os.getenv("OWL_LAB_THREADS", "1")))
    torch.set_num_threads(threads)
    return threads
