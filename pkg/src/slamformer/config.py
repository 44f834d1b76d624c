"""Flat ``key = value`` configuration files."""
from __future__ import annotations

from pathlib import Path

from .errors import ConfigError, DataIOError
from .frontend import FrontendConfig
from .losses import LossConfig
from .model import ModelConfig
from .pipeline import PipelineConfig
from .training import TrainConfig

_MODEL_KEYS = {"layers": int, "d_model": int, "heads": int, "patch": int, "registers": int,
               "mlp_ratio": int, "token_type_embedding": "bool", "freeze_pose_head": "bool"}
_LOSS_KEYS = {"lam": float, "beta": float, "alpha": float, "epsilon": float}
_RUN_KEYS = {"ablation": str, "tau": float, "period": int, "seed": int, "output_dir": str,
             "conf_threshold": float, "max_frames": int, "weights": str, "image_size": "size",
             "window": float}
_TRAIN_KEYS = {"lr": float, "optimizer": str, "momentum": float, "prefix": int, "iters": int,
               "clip_len": int}
KNOWN = {**_MODEL_KEYS, **_LOSS_KEYS, **_RUN_KEYS, **_TRAIN_KEYS}


def _convert(key, raw: str):
    kind = KNOWN[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if kind == "size":
            parts = raw.lower().replace("x", " ").split()
            if len(parts) == 1:
                parts = parts * 2
            h, w = (int(p) for p in parts)
            return (h, w)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment.  Unknown keys and
    duplicates are errors."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in KNOWN:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = _convert(key, val)
    return out


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataIOError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def _pick(values: dict, keys) -> dict:
    return {k: values[k] for k in keys if k in values}


def model_config(values: dict) -> ModelConfig:
    kw = _pick(values, _MODEL_KEYS)
    if "image_size" in values:
        kw["image_hw"] = values["image_size"]
    return ModelConfig(**kw)


def loss_config(values: dict) -> LossConfig:
    return LossConfig(**_pick(values, _LOSS_KEYS))


def pipeline_config(values: dict) -> PipelineConfig:
    fe = _pick(values, ("tau", "max_frames"))
    kw = _pick(values, ("ablation", "period", "seed", "output_dir", "conf_threshold"))
    return PipelineConfig(frontend=FrontendConfig(**fe), model=model_config(values),
                          loss=loss_config(values), **kw)


def train_config(values: dict) -> TrainConfig:
    kw = _pick(values, ("lr", "optimizer", "momentum", "prefix"))
    return TrainConfig(loss=loss_config(values), **kw)
