"""Run configuration: defaults < config file < MS2S_* environment < flags.

Every key has a typed default; unknown keys are rejected wherever they
come from.  The resolved view is written next to a run's outputs.
"""

from __future__ import annotations

import json
import os
from dataclasses import fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .model import ModelConfig
from .storage import write_text_atomic

ENV_PREFIX = "MS2S_"

# key -> (default, type); None defaults defer to the model preset
SCHEMA: dict[str, tuple[Any, type]] = {
    "seed": (0, int),
    "jobs": (1, int),
    "dtype": ("float32", str),
    # model
    "preset": ("desk", str),
    "d_model": (None, int),
    "heads": (None, int),
    "encoder_blocks": (None, int),
    "decoder_blocks": (None, int),
    "ffn_dim": (None, int),
    "dropout": (None, float),
    "conv_channels": (None, int),
    "t_out": (None, int),
    "n_max": (4, int),
    "retrieval": ("dim", str),
    "top_r": (8, int),
    # features / initialization
    "n_mels": (40, int),
    "embed_window": (1.0, float),
    "embed_hop": (0.5, float),
    "memory_k": (32, int),
    "vad_db": (-40.0, float),
    # training
    "epochs": (6, int),
    "batch_size": (8, int),
    "lr": (1e-4, float),
    "mixup": (False, bool),
    "mixup_alpha": (0.5, float),
    "mask_flip": (0.1, float),
    # inference / scoring
    "iters": (2, int),
    "overlap": (0.25, float),
    "threshold": (0.5, float),
    "median_win": (11, int),
    "min_seg": (0.2, float),
    "min_gap": (0.1, float),
    "collar": (0.25, float),
}

MODEL_KEYS = {f.name for f in fields(ModelConfig)} & set(SCHEMA)


def _coerce(key: str, value: Any, source: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r} (from {source})")
    default, typ = SCHEMA[key]
    if value is None:
        return None
    try:
        if typ is bool and isinstance(value, str):
            low = value.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(value)
            return low in ("1", "true", "yes", "on")
        if typ is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}={value!r} from {source} is not a valid {typ.__name__}") from exc


def load_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return {k: _coerce(k, v, str(path)) for k, v in data.items()}


def from_env(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX) :].lower()
            out[key] = _coerce(key, value, f"${name}")
    return out


def resolve(file_path=None, flags: Mapping[str, Any] | None = None, environ: Mapping[str, str] | None = None) -> dict:
    """Merge the four layers; flags set to None count as absent."""
    cfg = {k: d for k, (d, _) in SCHEMA.items()}
    if file_path is not None:
        cfg.update(load_file(file_path))
    cfg.update(from_env(environ))
    for k, v in (flags or {}).items():
        if v is not None:
            cfg[k] = _coerce(k, v, "command line")
    if cfg["jobs"] < 1:
        raise ConfigError("jobs must be at least 1")
    if cfg["dtype"] not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {cfg['dtype']!r}")
    return cfg


def model_config(cfg: Mapping[str, Any]) -> ModelConfig:
    presets = {"desk": ModelConfig.desk, "tiny": ModelConfig.tiny, "paper": ModelConfig}
    if cfg["preset"] not in presets:
        raise ConfigError(f"unknown preset {cfg['preset']!r}; choose from {sorted(presets)}")
    overrides = {k: cfg[k] for k in MODEL_KEYS if cfg.get(k) is not None}
    overrides["n_feats"] = cfg["n_mels"]
    overrides["seed"] = cfg["seed"]
    return presets[cfg["preset"]](**overrides)


def write_sidecar(out_dir, cfg: Mapping[str, Any], command: str) -> Path:
    path = Path(out_dir) / f"{command}.config.json"
    write_text_atomic(path, json.dumps({"command": command, **cfg}, indent=1, sort_keys=True) + "\n")
    return path
