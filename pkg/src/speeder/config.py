"""Run configuration: defaults, file/flag merging, variants, hashing.

A configuration is a flat dict.  Every artifact written by training or
evaluation embeds the sha256 of its canonical JSON form so mixed-config
artifacts are rejected instead of silently compared.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

__all__ = ["DEFAULTS", "VARIANTS", "ConfigError", "load_config",
           "apply_variant", "config_hash", "save_config"]


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    # reproducibility
    "seed": 0,
    # fusion backbone
    "d_f": 64,
    "mome_heads": 4,
    "mome_l1": 1,
    "mome_l2": 1,
    # frozen encoders
    "d_text": 32,
    "d_vision_out": 24,
    "d_seq": 32,
    "seq_epochs": 5,
    "seq_lr": 1e-3,
    "seq_batch": 128,
    # prompt language
    "prompt_mode": "fused",
    "include_proxy": True,
    "use_ppl": True,
    "use_state_slot": True,
    "n_max": 50,
    "m_max": 50,
    "title_words": 19,
    "title_buckets": 200,
    # decoder backbone
    "lm_layers": 2,
    "lm_heads": 4,
    "lm_context": 512,
    "lora_rank": 4,
    # gating and modality set
    "gate_mode": "tanh",
    "modalities": ["text", "vision", "seq"],
    # staged optimisation
    "variant": "full",
    "stage_epochs": [2, 2, 2],
    "batch_size": 32,
    "max_lr": 3e-3,
    "warmup_frac": 0.05,
    "min_lr_factor": 0.0,
    # synthetic data generation
    "catalog_size": 500,
    "num_sequences": 2000,
    "rule": "latent-match",
    "pool_negatives": 4,
    "n_range": [9, 15],
    "split_ratios": [0.7, 0.2, 0.1],
}

# Ablation switches.  Each entry maps a variant name to the config keys
# it overrides; staged-optimisation merging is read from "variant" itself.
VARIANTS: dict[str, dict] = {
    "full": {},
    "wo_ppt": {"include_proxy": False},
    "wo_ppl": {"use_ppl": False},
    "wo_spae": {"include_proxy": False, "use_ppl": False,
                "use_state_slot": False},
    "wo_mpo_s1": {},
    "wo_mpo_s1s2": {},
    "wo_vision": {"modalities": ["text", "seq"]},
    "wo_seq": {"modalities": ["text", "vision"]},
    "wo_gate": {"gate_mode": "none"},
    "relu_gate": {"gate_mode": "relu"},
}


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, int):
            return value
        raise ConfigError(f"{key}: expected int, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key}: expected number, got {value!r}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected string, got {value!r}")
    if isinstance(default, list):
        if isinstance(value, (list, tuple)):
            return list(value)
        raise ConfigError(f"{key}: expected list, got {value!r}")
    return value


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then file values, then explicit overrides (highest wins)."""
    cfg = dict(DEFAULTS)
    layers = []
    if path is not None:
        with open(path) as fh:
            try:
                layers.append(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if overrides:
        layers.append(overrides)
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value, DEFAULTS[key])
    if cfg["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg['variant']!r}; "
                          f"choose from {sorted(VARIANTS)}")
    if cfg["prompt_mode"] not in ("fused", "title"):
        raise ConfigError(f"unknown prompt_mode {cfg['prompt_mode']!r}")
    return cfg


def apply_variant(cfg: dict) -> dict:
    """Fold the named ablation's overrides into a copy of the config."""
    out = dict(cfg)
    out.update(VARIANTS[cfg["variant"]])
    return out


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical (sorted, compact) JSON form."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_config(cfg: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
