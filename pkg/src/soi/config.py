"""Run configuration: JSON document, documented defaults, --set overrides.

Unknown keys are rejected (a typo must fail loudly, not silently fall back
to a default).  Every command echoes the fully-resolved document into its
output directory before doing any work.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from soi.errors import ConfigError

DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "manifest": None,          # path to a source<TAB>keyword manifest
        "directory": None,         # or: ingest every file under a directory
        "max_concurrency": 4,
        "requests_per_second": 8.0,
        "retries": 2,
        "timeout": 10.0,
        "min_dim": 32,
    },
    "augment": {
        "crop_area_range": [0.2, 1.0],
        "flip_probability": 0.5,
        "jitter_strength": 0.5,
        "grayscale_probability": 0.2,
        "blur_probability": 0.5,
        "blur_sigma_range": [0.1, 2.0],
    },
    "model": {
        "stages": [[16, 1], [32, 1], [64, 1], [128, 1]],
        "input_size": [3, 32, 32],
        "embed_dim": 128,
        "norm_kind": "BIN",
        "balance_gamma": 0.5,
        "head_hidden_dim": 128,
        "head_out_dim": 64,
    },
    "train": {
        "temperature": 0.07,
        "momentum": 0.99,
        "learning_rate": 0.03,
        "sgd_momentum": 0.9,
        "weight_decay": 1e-4,
        "batch_size": 64,
        "queue_capacity": 4096,
        "total_steps": 1000,
        "include_positive": True,
        "lr_schedule": "constant",
        "checkpoint_interval": 0,
    },
    "eval": {
        "n_way": 5,
        "k_shot": 1,
        "q_query": 15,
        "episodes": 600,
        "classifiers": ["LR"],
        "reg": 1.0,
    },
    "paths": {
        "pool_cache": "pool_cache",
        "checkpoints": "checkpoints",
        "reports": "reports",
    },
}


def _merge(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here} must be a section")
            _merge(base[key], value, here)
        else:
            base[key] = value


def load_config(path=None, overrides=(), seed=None) -> dict:
    """Defaults, merged with the JSON file, then ``--set`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config document must be a JSON object")
        _merge(cfg, user)
    for item in overrides:
        apply_set(cfg, item)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def apply_set(cfg: dict, assignment: str) -> None:
    """Apply one ``--set dotted.key=value`` override (value parsed as JSON)."""
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise ConfigError(f"--set needs key=value, got {assignment!r}")
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw  # bare strings are allowed
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key: {key}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key: {key}")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"config key {key} is a section, not a value")
    node[leaf] = value


def echo_config(cfg: dict, out_dir, version: str) -> None:
    """Write the resolved config and tool version before any real work."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"version": version, "config": cfg}
    (out / "config.resolved.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def encoder_config_from(cfg: dict):
    from soi.nn import EncoderConfig

    m = cfg["model"]
    return EncoderConfig(
        stages=tuple(tuple(s) for s in m["stages"]),
        input_size=tuple(m["input_size"]),
        embed_dim=m["embed_dim"],
        norm_kind=m["norm_kind"],
        balance_gamma=m["balance_gamma"],
    )


def head_config_from(cfg: dict):
    from soi.nn import HeadConfig

    return HeadConfig(hidden_dim=cfg["model"]["head_hidden_dim"],
                      out_dim=cfg["model"]["head_out_dim"])


def train_config_from(cfg: dict):
    from soi.contrastive import TrainConfig

    t = cfg["train"]
    try:
        return TrainConfig(seed=cfg["seed"], **t)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def augment_policy_from(cfg: dict, output_size):
    from soi.augment import AugmentationPolicy

    a = cfg["augment"]
    try:
        return AugmentationPolicy(
            crop_area_range=tuple(a["crop_area_range"]),
            flip_probability=a["flip_probability"],
            jitter_strength=a["jitter_strength"],
            grayscale_probability=a["grayscale_probability"],
            blur_probability=a["blur_probability"],
            blur_sigma_range=tuple(a["blur_sigma_range"]),
            output_size=tuple(output_size),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def fetch_config_from(cfg: dict):
    from soi.data import FetchConfig

    d = cfg["data"]
    try:
        return FetchConfig(
            max_concurrency=d["max_concurrency"],
            requests_per_second=d["requests_per_second"],
            retries=d["retries"],
            timeout=d["timeout"],
            min_dim=d["min_dim"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
