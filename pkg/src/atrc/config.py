"""Experiment configuration: one JSON document carries every hyperparameter.

Schema (all keys optional; missing keys take the reference values below)::

    {
      "data":   {"height", "width", "min_shapes", "max_shapes", "depth_range",
                 "max_tilt", "color_jitter", "color_mode", "noise_sigma",
                 "light", "seed", "train_count", "test_count"},
      "tasks":  ["semseg", "depth", "normals", "boundary"],
      "loss_weights": {"<task>": float},
      "n_depth_bins": int, "n_codewords": int,
      "model":  {"width", "depth", "feat", "d_k", "d_v", "window", "mode",
                 "context", "arch", "self_attention", "region_source"},
      "train":  {"iters", "batch_size", "lr", "momentum", "weight_decay", "poly_power"},
      "search": {"iters", "batch_size", "lr", "momentum", "weight_decay", "poly_power",
                 "alpha_lr", "lambda_start", "lambda_end", "omega_h_start",
                 "omega_h_end", "freeze_threshold"},
      "seeds": [int], "search_seeds": [int],
      "importance_repetitions": int
    }

``alpha_lr`` null means it is scaled from the reference schedule length.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import fields
from pathlib import Path

from .pipeline.model import ModelConfig
from .pipeline.train import TrainConfig
from .synth_data import SceneSpec

REFERENCE_CONFIG: dict = {
    "data": {"height": 16, "width": 16, "color_mode": "background", "seed": 0,
             "train_count": 512, "test_count": 256},
    "tasks": ["semseg", "depth", "normals", "boundary"],
    "loss_weights": {},
    "n_depth_bins": 40,
    "n_codewords": 40,
    "model": {"width": 16, "depth": 3, "feat": 16, "d_k": 8, "d_v": 8, "window": 5,
              "mode": "none", "self_attention": True, "region_source": "predicted"},
    "train": {"iters": 400, "batch_size": 8, "lr": 0.03},
    "search": {"iters": 300, "batch_size": 8, "lr": 0.03, "alpha_lr": None},
    "seeds": [0, 1, 2],
    "search_seeds": [0, 1, 2, 3, 4],
    "importance_repetitions": 5,
}

_TOP_KEYS = set(REFERENCE_CONFIG)


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "loss_weights":
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(overrides: dict | None = None) -> dict:
    """Reference config with ``overrides`` applied, validated by building every typed view."""
    overrides = overrides or {}
    unknown = set(overrides) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = _merge(REFERENCE_CONFIG, overrides)
    try:
        scene_spec(cfg)
        model_config(cfg)
        train_config(cfg)
        train_config(cfg, search=True)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    if not cfg["seeds"] or not cfg["search_seeds"]:
        raise ConfigError("seed lists must not be empty")
    return cfg


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return resolve_config()
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {p} must hold a JSON object")
    return resolve_config(raw)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _pick(cls, values: dict, drop=()) -> dict:
    names = {f.name for f in fields(cls)}
    extra = set(values) - names - set(drop)
    if extra:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(extra)}")
    return {k: v for k, v in values.items() if k in names}


def scene_spec(cfg: dict) -> SceneSpec:
    d = dict(cfg["data"])
    for key in ("depth_range", "light"):
        if key in d:
            d[key] = tuple(d[key])
    return SceneSpec(**_pick(SceneSpec, d, drop=("train_count", "test_count")))


def model_config(cfg: dict, **changes) -> ModelConfig:
    m = dict(cfg["model"])
    m.update(changes)
    return ModelConfig(**_pick(ModelConfig, m))


def train_config(cfg: dict, search: bool = False) -> TrainConfig:
    return TrainConfig(**_pick(TrainConfig, cfg["search" if search else "train"]))
