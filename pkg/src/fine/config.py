"""Flat run configuration.

Keys are dotted strings. Defaults follow the CMU-MOSEI column of the published
hyperparameters where one exists (batch size scaled down to 32); ``DESK`` holds
the overrides used for CPU-sized runs on the synthetic corpus.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional

from .data import MODALITIES

DEFAULTS: Dict[str, Any] = {
    "seed": 3585,
    "precision": "single",
    "data.path": "",
    "out_dir": "runs/default",
    "batch_size": 32,
    "lr": 3e-5,
    "weight_decay": 0.01,
    "epochs": 50,
    "warmup": 0.1,
    "lr_schedule": "constant",
    "grad_clip": 1.0,
    "checkpoint_every": 0,
    "moq.num_experts": 8,
    "moq.top_k_ratio": 0.75,
    "moq.num_query_tokens": 8,
    "moq.dim.text": 256,
    "moq.dim.audio": 256,
    "moq.dim.video": 256,
    "moq.heads": 1,
    "ftre.reduction_ratio": 0.5,
    "ftre.dim": 0,
    "ftre.critic_dim": 64,
    "ftre.critic_temperature": 0.1,
    "dcq.alpha": 0.3,
    "dcq.s_min": 64,
    "dcq.bins": 7,
    "dcq.tau": 0.1,
    "dcq.epsilon": 1e-8,
    "fusion.layers": 2,
    "fusion.heads": 4,
    "fusion.decoder_queries": 1,
    "loss.lambda_up": 0.5,
    "loss.lambda_cl": 3.0,
    "loss.lambda_aux": 1.0,
    "loss.beta_mi": 0.5,
    "mi_bench.rho": "0.5,0.9",
    "mi_bench.dims": "1,2",
    "mi_bench.steps": 2000,
    "mi_bench.batch_size": 256,
    "mi_bench.lr": 5e-3,
    "disable_moq": False,
    "disable_ftre": False,
    "disable_dcq": False,
    "zero_modalities": "",
}

DESK: Dict[str, Any] = {
    "lr": 1e-3,
    "epochs": 30,
    "moq.num_experts": 4,
    "moq.num_query_tokens": 4,
    "moq.dim.text": 32,
    "moq.dim.audio": 32,
    "moq.dim.video": 32,
    "dcq.s_min": 16,
}

ALIASES = {
    "beta_mi": "loss.beta_mi",
    "lambda_up": "loss.lambda_up",
    "lambda_cl": "loss.lambda_cl",
    "lambda_aux": "loss.lambda_aux",
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: cannot read {value!r} as a boolean")
        return bool(value)
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value}")
        return int(float(value)) if isinstance(value, str) else int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


class RunConfig(Mapping[str, Any]):
    """Validated flat key/value configuration; unknown keys are rejected."""

    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        self._values = dict(DEFAULTS)
        if values:
            self.update(values)

    def update(self, values: Mapping[str, Any]) -> None:
        for k, v in values.items():
            key = ALIASES.get(k, k)
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            self._values[key] = _coerce(key, v)

    def set(self, key: str, value: Any) -> "RunConfig":
        self.update({key: value})
        return self

    def copy(self, **overrides) -> "RunConfig":
        c = RunConfig(self._values)
        if overrides:
            c.update(overrides)
        return c

    def __getitem__(self, key: str) -> Any:
        return self._values[ALIASES.get(key, key)]

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def to_dict(self) -> Dict[str, Any]:
        return dict(self._values)

    def moq_dims(self) -> Dict[str, int]:
        return {m: self[f"moq.dim.{m}"] for m in MODALITIES}

    def task_dim(self) -> int:
        if self["ftre.dim"] > 0:
            return self["ftre.dim"]
        return max(1, int(round(self["moq.dim.text"] * self["ftre.reduction_ratio"])))

    def zeroed(self):
        names = [s.strip() for s in self["zero_modalities"].split(",") if s.strip()]
        bad = set(names) - set(MODALITIES)
        if bad:
            raise ConfigError(f"unknown modalities in zero_modalities: {sorted(bad)}")
        return names


def parse_assignments(items: Iterable[str]) -> Dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, assignments: Iterable[str] = (), desk: bool = False) -> RunConfig:
    """File values, then ``key=value`` overrides, then ``FINE_SEED`` from the environment."""
    cfg = RunConfig(DESK if desk else None)
    if path:
        cfg.update(json.loads(Path(path).read_text()))
    cfg.update(parse_assignments(assignments))
    env_seed = os.environ.get("FINE_SEED")
    if env_seed:
        cfg.set("seed", env_seed)
    return cfg


def desk_config(**overrides) -> RunConfig:
    cfg = RunConfig(DESK)
    cfg.update(overrides)
    return cfg
