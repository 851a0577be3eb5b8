"""Run configuration: nested dataclasses, JSON files and dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import WorldConfig
from .model import ModelConfig


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    # paper scale: 1600 (representation stage) / 1440 (generative stage)
    batch_size: int = 64
    stage2_batch_size: int = 32
    warmup_steps: int = 300
    nitc_steps: int = 1500
    post_refresh_steps: int = 500
    stage2_steps: int = 800
    lam: float = 0.5
    omega_max: float = 0.9
    tau: float = 1.0
    seed: int = 0
    strict_itc_denominator: bool = False
    reestimate_every: int = 0
    use_nitc: bool = True  # False: the "w/o NA" ablation
    use_concepts: bool = True  # False: the "w/o CE" ablation
    num_concepts: int = 3
    w_contrastive: float = 1.0
    w_citm: float = 1.0
    w_citg: float = 1.0
    refresh_threshold: float = 0.5
    max_decode_len: int = 8
    max_grad_norm: float = 0.0
    stage2_lr: float = 1e-4
    lm_pretrain_steps: int = 300
    lm_pretrain_lr: float = 3e-3
    lm_pretrain_size: int = 400

    def validate(self) -> None:
        for name in ("warmup_steps", "nitc_steps", "post_refresh_steps", "stage2_steps", "reestimate_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0.0 < self.omega_max < 1.0:
            raise ValueError("omega_max must lie in (0, 1)")


@dataclass(frozen=True)
class EvalConfig:
    eval_size: int = 100
    eval_seed: int = 10_000
    heldout_size: int = 100
    heldout_seed: int = 20_000
    k_candidates: int = 16


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    encoder_seed: int = 7
    decoder_seed: int = 11
    stub_seed: int = 99
    min_count: int = 5

    def with_seed(self, seed: int) -> "RunConfig":
        """Same run with every seeded sub-config moved to ``seed``."""
        return dataclasses.replace(
            self,
            seed=seed,
            world=dataclasses.replace(self.world, seed=seed),
            model=dataclasses.replace(self.model, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )


_NESTED = {"world": WorldConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}


def to_dict(cfg) -> dict[str, Any]:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def _coerce(current: Any, value: Any, key: str) -> Any:
    if isinstance(current, bool):
        if isinstance(value, str):
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = json.loads(value)
        return tuple(float(v) for v in value)
    return value


def _build(cls, data: dict[str, Any], prefix: str = ""):
    names = {f.name: f for f in dataclasses.fields(cls)}
    default = cls()
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise KeyError(f"unknown config key {prefix}{key}")
        cur = getattr(default, key)
        if key in _NESTED and cls is RunConfig:
            if not isinstance(value, dict):
                raise ValueError(f"{prefix}{key} must be an object")
            kwargs[key] = _build(_NESTED[key], value, f"{key}.")
        else:
            kwargs[key] = _coerce(cur, value, prefix + key)
    return cls(**kwargs)


_SEEDED = ("world", "model", "train")


def from_dict(data: dict[str, Any]) -> RunConfig:
    """Build a RunConfig; sub-configs without an explicit seed inherit the top-level one."""
    data = json.loads(json.dumps(data))
    top = data.get("seed", 0)
    for key in _SEEDED:
        sub = data.setdefault(key, {})
        if isinstance(sub, dict):
            sub.setdefault("seed", top)
    return _build(RunConfig, data)


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``dotted.key=value`` strings to a plain config dict."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise KeyError(f"unknown config key {key}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[parts[-1]] = value
    return data


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    overrides = list(overrides)
    keys = {o.split("=", 1)[0].strip() for o in overrides if "=" in o}
    if "seed" in keys:
        # a top-level seed override reseeds every sub-config not overridden on its own
        for sub in _SEEDED:
            if f"{sub}.seed" not in keys and isinstance(data.get(sub), dict):
                data[sub].pop("seed", None)
    data = apply_overrides(data, overrides)
    return from_dict(data)


def defaults_json() -> str:
    return json.dumps(to_dict(RunConfig()), indent=2, sort_keys=True)
