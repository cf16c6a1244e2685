"""Run configuration: TOML in, dotted command-line overrides, JSON snapshot out.

A config file has up to five tables plus two top-level keys::

    seed = 0
    out = "runs/demo"

    [federation]   # FederationConfig fields except trainer/model/seed
    [trainer]      # TrainerConfig
    [model]        # ModelConfig
    [data]         # DataConfig
    [convex]       # ConvexConfig

Unknown tables or keys are rejected with the offending dotted name.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli

from .bilevel import TrainerConfig
from .federation import FederationConfig
from .toy_lm import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    vocab_size: int = 64
    n_shared: int = 16
    mixing: float = 0.8
    concentration: float = 0.3
    leak: float = 0.2  # content mass spread uniformly over every category's content tokens
    train_len: int = 50_000
    valid_len: int = 5_000
    test_len: int = 5_000
    mode: str = "in_distribution"
    train_lengths: tuple[int, ...] = ()  # per-client override of train_len
    pretrain_len: int = 0  # 0: pretrain on the pooled client train streams

    def __post_init__(self):
        object.__setattr__(self, "train_lengths", tuple(int(n) for n in self.train_lengths))
        if self.mode not in ("in_distribution", "out_of_distribution"):
            raise ValueError("mode must be 'in_distribution' or 'out_of_distribution'")
        if not 0.0 <= self.mixing <= 1.0:
            raise ValueError("mixing must lie in [0, 1]")
        if not 0.0 <= self.leak <= 1.0:
            raise ValueError("leak must lie in [0, 1]")


@dataclass(frozen=True)
class ConvexConfig:
    quad_instances: int = 100
    quad_max_dim: int = 8
    quad_iters: int = 50
    decoupled_instances: int = 20
    max_d: int = 4
    max_n: int = 20
    max_experts: int = 3
    iterations: int = 200
    directions: int = 1000
    loss: str = "quadratic"
    mu_pen: float = 1.0


_FED_FIELDS = [f.name for f in fields(FederationConfig) if f.name not in ("trainer", "model", "seed")]


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    federation: dict[str, Any] = field(default_factory=dict)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    convex: ConvexConfig = field(default_factory=ConvexConfig)

    def federation_config(self) -> FederationConfig:
        return FederationConfig(seed=self.seed, trainer=self.trainer, model=self.model, **self.federation)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out": self.out,
            "federation": _jsonable(self.federation),
            "trainer": _jsonable(dataclasses.asdict(self.trainer)),
            "model": _jsonable(dataclasses.asdict(self.model)),
            "data": _jsonable(dataclasses.asdict(self.data)),
            "convex": _jsonable(dataclasses.asdict(self.convex)),
        }

    def content_hash(self) -> str:
        """SHA-256 of the canonical JSON form (the output directory is excluded)."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def write_snapshot(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "config.json"
        path.write_text(json.dumps({**self.to_dict(), "content_hash": self.content_hash()}, indent=2, sort_keys=True))
        return path


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d


_SECTIONS = {"trainer": TrainerConfig, "model": ModelConfig, "data": DataConfig, "convex": ConvexConfig}


def _coerce(value, current, name: str):
    """Match an override or TOML value to the type of the field default."""
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return tuple(int(v) for v in value)
    try:
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(current, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected {type(current).__name__}, got {value!r}") from None
    return str(value) if isinstance(current, str) else value


def _build(cls, values: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    kwargs = {}
    for k, v in values.items():
        if k not in known:
            raise ConfigError(f"unknown key '{section}.{k}'")
        kwargs[k] = _coerce(v, getattr(defaults, k), f"{section}.{k}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _build_federation(values: dict) -> dict:
    defaults = FederationConfig()
    out = {}
    for k, v in values.items():
        if k not in _FED_FIELDS:
            raise ConfigError(f"unknown key 'federation.{k}'")
        out[k] = _coerce(v, getattr(defaults, k), f"federation.{k}")
    return out


def from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    unknown = set(raw) - {"seed", "out", "federation", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown key '{sorted(unknown)[0]}'")
    cfg = RunConfig(
        seed=_coerce(raw.get("seed", 0), 0, "seed"),
        out=str(raw.get("out", RunConfig.out)),
        federation=_build_federation(raw.get("federation", {})),
        **{name: _build(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()},
    )
    try:
        cfg.federation_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"federation: {exc}") from None
    return cfg


def load(path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a TOML file (or start from defaults) and apply dotted overrides such as
    ``{"trainer.tau": 10, "federation.method": "local"}``."""
    raw: dict = {}
    if path is not None:
        try:
            raw = tomli.loads(Path(path).read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for key, value in (overrides or {}).items():
        apply_override(raw, key, value)
    return from_dict(raw)


def apply_override(raw: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    if len(parts) > 2 or not all(parts):
        raise ConfigError(f"bad override key '{dotted}'")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"'{p}' is not a table")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, str]:
    """``key=value`` from the command line."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' must look like section.key=value")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()
