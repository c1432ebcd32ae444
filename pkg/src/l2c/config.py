"""Plain-text ``key = value`` experiment configuration."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

from .cache import DEFAULT_ALPHA, EXACT_ENDPOINT, PAPER_LITERAL
from .data import MixtureSpec
from .model import ModelConfig
from .pretrain import PretrainConfig
from .router_training import RouterTrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # data
    modes: int = 8
    radius: float = 2.0
    std: float = 0.1
    n_data: int = 20000
    # model
    depth: int = 4
    width: int = 32
    heads: int = 2
    tokens: int = 4
    ffn_dim: int = 64
    time_embed_dim: int = 16
    long_skip: bool = False
    # schedule and sampler
    schedule: str = "vp-linear"
    T_train: int = 1000
    grid_steps: int = 20
    grid_kind: str = "uniform-t"
    solver: str = "ddim"
    guidance: float | None = 1.5
    shifted: bool = True
    # pretraining
    pretrain_steps: int = 8000
    pretrain_batch: int = 128
    pretrain_lr: float = 2e-3
    label_drop: float = 0.1
    # router
    lam: float = 1e-3
    theta: float = 0.1
    alpha: float = DEFAULT_ALPHA
    cache_mode: str = PAPER_LITERAL
    skip_policy: str = "coupled"
    cache_above: bool = False
    router_lr: float = 0.01
    router_epochs: int = 1
    router_iters: int = 3000
    router_batch: int = 64
    # randomness and evaluation
    seed: int = 0
    num_seeds: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.modes < 1:
            raise ConfigError("modes must be >= 1")
        if not 0.0 < self.theta < 1.0:
            raise ConfigError(f"theta must lie in (0, 1), got {self.theta}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.cache_mode not in (PAPER_LITERAL, EXACT_ENDPOINT):
            raise ConfigError(f"unknown cache_mode {self.cache_mode!r}")
        if self.solver not in ("ddim", "dpm2"):
            raise ConfigError(f"unknown solver {self.solver!r}")
        if self.skip_policy not in ("coupled", "literal"):
            raise ConfigError(f"unknown skip_policy {self.skip_policy!r}")
        if self.grid_steps < 2 or self.grid_steps % 2:
            raise ConfigError("grid_steps must be an even number >= 2")
        if self.num_seeds < 1:
            raise ConfigError("num_seeds must be >= 1")

    # ------------------------------------------------------------ text form

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls().updated(parse_pairs(text))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    def updated(self, pairs: dict[str, str | Any]) -> "ExperimentConfig":
        """Copy with some keys replaced; string values are parsed by field type."""
        known = {f.name: f for f in fields(self)}
        changes = {}
        for key, raw in pairs.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _parse(key, known[key].type, raw) if isinstance(raw, str) else raw
        try:
            return replace(self, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    # ------------------------------------------------------------ views

    def model_config(self) -> ModelConfig:
        return ModelConfig(depth=self.depth, width=self.width, heads=self.heads,
                           tokens=self.tokens, num_classes=self.modes, long_skip=self.long_skip,
                           time_embed_dim=self.time_embed_dim, ffn_dim=self.ffn_dim)

    def mixture(self) -> MixtureSpec:
        return MixtureSpec(self.modes, self.radius, self.std)

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(steps=self.pretrain_steps, batch=self.pretrain_batch,
                              lr=self.pretrain_lr, label_drop=self.label_drop, seed=self.seed)

    def router_config(self) -> RouterTrainConfig:
        return RouterTrainConfig(lam=self.lam, lr=self.router_lr, epochs=self.router_epochs,
                                 iters_per_epoch=self.router_iters, batch=self.router_batch,
                                 label_drop=self.label_drop, mode=self.cache_mode,
                                 skip_policy=self.skip_policy, seed=self.seed)

    def seeds(self) -> range:
        return range(self.seed, self.seed + self.num_seeds)

    def as_dict(self) -> dict:
        return asdict(self)


def parse_pairs(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in out:
            raise ConfigError(f"line {n}: duplicate key {k!r}")
        out[k] = v
    return out


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, typ, raw: str):
    typ = str(typ)
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ.startswith("float"):
            if "None" in typ and raw.lower() == "none":
                return None
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None
