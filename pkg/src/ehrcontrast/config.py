"""Training configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, TypeVar

from .cohort import SyntheticConfig
from .objectives import DENOMINATOR_MODES, LossWeights

REGIMES = ("ce", "intermodal", "ce+intermodal", "global", "ce+global", "ce+global-augmented")
COHORT_PREFIX = "cohort."


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    loss_regime: str = "ce"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    dropout: float = 0.2
    alpha: float = 0.2
    beta: float = 1.0
    tau: float = 0.07
    denominator_mode: str = "include-positive"
    window: int = 8
    rel_clip: int = 8
    d: int = 32
    d_t: int = 8
    d_f: int = 32
    d_c: int = 32
    n_heads: int = 1
    n_layers: int = 1
    max_len: int = 512
    p_max: int = 512
    encoder_mode: str = "linear"
    augment_lambda: float = 0.25
    probe_c: float = 1.0
    n_variables: int = 0
    static_dim: int = 0
    embed_dim: int = 0
    n_outcomes: int = 0
    seed: int = 0
    train_frac: float = 0.7
    val_frac: float = 0.15
    test_frac: float = 0.15

    def __post_init__(self):
        if self.loss_regime not in REGIMES:
            raise ConfigError(f"loss_regime must be one of {REGIMES}, got {self.loss_regime!r}")
        if self.denominator_mode not in DENOMINATOR_MODES:
            raise ConfigError(f"denominator_mode must be one of {DENOMINATOR_MODES}")
        if abs(self.train_frac + self.val_frac + self.test_frac - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.tau <= 0:
            raise ConfigError("lr and tau must be positive")
        if self.uses_contrast and self.alpha <= 0:
            raise ConfigError(f"regime {self.loss_regime!r} needs alpha > 0")
        if self.uses_ce and self.beta <= 0:
            raise ConfigError(f"regime {self.loss_regime!r} needs beta > 0")

    @property
    def uses_ce(self) -> bool:
        return self.loss_regime.startswith("ce")

    @property
    def uses_contrast(self) -> bool:
        return self.loss_regime != "ce"

    @property
    def contrast_kind(self) -> str:
        """Which contrastive term the regime optimises (``ce`` still reports the global one)."""
        return "intermodal" if "intermodal" in self.loss_regime else "global"

    @property
    def augmented(self) -> bool:
        return self.loss_regime.endswith("-augmented")

    def loss_weights(self) -> LossWeights:
        alpha = self.alpha if self.uses_contrast else 0.0
        beta = self.beta if self.uses_ce else 0.0
        return LossWeights(alpha, beta)

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_frac, self.val_frac, self.test_frac)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return dump_config(self)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


T = TypeVar("T")


def _coerce(cls, name: str, raw: str, lineno: int | None = None) -> Any:
    types = {f.name: f.type for f in fields(cls)}
    if name not in types:
        where = f"line {lineno}: " if lineno else ""
        raise ConfigError(f"{where}unknown key {name!r} for {cls.__name__}")
    kind = types[name]
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None


def parse_pairs(text: str) -> list[tuple[int, str, str]]:
    pairs = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        pairs.append((lineno, key, value))
    return pairs


def build(cls: type[T], pairs, base: T | None = None) -> T:
    values = dataclasses.asdict(base) if base is not None else {}
    for lineno, key, raw in pairs:
        values[key] = _coerce(cls, key, raw, lineno)
    try:
        return cls(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(text: str) -> TrainConfig:
    return build(TrainConfig, parse_pairs(text))


def parse_synthetic_config(text: str) -> SyntheticConfig:
    return build(SyntheticConfig, parse_pairs(text))


def parse_experiment_config(text: str) -> tuple[TrainConfig, SyntheticConfig]:
    """Training keys plus ``cohort.``-prefixed synthetic-cohort keys in one file."""
    train, cohort = [], []
    for lineno, key, raw in parse_pairs(text):
        if key.startswith(COHORT_PREFIX):
            cohort.append((lineno, key[len(COHORT_PREFIX):], raw))
        else:
            train.append((lineno, key, raw))
    return build(TrainConfig, train), build(SyntheticConfig, cohort)


def dump_config(cfg, prefix: str = "") -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        lines.append(f"{prefix}{f.name} = {value!r}" if isinstance(value, float) else f"{prefix}{f.name} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
