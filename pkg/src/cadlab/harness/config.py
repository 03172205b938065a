"""Flat ``key = value`` training configuration."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

SEED_ENV = "CADLAB_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    schema: str = ""
    d: int = 32
    L: int = 2
    d_m: int = 0  # 0 -> d
    d_n: int = 0  # 0 -> d // 2
    q: float = 0.7
    alpha: float = 0.5
    K: int = 16
    dropout: float = 0.1
    warmup: int = 15
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 0  # 0 -> full batch
    seed: int = 0
    mdm: bool = True
    cbdm: bool = True
    masking_mode: str = "single"
    dictionary_mode: str = "learned"
    mnar_alpha: float = 1.0
    template: str = ""
    backbone_epochs: int = 30
    pca_dim: int = 0  # 0 -> min(d, 16)
    bootstrap: int = 1000
    separate_gates: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def dm(self) -> int:
        return self.d_m or self.d

    @property
    def dn(self) -> int:
        return self.d_n or max(1, self.d // 2)

    def validate(self) -> None:
        problems = []
        if self.d < 1 or self.L < 1:
            problems.append("d and L must be >= 1")
        if not 0 < self.q <= 1:
            problems.append(f"q={self.q} outside (0, 1]")
        if self.alpha < 0:
            problems.append(f"alpha={self.alpha} < 0")
        if self.K < 1:
            problems.append(f"K={self.K} < 1")
        if not 0 <= self.dropout < 1:
            problems.append(f"dropout={self.dropout} outside [0, 1)")
        if not 0 <= self.warmup <= self.epochs:
            problems.append(f"warmup={self.warmup} must lie in [0, epochs={self.epochs}]")
        if self.lr <= 0:
            problems.append(f"lr={self.lr} <= 0")
        if self.batch_size < 0 or self.backbone_epochs < 0 or self.bootstrap < 0:
            problems.append("batch_size, backbone_epochs and bootstrap must be >= 0")
        if self.masking_mode not in ("single", "multi"):
            problems.append(f"masking_mode={self.masking_mode!r} not in single|multi")
        if self.dictionary_mode not in ("learned", "random"):
            problems.append(f"dictionary_mode={self.dictionary_mode!r} not in learned|random")
        if self.mnar_alpha < 0:
            problems.append(f"mnar_alpha={self.mnar_alpha} < 0")
        if problems:
            raise ConfigError("; ".join(problems))

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in asdict(self).items())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name: str, kind, raw: str):
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected true/false, got {raw!r}")
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None
    return raw


def parse_config(text: str, env: dict | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments allowed); CADLAB_SEED overrides ``seed``."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        values["seed"] = _coerce("seed", int, env[SEED_ENV])
    return TrainConfig(**values)


def load_config(path, env: dict | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(), env)
