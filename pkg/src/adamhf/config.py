"""Run configuration and its ``key=value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .numerics import ConfigurationError


@dataclass
class RunConfig:
    # loss / optimizer
    lam: float = 0.1
    lr: float = 1e-3
    batch_size: int = 2
    n_s: int = 2048
    epochs: int = 20
    beta: float = 0.2
    # architecture
    t_bins: int = 4
    d_model: int = 16
    rank_r: int = 4
    pree_layers: int = 3
    k_min_p: int = 8
    k_max_p: int = 256
    k_min_g: int = 2
    k_max_g: int = 6
    frozen_seed: int = 1234
    missing_placeholder: str = "cls"
    # run
    seed: int = 0
    folds: int = 5
    dataset: str = ""
    out: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigurationError("lam must be >= 0")
        if self.lr < 0:
            raise ConfigurationError("lr must be >= 0")
        if self.batch_size < 1 or self.n_s < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size and n_s must be positive, epochs non-negative")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigurationError("beta must lie in [0, 1]")
        if self.t_bins < 2:
            raise ConfigurationError("t_bins must be >= 2")
        if self.d_model < 2 or self.rank_r < 1:
            raise ConfigurationError("d_model must be >= 2 and rank_r >= 1")
        if self.pree_layers not in (1, 2, 3):
            raise ConfigurationError("pree_layers must be 1, 2 or 3")
        for lo, hi, tag in ((self.k_min_p, self.k_max_p, "p"), (self.k_min_g, self.k_max_g, "g")):
            if not 1 <= lo <= hi:
                raise ConfigurationError(f"need 1 <= k_min_{tag} <= k_max_{tag}")
        if self.missing_placeholder not in ("cls", "zeros"):
            raise ConfigurationError("missing_placeholder must be 'cls' or 'zeros'")
        if self.folds < 2:
            raise ConfigurationError("folds must be >= 2")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_ALIASES = {"lambda": "lam"}


def _coerce(field_type, raw: str, key: str):
    kind = field_type if isinstance(field_type, str) else field_type.__name__
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key=value`` lines (``#`` comments); unknown keys are an error."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = _ALIASES.get(key.strip(), key.strip())
        if key not in types:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(types[key], raw.strip(), key)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: RunConfig) -> str:
    names = {v: k for k, v in _ALIASES.items()}
    return "".join(f"{names.get(f.name, f.name)}={getattr(cfg, f.name)}\n" for f in fields(RunConfig))
