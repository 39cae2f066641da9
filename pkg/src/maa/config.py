"""Training configuration and the flat ``key=value`` config file format."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .dataio import format_modalities, parse_modalities
from .errors import ConfigError

ADAPTER_MODES = ("independent", "shared", "none")


@dataclass
class TrainConfig:
    # model
    dim: int = 768
    ffn_dim: int = 2048
    heads: int = 8
    layers: int = 2
    adapter_mode: str = "independent"
    activation: str = "gelu"
    pre_ln: bool = False
    dropout: float = 0.1
    ln_eps: float = 1e-5
    init_std: float = 0.02
    modalities: str = "G,L,T"
    max_len: int = 64
    # optimizer
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    # schedule, in epochs; converted to steps once the dataset size is known
    warmup_epochs: float = 1.0
    t0_epochs: float = 10.0
    t_mult: float = 2.0
    eta_min: float = 0.0
    # loop
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    precision: int = 32

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.dim < 1 or self.ffn_dim < 1 or self.heads < 1 or self.layers < 0:
            raise ConfigError("dims, heads must be positive and layers >= 0")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.adapter_mode not in ADAPTER_MODES:
            raise ConfigError(f"adapter_mode must be one of {ADAPTER_MODES}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError("activation must be gelu or relu")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.lr < 0 or self.eta_min < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.warmup_epochs < 0 or self.t0_epochs <= 0 or self.t_mult < 1:
            raise ConfigError("need warmup_epochs >= 0, t0_epochs > 0, t_mult >= 1")
        if self.epochs < 1 or self.batch_size < 1 or self.max_len < 1:
            raise ConfigError("epochs, batch_size, max_len must be >= 1")
        self.modalities = format_modalities(parse_modalities(self.modalities))

    @property
    def modality_ids(self) -> list[int]:
        return parse_modalities(self.modalities)

    @property
    def dtype(self):
        import numpy as np

        return np.float64 if self.precision == 64 else np.float32

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        """Canonical key-sorted ``key=value`` lines."""
        return "".join(f"{k}={v}\n" for k, v in sorted(self.to_dict().items()))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, v in values.items():
            k = k.replace("-", "_")
            if k not in known:
                raise ConfigError(f"unknown config key {k!r}")
            kwargs[k] = _coerce(known[k], v)
        return cls(**kwargs)

    def replace(self, **overrides) -> "TrainConfig":
        d = self.to_dict()
        d.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.from_dict(d)


def _coerce(f: dataclasses.Field, v):
    typ = f.type if isinstance(f.type, str) else f.type.__name__
    if typ == "bool":
        if isinstance(v, bool):
            return v
        s = str(v).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{f.name}: cannot read {v!r} as bool")
    try:
        if typ == "int":
            if isinstance(v, float) and not v.is_integer():
                raise ValueError
            return int(v)
        if typ == "float":
            return float(v)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{f.name}: cannot read {v!r} as {typ}") from e
    return str(v)


def read_config_file(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return values
