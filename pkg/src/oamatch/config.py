"""Pipeline configuration and its JSON file format."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

CONFIG_ENV = "OAMATCH_CONFIG"


@dataclass(frozen=True)
class PipelineConfig:
    # interleaving counts of EITM, OATM and the refinement transformer
    l1: int = 2
    l2: int = 2
    l3: int = 2
    gamma: int = 4
    close_kernel: int = 10
    rho: float = 0.2
    window: int = 5
    kappa: float = 0.01
    eta: float = 8.0
    alpha: tuple[float, float, float, float] = (1.0, 1.0, 0.2, 0.2)
    c_fine: int = 128
    c_coarse: int = 256
    backbone_width: int = 64
    positional_encoding: bool = True
    seed: int = 0
    # optimiser (toy training only)
    learning_rate: float = 3e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if len(self.alpha) != 4:
            raise ValueError("alpha needs four weights")
        for name in ("l1", "l2", "l3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.gamma < 2 or self.gamma % 2:
            raise ValueError("gamma must be an even integer >= 2")
        if self.close_kernel < 1:
            raise ValueError("close_kernel must be >= 1")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd integer")
        if self.kappa <= 0 or self.eta <= 0:
            raise ValueError("kappa and eta must be positive")

    @classmethod
    def toy(cls, **changes) -> "PipelineConfig":
        """Narrow widths for desk-scale training; the full widths diverge without normalisation layers."""
        return cls(**{"c_fine": 16, "c_coarse": 32, "backbone_width": 16, **changes})

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["alpha"] = list(self.alpha)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(fields))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, value in data.items():
            default = getattr(cls, key) if key != "alpha" else cls.alpha
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise ValueError(f"config key {key!r} must be a boolean")
            elif isinstance(default, int):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ValueError(f"config key {key!r} must be an integer")
            elif isinstance(default, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ValueError(f"config key {key!r} must be a number")
                value = float(value)
            kwargs[key] = value
        return cls(**kwargs)


def dumps(config: PipelineConfig) -> str:
    return json.dumps(config.to_dict(), indent=2) + "\n"


def save_config(config: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(config))


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Load ``path``, else the file named by $OAMATCH_CONFIG, else the defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return PipelineConfig()
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return PipelineConfig.from_dict(data)
