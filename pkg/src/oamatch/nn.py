"""Parameter containers and initialisers shared by the learned modules."""

from __future__ import annotations

import dataclasses

import numpy as np

from .tensor import Tensor, matmul


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return param(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))


def orthogonal(rng: np.random.Generator, n: int, scale: float) -> Tensor:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q *= np.sign(np.diag(r))
    return param(scale * q)


def zeros(shape) -> Tensor:
    return param(np.zeros(shape))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten nested dataclasses / lists of tensors into ``{"a.b.0.c": tensor}``."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            out.update(named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(named_tensors(item, f"{prefix}.{i}" if prefix else str(i)))
    return out


def assign_tensors(obj, values: dict[str, Tensor]) -> None:
    """Copy ``values`` into the tensors of ``obj`` in place, checking names and shapes."""
    own = named_tensors(obj)
    missing = sorted(set(own) - set(values))
    extra = sorted(set(values) - set(own))
    if missing or extra:
        raise ValueError(f"weights do not fit the model: missing={missing[:5]} unexpected={extra[:5]}")
    for name, t in own.items():
        src = values[name].data
        if src.shape != t.shape:
            raise ValueError(f"weight {name}: shape {src.shape} != expected {t.shape}")
        t.data = np.array(src, dtype=np.float64)
