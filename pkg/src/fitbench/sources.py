"""Gradient access to a single source model or a logit-averaged ensemble."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import ConfigurationError, NumericError
from .zoo import CrossEntropy, Model, forward, loss_cotangent, vjp


@dataclass(frozen=True, eq=False)
class EnsembleSpec:
    """Ensemble whose logits are the mean of its members' logits."""

    models: tuple[Model, ...]

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        if not self.models:
            raise ConfigurationError("ensemble needs at least one source")
        shapes = {(m.N, m.K) for m in self.models}
        if len(shapes) != 1:
            raise ConfigurationError(f"ensemble members disagree on (N, K): {sorted(shapes)}")

    @property
    def source_ids(self) -> list[str]:
        return [m.id for m in self.models]

    @property
    def id(self) -> str:
        return "+".join(self.source_ids)

    @property
    def N(self) -> int:
        return self.models[0].N

    @property
    def K(self) -> int:
        return self.models[0].K


Source = Union[Model, EnsembleSpec]


def members(source: Source) -> Sequence[Model]:
    return source.models if isinstance(source, EnsembleSpec) else (source,)


def source_logits(source: Source, x: np.ndarray) -> np.ndarray:
    ms = members(source)
    z = forward(ms[0], x)
    for m in ms[1:]:
        z = z + forward(m, x)
    return z / len(ms)


def source_vjp(source: Source, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    ms = members(source)
    g = vjp(ms[0], x, cotangent)
    for m in ms[1:]:
        g = g + vjp(m, x, cotangent)
    return g / len(ms)


def source_predict(source: Source, x: np.ndarray) -> int:
    return int(np.argmax(source_logits(source, x)))


def ce_gradient(source: Source, x: np.ndarray, label: int) -> np.ndarray:
    """Gradient of cross-entropy on the (mean) logits w.r.t. the input."""
    z = source_logits(source, x)
    g = source_vjp(source, x, loss_cotangent(z, CrossEntropy(label)))
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient from {getattr(source, 'id', source)}")
    return g


def jacobian(source: Source, x: np.ndarray) -> np.ndarray:
    """Full logit Jacobian ``(K, N)`` via one batched backward pass."""
    K = source.K
    xs = np.broadcast_to(x, (K, x.shape[-1]))
    return source_vjp(source, xs, np.eye(K))
