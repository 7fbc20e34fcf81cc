"""Direction normalization and the boundary line search along a direction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateDirectionError, PreconditionError
from .zoo import Model, Sample


@dataclass(frozen=True, eq=False)
class Direction:
    """Perturbation direction scaled to Euclidean norm sqrt(N)."""

    u: np.ndarray
    source_id: str = ""
    attack_id: str = ""
    sample_id: int = -1


@dataclass(frozen=True)
class LineSearchResult:
    d: float
    adversarial_label: int
    queries: int
    found: bool
    clipped: bool

    @property
    def status(self) -> str:
        return "found" if self.found else "not-found"


@dataclass(frozen=True)
class LineSearchParams:
    cap: float = 50.0
    tol: float = 1e-4
    d0: float = 1e-3

    def __post_init__(self):
        if not (self.cap > 0 and self.tol > 0 and self.d0 > 0):
            raise ConfigurationError(f"line search needs cap, tol, d0 > 0: {self}")

    def query_bound(self, bracket: float | None = None) -> int:
        """Worst-case target queries of one search."""
        bracket = self.cap / 2 if bracket is None else bracket
        expo = math.ceil(math.log2(self.cap / self.d0))
        bis = max(0, math.ceil(math.log2(max(bracket, self.tol) / self.tol)))
        return expo + bis + 2


def normalize_direction(raw, source_id: str = "", attack_id: str = "", sample_id: int = -1) -> Direction:
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise DegenerateDirectionError("direction has non-finite components")
    norm = float(np.linalg.norm(raw))
    if norm == 0.0:
        raise DegenerateDirectionError("direction is the zero vector")
    u = raw * (math.sqrt(raw.size) / norm)
    u.setflags(write=False)
    return Direction(u, source_id, attack_id, sample_id)


def _as_vector(direction) -> np.ndarray:
    return direction.u if isinstance(direction, Direction) else np.asarray(direction, dtype=np.float64)


def min_distortion_along(
    target: Model,
    sample: Sample,
    direction,
    params: LineSearchParams = LineSearchParams(),
    max_queries: int = -1,
) -> LineSearchResult:
    """Smallest ray parameter along ``direction`` that flips the target.

    Queried points are clipped to the unit box; the reported ``d`` is the ray
    parameter before clipping. A non-monotone ray returns the first flip the
    doubling probes bracket.
    """
    kernel = target.kernel
    if kernel.predict(sample.x) != sample.y:
        raise PreconditionError(f"sample {sample.id} is misclassified by {target.id}")
    u = _as_vector(direction)
    d, label, queries, found, clipped = kernel.line_search(
        sample.x, u, sample.y, params.d0, params.cap, params.tol, max_queries
    )
    return LineSearchResult(float(d), int(label), int(queries), bool(found), bool(clipped))


def is_adversarial(model: Model, sample: Sample, direction, d: float) -> bool:
    return model.kernel.probe(sample.x, _as_vector(direction), d) != sample.y
