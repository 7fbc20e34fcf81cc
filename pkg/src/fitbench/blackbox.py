"""Decision-only reference attack: random ray search plus geometric refinement."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, PreconditionError
from .geometry import LineSearchParams
from .zoo import Model, Sample


@dataclass(frozen=True)
class BlackBoxConfig:
    budget: int = 2000
    restarts: int = 5
    seed: int = 0
    theta0: float = 0.5
    shrink: float = 0.1
    refine_rtol: float = 1e-3

    def __post_init__(self):
        if self.budget < 100:
            raise ConfigurationError(f"black-box budget must be >= 100, got {self.budget}")
        if self.restarts < 1:
            raise ConfigurationError("restarts must be >= 1")


class DecisionOracle:
    """Top-1 label access to a model with an exact query counter and a hard budget."""

    def __init__(self, model: Model, budget: int = -1):
        self.model = model
        self.budget = budget
        self.queries = 0
        self._kernel = model.kernel

    @property
    def remaining(self) -> int:
        return -1 if self.budget < 0 else max(0, self.budget - self.queries)

    @property
    def exhausted(self) -> bool:
        return self.budget >= 0 and self.queries >= self.budget

    def probe(self, x: np.ndarray, u: np.ndarray, delta: float) -> int:
        if self.exhausted:
            raise RuntimeError("query budget exhausted")
        self.queries += 1
        return self._kernel.probe(x, u, delta)

    def classify(self, x: np.ndarray) -> int:
        return self.probe(x, np.zeros_like(x), 0.0)

    def line_search(self, x, u, y, params: LineSearchParams):
        d, label, q, found, clipped = self._kernel.line_search(
            x, u, y, params.d0, params.cap, params.tol, self.remaining
        )
        self.queries += q
        return d, found


@dataclass(frozen=True)
class BlackBoxResult:
    d: float
    found: bool
    queries: int
    direction: np.ndarray | None

    @property
    def status(self) -> str:
        return "found" if self.found else "not-found"


def _random_direction(rng: np.random.Generator, N: int) -> np.ndarray:
    u = rng.normal(size=N)
    return u * (np.sqrt(N) / np.linalg.norm(u))


def run_blackbox(target: Model, sample: Sample, cfg: BlackBoxConfig = BlackBoxConfig(),
                 params: LineSearchParams = LineSearchParams()) -> BlackBoxResult:
    """Smallest distortion found with at most ``cfg.budget`` decision queries.

    ``restarts`` random rays are line-searched first. The best ray is then
    rotated by an angle ``theta`` toward a random orthogonal direction; a
    single query at a reduced distortion decides acceptance, an accepted
    rotation is followed by geometric shrinking and a short bisection. The
    angle grows on success and decays on failure. The trajectory never
    depends on the budget, so a larger budget only extends it.
    """
    x, y = np.asarray(sample.x, dtype=np.float64), sample.y
    if target.kernel.predict(x) != y:
        raise PreconditionError(f"sample {sample.id} is misclassified by {target.id}")
    N = x.size
    rng = np.random.default_rng([cfg.seed, sample.id])
    oracle = DecisionOracle(target, cfg.budget)

    best_u, best_d = None, params.cap
    for _ in range(cfg.restarts):
        if oracle.exhausted:
            break
        u = _random_direction(rng, N)
        d, found = oracle.line_search(x, u, y, params)
        if found and d < best_d:
            best_u, best_d = u, d
    if best_u is None:
        return BlackBoxResult(params.cap, False, oracle.queries, None)

    u, theta = best_u, cfg.theta0
    while not oracle.exhausted:
        v = rng.normal(size=N)
        v -= (v @ u) / N * u
        v *= np.sqrt(N) / np.linalg.norm(v)
        cand = np.cos(theta) * u + np.sin(theta) * v
        mu = cfg.shrink * theta
        hi = best_d * (1.0 - mu)
        if oracle.probe(x, cand, hi) == y:
            theta = max(theta * 0.92, 1e-3)
            continue
        lo = None
        while not oracle.exhausted:
            t = hi * (1.0 - mu)
            if oracle.probe(x, cand, t) != y:
                hi = t
            else:
                lo = t
                break
        if lo is not None:
            while not oracle.exhausted and hi - lo > cfg.refine_rtol * hi:
                mid = 0.5 * (lo + hi)
                if oracle.probe(x, cand, mid) != y:
                    hi = mid
                else:
                    lo = mid
        u, best_d = cand, hi
        theta = min(theta * 1.5, 1.5)
    return BlackBoxResult(float(best_d), True, oracle.queries, u)


def blackbox_reference_distortions(
    target: Model,
    samples: Sequence[Sample],
    configs: Sequence[BlackBoxConfig],
    params: LineSearchParams = LineSearchParams(),
) -> tuple[np.ndarray, list[list[BlackBoxResult]]]:
    """Per-sample minimum over black-box runs."""
    if not configs:
        raise ConfigurationError("no black-box configs given")
    runs = [[run_blackbox(target, s, cfg, params) for s in samples] for cfg in configs]
    d = np.min([[r.d for r in rs] for rs in runs], axis=0)
    return d, runs
