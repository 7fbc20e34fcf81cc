"""White-box direction generators: I-FGSM, PGD and DeepFool."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError, PreconditionError
from .geometry import Direction, LineSearchParams, LineSearchResult, min_distortion_along, normalize_direction
from .sources import Source, ce_gradient, jacobian, source_logits, source_predict
from .zoo import Model, Sample

logger = logging.getLogger(__name__)

WHITEBOX_ATTACKS = ("ifgsm", "pgd", "deepfool")


@dataclass(frozen=True)
class WhiteBoxConfig:
    attack_id: str
    epsilon: float = 4 / 255
    steps: int = 20
    step_size: float | None = None  # defaults to epsilon / 4
    seed: int = 0
    overshoot: float = 0.02
    max_iter: int = 50

    def __post_init__(self):
        if self.attack_id not in WHITEBOX_ATTACKS:
            raise ConfigurationError(f"unknown white-box attack {self.attack_id!r}")
        if self.attack_id != "deepfool" and not self.epsilon > 0:
            raise ConfigurationError("epsilon must be > 0 for budgeted attacks")
        if self.steps < 1 or self.max_iter < 1:
            raise ConfigurationError("steps must be >= 1")

    @property
    def alpha(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size


def sign_iterations(
    x: np.ndarray,
    grad_fn: Callable[[np.ndarray, int], np.ndarray],
    epsilon: float,
    steps: int,
    alpha: float,
    start: np.ndarray | None = None,
) -> np.ndarray:
    """Iterated signed-gradient ascent with L-inf and box projection."""
    xa = x.copy() if start is None else np.clip(start, 0.0, 1.0)
    for i in range(steps):
        g = grad_fn(xa, i)
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient during sign iterations")
        xa = xa + alpha * np.sign(g)
        xa = np.clip(xa, x - epsilon, x + epsilon)
        xa = np.clip(xa, 0.0, 1.0)
    return xa


def deepfool(source: Source, x: np.ndarray, y: int, overshoot: float = 0.02, max_iter: int = 50) -> np.ndarray:
    """Untargeted DeepFool with all-class linearization; returns the final point."""
    r_tot = np.zeros_like(x)
    xa = x.copy()
    for _ in range(max_iter):
        z = source_logits(source, xa)
        if int(np.argmax(z)) != y:
            break
        J = jacobian(source, xa)
        w = J - J[y]
        f = z - z[y]
        norms = np.linalg.norm(w, axis=1)
        ratio = np.full(len(z), np.inf)
        ok = norms > 0
        ok[y] = False
        ratio[ok] = np.abs(f[ok]) / norms[ok]
        k = int(np.argmin(ratio))
        if not np.isfinite(ratio[k]):
            raise NumericError("deepfool linearization degenerated: flat logit gaps")
        r = (abs(f[k]) + 1e-4) / norms[k] ** 2 * w[k]
        r_tot = r_tot + r
        xa = np.clip(x + (1.0 + overshoot) * r_tot, 0.0, 1.0)
    return xa


def whitebox_point(model: Source, sample: Sample, cfg: WhiteBoxConfig) -> np.ndarray:
    x, y = np.asarray(sample.x, dtype=np.float64), sample.y
    if source_predict(model, x) != y:
        raise PreconditionError(f"sample {sample.id} is misclassified by {getattr(model, 'id', model)}")
    try:
        if cfg.attack_id == "deepfool":
            return deepfool(model, x, y, cfg.overshoot, cfg.max_iter)
        start = None
        if cfg.attack_id == "pgd":
            rng = np.random.default_rng([cfg.seed, sample.id])
            start = x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
        return sign_iterations(x, lambda xa, _i: ce_gradient(model, xa, y), cfg.epsilon, cfg.steps,
                               cfg.alpha, start)
    except NumericError as exc:
        raise NumericError(f"{cfg.attack_id} on model {getattr(model, 'id', model)}, "
                           f"sample {sample.id}: {exc}") from exc


def run_whitebox(model: Source, sample: Sample, cfg: WhiteBoxConfig) -> Direction:
    xf = whitebox_point(model, sample, cfg)
    return normalize_direction(xf - sample.x, getattr(model, "id", ""), cfg.attack_id, sample.id)


def whitebox_reference_distortions(
    target: Model,
    samples: Sequence[Sample],
    configs: Sequence[WhiteBoxConfig],
    params: LineSearchParams = LineSearchParams(),
) -> tuple[np.ndarray, dict[str, list[LineSearchResult]]]:
    """Per-sample minimum over white-box attacks run on the target itself."""
    if not configs:
        raise ConfigurationError("no white-box configs given")
    per_attack: dict[str, list[LineSearchResult]] = {}
    for cfg in configs:
        per_attack[cfg.attack_id] = [
            min_distortion_along(target, s, run_whitebox(target, s, cfg), params) for s in samples
        ]
    d = np.min([[r.d for r in rs] for rs in per_attack.values()], axis=0)
    return d, per_attack
