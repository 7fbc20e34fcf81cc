"""Transferable direction generators run on sources only (DI, TAIG, DWP analogs).

All three share the sign-gradient loop of :func:`fitbench.whitebox.sign_iterations`
and differ in the gradient they feed it:

* ``di``: gradient at a randomly transformed input (per-feature rescaling plus
  zero-masking of a random subset of coordinates), applied with probability p.
* ``taig``: integrated gradients of the loss along the straight path from a
  zero baseline.
* ``dwp``: mean gradient over copies of the source with a random fraction of
  weights zeroed, fresh masks at every step.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, PreconditionError
from .geometry import Direction, normalize_direction
from .sources import EnsembleSpec, Source, ce_gradient, members, source_predict, source_vjp
from .whitebox import sign_iterations
from .zoo import Layer, Model, Sample

TRANSFER_ATTACKS = ("di", "taig", "dwp")


@dataclass(frozen=True)
class TransferConfig:
    attack_id: str
    epsilon: float = 8 / 255
    steps: int = 10
    step_size: float | None = None  # defaults to epsilon / 4
    di_prob: float = 0.5
    di_max_pad: float = 0.1
    taig_steps: int = 16
    dwp_copies: int = 4
    dwp_prune: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.attack_id not in TRANSFER_ATTACKS:
            raise ConfigurationError(f"unknown transfer attack {self.attack_id!r}")
        if not self.epsilon > 0 or self.steps < 1:
            raise ConfigurationError("need epsilon > 0 and steps >= 1")
        if not 0.0 <= self.di_prob <= 1.0 or not 0.0 <= self.di_max_pad < 1.0:
            raise ConfigurationError("DI parameters out of range")
        if self.taig_steps < 1 or self.dwp_copies < 1 or not 0.0 <= self.dwp_prune < 1.0:
            raise ConfigurationError("TAIG/DWP parameters out of range")

    @property
    def alpha(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size

    def with_epsilon(self, epsilon: float) -> "TransferConfig":
        return TransferConfig(**{**self.__dict__, "epsilon": epsilon})


def path_integral(grad_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, baseline: np.ndarray,
                  steps: int) -> np.ndarray:
    """Midpoint-rule integrated gradients of ``grad_fn`` from baseline to x."""
    if steps < 1:
        raise ConfigurationError("integrated gradients need at least one step")
    diff = x - baseline
    alphas = (np.arange(steps) + 0.5) / steps
    total = np.zeros_like(x)
    for a in alphas:
        total += grad_fn(baseline + a * diff)
    return diff * total / steps


def integrated_gradients(model: Source, x: np.ndarray, baseline: np.ndarray, steps: int,
                         class_index: int) -> np.ndarray:
    """Integrated gradients of one class logit."""
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    onehot = np.zeros(model.K)
    onehot[class_index] = 1.0
    return path_integral(lambda p: source_vjp(model, p, onehot), x, baseline, steps)


def _pruned(model: Model, fraction: float, rng: np.random.Generator) -> Model:
    layers = []
    for l in model.layers:
        keep = rng.random(l.weight.shape) >= fraction
        layers.append(Layer(l.weight * keep, l.bias, l.activation))
    return model.with_layers(layers)


def _pruned_source(source: Source, fraction: float, rng: np.random.Generator) -> Source:
    ms = [_pruned(m, fraction, rng) for m in members(source)]
    return EnsembleSpec(tuple(ms)) if isinstance(source, EnsembleSpec) else ms[0]


def _gradient_fn(source: Source, y: int, cfg: TransferConfig, rng: np.random.Generator):
    if cfg.attack_id == "di":
        def grad(xa, _i):
            if rng.random() >= cfg.di_prob:
                return ce_gradient(source, xa, y)
            scale = rng.uniform(1.0 - cfg.di_max_pad, 1.0 + cfg.di_max_pad, size=xa.shape)
            keep = rng.random(xa.shape) >= rng.uniform(0.0, cfg.di_max_pad)
            gate = scale * keep
            return gate * ce_gradient(source, np.clip(xa * gate, 0.0, 1.0), y)
        return grad
    if cfg.attack_id == "taig":
        def grad(xa, _i):
            return path_integral(lambda p: ce_gradient(source, p, y), xa, np.zeros_like(xa), cfg.taig_steps)
        return grad

    def grad(xa, _i):
        total = np.zeros_like(xa)
        for _ in range(cfg.dwp_copies):
            total += ce_gradient(_pruned_source(source, cfg.dwp_prune, rng), xa, y)
        return total / cfg.dwp_copies
    return grad


def transfer_point(source: Source, sample: Sample, cfg: TransferConfig) -> np.ndarray:
    x, y = np.asarray(sample.x, dtype=np.float64), sample.y
    for m in members(source):
        if source_predict(m, x) != y:
            raise PreconditionError(f"sample {sample.id} is misclassified by source {m.id}")
    rng = np.random.default_rng([cfg.seed, sample.id])
    return sign_iterations(x, _gradient_fn(source, y, cfg, rng), cfg.epsilon, cfg.steps, cfg.alpha)


def run_transfer(source: Source, sample: Sample, cfg: TransferConfig) -> Direction:
    xf = transfer_point(source, sample, cfg)
    return normalize_direction(xf - sample.x, source.id, cfg.attack_id, sample.id)
