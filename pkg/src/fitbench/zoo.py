"""Synthetic dataset, small classifiers and the trained model zoo.

Models are plain stacks of affine layers with an elementwise nonlinearity.
Everything here is numpy; the per-query decision path used by attacks lives
in :mod:`fitbench.kernels`.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, InputError, TrainingError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("identity", "tanh", "relu")


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: int
    id: int


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    K: int
    N: int
    seed: int

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    @property
    def n_eval(self) -> int:
        return len(self.y_eval)

    def eval_ids(self) -> np.ndarray:
        return np.arange(self.n_train, self.n_train + self.n_eval)

    def samples(self, split: str = "eval") -> list[Sample]:
        if split == "train":
            return [Sample(x, int(y), i) for i, (x, y) in enumerate(zip(self.x_train, self.y_train))]
        if split == "eval":
            offset = self.n_train
            return [
                Sample(x, int(y), offset + i) for i, (x, y) in enumerate(zip(self.x_eval, self.y_eval))
            ]
        raise ConfigurationError(f"unknown split {split!r}")

    def sample(self, sample_id: int) -> Sample:
        if 0 <= sample_id < self.n_train:
            return Sample(self.x_train[sample_id], int(self.y_train[sample_id]), sample_id)
        j = sample_id - self.n_train
        if 0 <= j < self.n_eval:
            return Sample(self.x_eval[j], int(self.y_eval[j]), sample_id)
        raise InputError(f"no sample with id {sample_id}")


def generate_dataset(seed: int, n_train: int, n_eval: int, K: int, N: int) -> Dataset:
    """Class-conditional Gaussian mixtures warped by a fixed random nonlinearity.

    Each class owns three latent clusters in a low-dimensional latent space;
    latent points are pushed through a random affine map plus a random
    sinusoidal warp into N features and clipped to [0, 1].
    """
    if K < 3 or N < 2:
        raise ConfigurationError(f"need K >= 3 and N >= 2, got K={K}, N={N}")
    if n_train < K or n_eval < K:
        raise ConfigurationError(f"split sizes must be >= K={K}, got {n_train}/{n_eval}")

    rng = np.random.default_rng(seed)
    latent = min(8, N)
    clusters = 3
    centers = rng.normal(0.0, 1.4, size=(K, clusters, latent))
    lin = rng.normal(0.0, 1.0 / np.sqrt(latent), size=(N, latent))
    freq = rng.normal(0.0, 1.0 / np.sqrt(latent), size=(N, latent))
    phase = rng.uniform(-np.pi, np.pi, size=N)

    def draw(n: int) -> tuple[np.ndarray, np.ndarray]:
        y = np.arange(n) % K
        rng.shuffle(y)
        which = rng.integers(0, clusters, size=n)
        z = centers[y, which] + rng.normal(0.0, 0.6, size=(n, latent))
        h = z @ lin.T + 0.7 * np.sin(1.5 * z @ freq.T + phase)
        x = 0.5 + 0.12 * h + 0.03 * rng.normal(size=(n, N))
        return np.clip(x, 0.0, 1.0), y.astype(np.int64)

    x_train, y_train = draw(n_train)
    x_eval, y_eval = draw(n_eval)
    for arr in (x_train, y_train, x_eval, y_eval):
        arr.setflags(write=False)
    return Dataset(x_train, y_train, x_eval, y_eval, K=K, N=N, seed=seed)


# ---------------------------------------------------------------------------
# Architectures and models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArchSpec:
    """Hidden widths + activation; an empty ``hidden`` means linear softmax."""

    hidden: tuple[int, ...] = ()
    activation: str = "identity"
    label_smoothing: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h <= 0 for h in self.hidden):
            raise ConfigurationError(f"hidden widths must be positive, got {self.hidden}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.hidden and self.activation == "identity":
            raise ConfigurationError("hidden layers need a nonlinearity")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError("label_smoothing must be in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "hidden": list(self.hidden),
            "activation": self.activation,
            "label_smoothing": self.label_smoothing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(tuple(d.get("hidden", ())), d.get("activation", "identity"),
                   float(d.get("label_smoothing", 0.0)))


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str  # applied after the affine map


@dataclass(frozen=True)
class CrossEntropy:
    label: int


@dataclass(frozen=True)
class LogitDifference:
    """Scalar loss ``z[a] - z[b]``."""

    a: int
    b: int


@dataclass(frozen=True, eq=False)
class Model:
    id: str
    family: str
    arch: ArchSpec
    layers: tuple[Layer, ...]
    training_seed: int
    eval_accuracy: float = float("nan")

    @property
    def N(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def K(self) -> int:
        return self.layers[-1].weight.shape[0]

    @cached_property
    def kernel(self):
        from .kernels import DecisionKernel

        return DecisionKernel(self.layers)

    def __getstate__(self):
        state = dict(self.__dict__)
        state.pop("kernel", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])

    def digest(self) -> str:
        return hashlib.sha256(self.parameter_vector().astype("<f8").tobytes()).hexdigest()

    def with_layers(self, layers: Sequence[Layer], suffix: str = "") -> "Model":
        return Model(self.id + suffix, self.family, self.arch, tuple(layers),
                     self.training_seed, self.eval_accuracy)


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return a


def _act_grad(name: str, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (a > 0.0).astype(a.dtype)
    return np.ones_like(a)


def _check_dim(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.N or x.ndim not in (1, 2):
        raise InputError(f"model {model.id} expects inputs of dimension {model.N}, got shape {x.shape}")
    return x


def _forward_trace(layers: Sequence[Layer], x: np.ndarray):
    pre, post = [], [x]
    h = x
    for layer in layers:
        a = h @ layer.weight.T + layer.bias
        h = _act(layer.activation, a)
        pre.append(a)
        post.append(h)
    return pre, post


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Logits for one input ``(N,)`` or a batch ``(B, N)``."""
    x = _check_dim(model, x)
    h = x
    for layer in model.layers:
        h = _act(layer.activation, h @ layer.weight.T + layer.bias)
    if not np.all(np.isfinite(h)):
        raise InputError(f"non-finite logits from model {model.id}")
    return h


def predict(model: Model, x: np.ndarray) -> np.ndarray | int:
    """Top-1 class; ``np.argmax`` already breaks ties toward the smallest index."""
    z = forward(model, x)
    if z.ndim == 1:
        return int(np.argmax(z))
    return np.argmax(z, axis=1)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def vjp(model: Model, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Pull a logit-space cotangent back to input space: ``g^T dz/dx``."""
    x = _check_dim(model, x)
    pre, post = _forward_trace(model.layers, x)
    g = np.asarray(cotangent, dtype=np.float64)
    for layer, a, h in zip(reversed(model.layers), reversed(pre), reversed(post[1:])):
        g = g * _act_grad(layer.activation, a, h)
        g = g @ layer.weight
    return g


def loss_cotangent(logits: np.ndarray, loss) -> np.ndarray:
    K = logits.shape[-1]
    if isinstance(loss, CrossEntropy):
        if not 0 <= loss.label < K:
            raise ConfigurationError(f"label {loss.label} out of range for K={K}")
        g = softmax(logits)
        g[..., loss.label] -= 1.0
        return g
    if isinstance(loss, LogitDifference):
        g = np.zeros_like(logits)
        g[..., loss.a] += 1.0
        g[..., loss.b] -= 1.0
        return g
    raise ConfigurationError(f"unknown loss descriptor {loss!r}")


def loss_value(logits: np.ndarray, loss) -> float:
    if isinstance(loss, CrossEntropy):
        z = logits - logits.max()
        return float(np.log(np.exp(z).sum()) - z[loss.label])
    if isinstance(loss, LogitDifference):
        return float(logits[loss.a] - logits[loss.b])
    raise ConfigurationError(f"unknown loss descriptor {loss!r}")


def input_gradient(model: Model, x: np.ndarray, loss) -> np.ndarray:
    """Exact gradient of a scalar loss of the logits with respect to the input."""
    x = _check_dim(model, x)
    if not isinstance(loss, (CrossEntropy, LogitDifference)):
        raise ConfigurationError(f"unknown loss descriptor {loss!r}")
    z = forward(model, x)
    return vjp(model, x, loss_cotangent(z, loss))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingParams:
    epochs: int = 600
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    accuracy_floor: float = 0.85


def _init_layers(arch: ArchSpec, N: int, K: int, rng: np.random.Generator) -> list[list[np.ndarray]]:
    widths = [N, *arch.hidden, K]
    params = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        scale = np.sqrt(2.0 / (fan_in + fan_out)) if arch.activation != "relu" else np.sqrt(2.0 / fan_in)
        params.append([rng.normal(0.0, scale, size=(fan_out, fan_in)), np.zeros(fan_out)])
    return params


def _layers_from(params, arch: ArchSpec) -> tuple[Layer, ...]:
    layers = []
    for i, (w, b) in enumerate(params):
        act = arch.activation if i < len(params) - 1 else "identity"
        w = np.array(w, dtype=np.float64, order="C")
        b = np.array(b, dtype=np.float64)
        w.setflags(write=False)
        b.setflags(write=False)
        layers.append(Layer(w, b, act))
    return tuple(layers)


def accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(model, x) == y))


def train_model(
    arch: ArchSpec,
    dataset: Dataset,
    seed: int,
    *,
    model_id: str = "model",
    family: str = "default",
    params: TrainingParams = TrainingParams(),
) -> Model:
    """Full-batch gradient descent (heavy-ball momentum, fixed step)."""
    rng = np.random.default_rng(seed)
    theta = _init_layers(arch, dataset.N, dataset.K, rng)
    velocity = [[np.zeros_like(w), np.zeros_like(b)] for w, b in theta]
    X, y = dataset.x_train, dataset.y_train
    n, K = len(y), dataset.K
    target = np.full((n, K), arch.label_smoothing / K)
    target[np.arange(n), y] += 1.0 - arch.label_smoothing

    for _ in range(params.epochs):
        layers = _layers_from(theta, arch)
        pre, post = _forward_trace(layers, X)
        g = (softmax(post[-1]) - target) / n
        grads = []
        for layer, a, h, h_in in zip(reversed(layers), reversed(pre), reversed(post[1:]), reversed(post[:-1])):
            g = g * _act_grad(layer.activation, a, h)
            grads.append((g.T @ h_in, g.sum(axis=0)))
            g = g @ layer.weight
        grads.reverse()
        for (w, b), (vw, vb), (gw, gb) in zip(theta, velocity, grads):
            vw *= params.momentum
            vw -= params.learning_rate * (gw + params.weight_decay * w)
            vb *= params.momentum
            vb -= params.learning_rate * gb
            w += vw
            b += vb

    model = Model(model_id, family, arch, _layers_from(theta, arch), seed)
    acc = accuracy(model, dataset.x_eval, dataset.y_eval)
    if not np.isfinite(acc) or acc < params.accuracy_floor:
        raise TrainingError(model_id, acc, params.accuracy_floor)
    return Model(model_id, family, arch, model.layers, seed, acc)


def linear_model(weight: np.ndarray, bias: np.ndarray, model_id: str = "linear", family: str = "linear") -> Model:
    """Hand-set linear softmax model, handy for closed-form checks."""
    layers = _layers_from([[np.atleast_2d(weight), np.atleast_1d(bias)]], ArchSpec())
    return Model(model_id, family, ArchSpec(), layers, training_seed=-1)


# ---------------------------------------------------------------------------
# Zoo
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    id: str
    family: str
    arch: ArchSpec
    seed: int


@dataclass
class ModelZoo:
    models: list[Model]
    family_index: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.family_index:
            for m in self.models:
                self.family_index.setdefault(m.family, []).append(m.id)
        self._by_id = {m.id: m for m in self.models}
        if len(self._by_id) != len(self.models):
            raise ConfigurationError("duplicate model ids in zoo")
        shapes = {(m.N, m.K) for m in self.models}
        if len(shapes) > 1:
            raise ConfigurationError(f"models disagree on (N, K): {sorted(shapes)}")

    def __getitem__(self, model_id: str) -> Model:
        return self._by_id[model_id]

    def __iter__(self):
        return iter(self.models)

    def __len__(self) -> int:
        return len(self.models)

    @property
    def ids(self) -> list[str]:
        return [m.id for m in self.models]

    def family_of(self, model_id: str) -> str:
        return self._by_id[model_id].family

    def candidates(self, target_id: str, exclude_family: bool = True) -> list[str]:
        """Source pool for a target: everything but the target (and its family)."""
        fam = self.family_of(target_id)
        return [
            m.id for m in self.models
            if m.id != target_id and not (exclude_family and m.family == fam)
        ]

    def validate(self, min_families: int = 3, min_members: int = 2) -> None:
        if len(self.family_index) < min_families:
            raise ConfigurationError(f"zoo needs >= {min_families} families, has {len(self.family_index)}")
        small = [f for f, ids in self.family_index.items() if len(ids) < min_members]
        if small:
            raise ConfigurationError(f"families with < {min_members} members: {small}")


def build_zoo(specs: Iterable[ModelSpec], dataset: Dataset, params: TrainingParams = TrainingParams(),
              workers: int = 1) -> ModelZoo:
    specs = list(specs)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            models = list(pool.map(_train_spec, specs, [dataset] * len(specs), [params] * len(specs)))
    else:
        models = [_train_spec(s, dataset, params) for s in specs]
    for m in models:
        logger.info("trained %s (%s) eval accuracy %.3f", m.id, m.family, m.eval_accuracy)
    return ModelZoo(models)


def _train_spec(spec: ModelSpec, dataset: Dataset, params: TrainingParams) -> Model:
    return train_model(spec.arch, dataset, spec.seed, model_id=spec.id, family=spec.family, params=params)


def save_zoo(zoo: ModelZoo, directory: Path) -> list[Path]:
    """Manifest JSON plus one JSON header and one little-endian f64 blob per model."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    manifest = []
    for m in zoo.models:
        header = {
            "id": m.id,
            "layers": [
                {"weight": list(l.weight.shape), "bias": list(l.bias.shape), "activation": l.activation}
                for l in m.layers
            ],
        }
        hpath = directory / f"{m.id}.json"
        bpath = directory / f"{m.id}.bin"
        hpath.write_text(json.dumps(header, indent=1) + "\n")
        bpath.write_bytes(m.parameter_vector().astype("<f8").tobytes())
        written += [hpath, bpath]
        manifest.append({
            "id": m.id,
            "family": m.family,
            "arch": m.arch.to_dict(),
            "seed": m.training_seed,
            "eval_accuracy": round(m.eval_accuracy, 12),
        })
    mpath = directory / "manifest.json"
    mpath.write_text(json.dumps({"models": manifest}, indent=1) + "\n")
    written.append(mpath)
    return written


def load_zoo(directory: Path) -> ModelZoo:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    models = []
    for entry in manifest["models"]:
        header = json.loads((directory / f"{entry['id']}.json").read_text())
        flat = np.frombuffer((directory / f"{entry['id']}.bin").read_bytes(), dtype="<f8")
        layers, off = [], 0
        for ld in header["layers"]:
            out_dim, in_dim = ld["weight"]
            w = flat[off: off + out_dim * in_dim].reshape(out_dim, in_dim).astype(np.float64)
            off += out_dim * in_dim
            b = flat[off: off + out_dim].astype(np.float64)
            off += out_dim
            w.setflags(write=False)
            b.setflags(write=False)
            layers.append(Layer(w, b, ld["activation"]))
        if off != flat.size:
            raise InputError(f"parameter blob for {entry['id']} has {flat.size} values, header needs {off}")
        models.append(Model(entry["id"], entry["family"], ArchSpec.from_dict(entry["arch"]),
                            tuple(layers), int(entry["seed"]), float(entry["eval_accuracy"])))
    return ModelZoo(models)
