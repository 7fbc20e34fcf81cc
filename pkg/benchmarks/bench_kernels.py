"""Compiled vs numpy decision kernels on reference-sized models.

    python benchmarks/bench_kernels.py [--repeat 3] [--searches 300]

Times single-input predictions, full line searches and one black-box run per
backend, checks both give the same answers, and prints the speedups.
"""
import argparse
import time

import numpy as np

from fitbench import kernels
from fitbench.blackbox import BlackBoxConfig, run_blackbox
from fitbench.zoo import ArchSpec, Layer, Sample, _layers_from, _init_layers

SHAPES = {
    "linear": ArchSpec(),
    "tanh-2x48": ArchSpec((48, 48), "tanh"),
    "relu-2x64": ArchSpec((64, 64), "relu"),
    "wide-256": ArchSpec((256,), "relu"),
}


def random_layers(arch: ArchSpec, N: int, K: int, seed: int) -> tuple[Layer, ...]:
    return _layers_from(_init_layers(arch, N, K, np.random.default_rng(seed)), arch)


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


class _Model:
    """Just enough of a Model for run_blackbox with a chosen kernel."""

    def __init__(self, kernel, N):
        self.kernel, self.id, self.N = kernel, "bench", N


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--N", type=int, default=256)
    p.add_argument("--K", type=int, default=5)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--predictions", type=int, default=2000)
    p.add_argument("--searches", type=int, default=300)
    p.add_argument("--bb-budget", type=int, default=2000)
    args = p.parse_args(argv)

    if kernels.BACKEND != "cython":
        print("compiled extension not available; only the numpy backend can be timed")
    backends = {"python": kernels.PyDecisionKernel}
    if kernels.BACKEND == "cython":
        backends["cython"] = kernels.DecisionKernel

    rng = np.random.default_rng(0)
    xs = np.clip(0.5 + 0.12 * rng.normal(size=(args.predictions, args.N)), 0, 1)
    us = rng.normal(size=(args.searches, args.N))
    us *= np.sqrt(args.N) / np.linalg.norm(us, axis=1, keepdims=True)

    print(f"{'model':<12} {'task':<14}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, arch in SHAPES.items():
        layers = random_layers(arch, args.N, args.K, 1)
        ks = {b: cls(layers) for b, cls in backends.items()}
        labels = {b: [k.predict(x) for x in xs[: args.searches]] for b, k in ks.items()}
        y = labels["python"]
        results = {b: [k.line_search(xs[i], us[i], y[i], 1e-3, 50.0, 1e-4, -1) for i in range(args.searches)]
                   for b, k in ks.items()}
        if len(ks) == 2 and (labels["python"] != labels["cython"] or results["python"] != results["cython"]):
            raise SystemExit(f"backends disagree on {name}")

        tasks = {
            "predict": lambda k: [k.predict(x) for x in xs],
            "line search": lambda k: [k.line_search(xs[i], us[i], y[i], 1e-3, 50.0, 1e-4, -1)
                                      for i in range(args.searches)],
            "black box": lambda k: run_blackbox(_Model(k, args.N), Sample(xs[0], y[0], 0),
                                                BlackBoxConfig(budget=args.bb_budget)),
        }
        for task, fn in tasks.items():
            secs = {b: best_of(lambda: fn(k), args.repeat) for b, k in ks.items()}
            speed = f"{secs['python'] / secs['cython']:>9.1f}x" if "cython" in secs else f"{'-':>10}"
            print(f"{name:<12} {task:<14}" + "".join(f"{secs[b] * 1e3:>10.1f}ms" for b in backends) + speed)


if __name__ == "__main__":
    main()
