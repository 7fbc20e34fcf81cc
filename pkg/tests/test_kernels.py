import os
import subprocess
import sys

import numpy as np
import pytest

from fitbench import kernels
from fitbench.geometry import normalize_direction

compiled = pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled extension not built")


@compiled
def test_backends_agree_on_predictions(small_models, small_ds, rng):
    for m in small_models.values():
        fast, slow = kernels.DecisionKernel(m.layers), kernels.PyDecisionKernel(m.layers)
        for x in small_ds.x_eval[:50]:
            assert fast.predict(x) == slow.predict(x)
            u = rng.normal(size=x.size)
            assert fast.probe(x, u, 0.3) == slow.probe(x, u, 0.3)


@compiled
def test_backends_agree_on_line_search(small_models, correct_samples, rng):
    for i, s in enumerate(correct_samples[:40]):
        m = list(small_models.values())[i % len(small_models)]
        fast, slow = kernels.DecisionKernel(m.layers), kernels.PyDecisionKernel(m.layers)
        u = normalize_direction(rng.normal(size=s.x.size)).u
        for budget in (-1, 5):
            a = fast.line_search(s.x, u, s.y, 1e-3, 50.0, 1e-4, budget)
            b = slow.line_search(s.x, u, s.y, 1e-3, 50.0, 1e-4, budget)
            assert a == b


def test_pure_python_switch():
    env = dict(os.environ, FITBENCH_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import fitbench.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_fallback_flag():
    assert kernels.PyDecisionKernel.compiled is False
    assert kernels.DecisionKernel.compiled is (kernels.BACKEND == "cython")
