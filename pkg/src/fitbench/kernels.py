"""Backend selection for the decision kernels.

The compiled extension is used when it imports; ``FITBENCH_PURE_PYTHON=1``
forces the numpy fallback.
"""
import os

from . import _kernels_py

if os.environ.get("FITBENCH_PURE_PYTHON", "") not in ("", "0"):
    DecisionKernel = _kernels_py.DecisionKernel
    BACKEND = "python"
else:
    try:
        from ._kernels import DecisionKernel  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        DecisionKernel = _kernels_py.DecisionKernel
        BACKEND = "python"

PyDecisionKernel = _kernels_py.DecisionKernel

__all__ = ["DecisionKernel", "PyDecisionKernel", "BACKEND"]
