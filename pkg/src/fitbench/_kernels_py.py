"""Pure-numpy decision kernels; the reference the compiled kernels must match."""
import numpy as np

_ACT_CODES = {"identity": 0, "tanh": 1, "relu": 2}


class DecisionKernel:
    """Top-1 decisions and ray line searches for one model."""

    compiled = False

    def __init__(self, layers):
        self._layers = [
            (np.ascontiguousarray(l.weight, dtype=np.float64),
             np.ascontiguousarray(l.bias, dtype=np.float64),
             _ACT_CODES[l.activation])
            for l in layers
        ]

    def predict(self, x):
        h = x
        for w, b, act in self._layers:
            h = w @ h + b
            if act == 1:
                h = np.tanh(h)
            elif act == 2:
                h = np.maximum(h, 0.0)
        return int(np.argmax(h))

    def probe(self, x, u, delta):
        return self.predict(np.clip(x + delta * u, 0.0, 1.0))

    def line_search(self, x, u, y, d0, cap, tol, max_queries=-1):
        """Exponential bracketing from ``d0`` then bisection to width ``tol``.

        Returns ``(d, label, queries, found, clipped)``. ``max_queries < 0``
        means unlimited; when the allowance runs out mid-bisection the current
        upper bracket is returned.
        """
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        queries = 0
        lo = 0.0
        hi = -1.0
        hi_label = y
        delta = d0
        while True:
            if 0 <= max_queries <= queries:
                break
            label = self.probe(x, u, delta)
            queries += 1
            if label != y:
                hi, hi_label = delta, label
                break
            lo = delta
            if delta >= cap:
                break
            delta = min(2.0 * delta, cap)
        if hi < 0.0:
            return cap, y, queries, False, False
        while hi - lo > tol:
            if 0 <= max_queries <= queries:
                break
            mid = 0.5 * (lo + hi)
            label = self.probe(x, u, mid)
            queries += 1
            if label != y:
                hi, hi_label = mid, label
            else:
                lo = mid
        point = x + hi * u
        clipped = bool(np.any(point < 0.0) or np.any(point > 1.0))
        return hi, hi_label, queries, True, clipped
