# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled decision kernels: single-input forward/argmax and ray line search."""
import numpy as np
cimport numpy as cnp
from libc.math cimport tanh

cnp.import_array()

_ACT_CODES = {"identity": 0, "tanh": 1, "relu": 2}
DEF _BLOCK = 16  # outputs per register block; narrower layers use row dot products


cdef class DecisionKernel:
    cdef double[::1] params
    cdef long[::1] offsets
    cdef long[::1] outs
    cdef long[::1] ins
    cdef long[::1] acts
    cdef double[::1] buf_a
    cdef double[::1] buf_b
    cdef double[::1] point
    cdef int n_layers
    cdef int n_in
    compiled = True

    def __init__(self, layers):
        chunks = []
        offsets, outs, ins, acts = [], [], [], []
        off = 0
        width = 0
        for l in layers:
            w = np.ascontiguousarray(l.weight, dtype=np.float64)
            b = np.ascontiguousarray(l.bias, dtype=np.float64)
            offsets.append(off)
            outs.append(w.shape[0])
            ins.append(w.shape[1])
            acts.append(_ACT_CODES[l.activation])
            # wide layers are stored input-major so the inner loop runs over outputs
            chunks += [(w.T if w.shape[0] >= _BLOCK else w).ravel(), b]
            off += w.size + b.size
            width = max(width, w.shape[0], w.shape[1])
        self.params = np.concatenate(chunks)
        self.offsets = np.array(offsets, dtype=np.int64)
        self.outs = np.array(outs, dtype=np.int64)
        self.ins = np.array(ins, dtype=np.int64)
        self.acts = np.array(acts, dtype=np.int64)
        self.buf_a = np.zeros(width)
        self.buf_b = np.zeros(width)
        self.n_layers = len(outs)
        self.n_in = ins[0]
        self.point = np.zeros(self.n_in)

    cdef int _predict(self, const double[::1] x) nogil:
        cdef const double* src = &x[0]
        cdef double* dst
        cdef const double* P = &self.params[0]
        cdef const double* row
        cdef const double* bias
        cdef int li, i, j, k, i0, n_out, n_in, best, act, n4, nb
        cdef double blk[_BLOCK]
        cdef double a0, a1, a2, a3, acc, top, xj
        cdef const double* base
        for li in range(self.n_layers):
            dst = &self.buf_a[0] if li % 2 == 0 else &self.buf_b[0]
            n_out = self.outs[li]
            n_in = self.ins[li]
            act = self.acts[li]
            n4 = n_in - n_in % 4
            bias = P + self.offsets[li] + n_out * n_in
            if n_out >= _BLOCK:
                base = P + self.offsets[li]
                # _BLOCK outputs held in registers while the weights stream past
                nb = n_out - n_out % _BLOCK
                for i0 in range(0, nb, _BLOCK):
                    for k in range(_BLOCK):
                        blk[k] = bias[i0 + k]
                    for j in range(n_in):
                        row = base + j * n_out + i0
                        xj = src[j]
                        for k in range(_BLOCK):
                            blk[k] = blk[k] + row[k] * xj
                    for k in range(_BLOCK):
                        dst[i0 + k] = blk[k]
                for i in range(nb, n_out):
                    acc = bias[i]
                    for j in range(n_in):
                        acc = acc + base[j * n_out + i] * src[j]
                    dst[i] = acc
            else:
                for i in range(n_out):
                    row = P + self.offsets[li] + i * n_in
                    # four partial sums keep the FMA units busy
                    a0 = 0.0
                    a1 = 0.0
                    a2 = 0.0
                    a3 = 0.0
                    for j in range(0, n4, 4):
                        a0 = a0 + row[j] * src[j]
                        a1 = a1 + row[j + 1] * src[j + 1]
                        a2 = a2 + row[j + 2] * src[j + 2]
                        a3 = a3 + row[j + 3] * src[j + 3]
                    for j in range(n4, n_in):
                        a0 = a0 + row[j] * src[j]
                    dst[i] = (a0 + a1) + (a2 + a3) + bias[i]
            for i in range(n_out):
                acc = dst[i]
                if act == 1:
                    dst[i] = tanh(acc)
                elif act == 2 and acc < 0.0:
                    dst[i] = 0.0
            src = dst
        n_out = self.outs[self.n_layers - 1]
        best = 0
        top = src[0]
        for i in range(1, n_out):
            if src[i] > top:
                top = src[i]
                best = i
        return best

    cdef int _probe(self, const double[::1] x, const double[::1] u, double delta) nogil:
        cdef int j
        cdef double v
        for j in range(self.n_in):
            v = x[j] + delta * u[j]
            if v < 0.0:
                v = 0.0
            elif v > 1.0:
                v = 1.0
            self.point[j] = v
        return self._predict(self.point)

    def predict(self, x):
        cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
        return self._predict(xv)

    def probe(self, x, u, double delta):
        cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
        cdef const double[::1] uv = np.ascontiguousarray(u, dtype=np.float64)
        return self._probe(xv, uv, delta)

    def line_search(self, x, u, int y, double d0, double cap, double tol, long max_queries=-1):
        cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
        cdef const double[::1] uv = np.ascontiguousarray(u, dtype=np.float64)
        cdef long queries = 0
        cdef double lo = 0.0, hi = -1.0, delta = d0, mid, v
        cdef int label, hi_label = y, j
        cdef bint clipped = False
        while True:
            if 0 <= max_queries <= queries:
                break
            label = self._probe(xv, uv, delta)
            queries += 1
            if label != y:
                hi = delta
                hi_label = label
                break
            lo = delta
            if delta >= cap:
                break
            delta = 2.0 * delta
            if delta > cap:
                delta = cap
        if hi < 0.0:
            return cap, y, queries, False, False
        while hi - lo > tol:
            if 0 <= max_queries <= queries:
                break
            mid = 0.5 * (lo + hi)
            label = self._probe(xv, uv, mid)
            queries += 1
            if label != y:
                hi = mid
                hi_label = label
            else:
                lo = mid
        for j in range(self.n_in):
            v = xv[j] + hi * uv[j]
            if v < 0.0 or v > 1.0:
                clipped = True
                break
        return hi, hi_label, queries, True, bool(clipped)
