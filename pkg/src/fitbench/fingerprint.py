"""Model similarity from top-1 decisions on benign queries (normalized MI)."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .blackbox import DecisionOracle
from .errors import ConfigurationError, InputError
from .zoo import Model


@dataclass(frozen=True, eq=False)
class DecisionProfile:
    model_id: str
    decisions: np.ndarray
    query_set_id: str


def decision_profile(model: Model | DecisionOracle, queries: np.ndarray, query_set_id: str = "") -> DecisionProfile:
    """Top-1 decisions on each query row. An oracle is charged one query per row."""
    queries = np.asarray(queries, dtype=np.float64)
    if isinstance(model, DecisionOracle):
        decisions = np.array([model.classify(q) for q in queries], dtype=np.int64)
        model_id = model.model.id
    else:
        decisions = np.array([model.kernel.predict(q) for q in queries], dtype=np.int64)
        model_id = model.id
    decisions.setflags(write=False)
    return DecisionProfile(model_id, decisions, query_set_id)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def mod_sim(a: DecisionProfile, b: DecisionProfile) -> float:
    """``I(A;B) / max(H(A), H(B))`` of the empirical joint decisions; 0/0 counts as 1."""
    if a.query_set_id != b.query_set_id or a.decisions.shape != b.decisions.shape:
        raise InputError("profiles were taken on different query sets")
    if a.decisions.size == 0:
        raise InputError("empty profiles")
    # canonical order so that mod_sim(a, b) and mod_sim(b, a) run the same float ops
    da, db = sorted((a.decisions, b.decisions), key=lambda d: d.tobytes())
    _, ia = np.unique(da, return_inverse=True)
    _, ib = np.unique(db, return_inverse=True)
    joint = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(joint, (ia, ib), 1.0)
    joint /= joint.sum()
    pa, pb = joint.sum(axis=1), joint.sum(axis=0)
    ha, hb = _entropy(pa), _entropy(pb)
    h = max(ha, hb)
    if h == 0.0:
        return 1.0
    mi = ha + hb - _entropy(joint.ravel())
    return float(min(1.0, max(0.0, mi / h)))


@dataclass
class SimilarityMatrix:
    ids: list[str]
    values: np.ndarray
    query_set_id: str
    budget: int

    def __getitem__(self, pair: tuple[str, str]) -> float:
        i, j = self.ids.index(pair[0]), self.ids.index(pair[1])
        return float(self.values[i, j])

    def to_csv(self, path: Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", *self.ids])
        for mid, row in zip(self.ids, self.values):
            w.writerow([mid, *(repr(float(v)) for v in row)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, path: Path, query_set_id: str = "", budget: int = 0) -> "SimilarityMatrix":
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        return cls(rows[0][1:], np.array([[float(v) for v in r[1:]] for r in rows[1:]]), query_set_id, budget)


def similarity_from_profiles(profiles: Sequence[DecisionProfile], budget: int) -> SimilarityMatrix:
    """Pairwise ModSim over already-collected profiles."""
    n = len(profiles)
    vals = np.eye(n)
    for i in range(n):
        for j in range(i, n):
            vals[i, j] = vals[j, i] = mod_sim(profiles[i], profiles[j])
    qid = profiles[0].query_set_id if profiles else ""
    return SimilarityMatrix([p.model_id for p in profiles], vals, qid, budget)


def similarity_matrix(models: Sequence[Model], queries: np.ndarray, budget: int,
                      target: Model | DecisionOracle | None = None, query_set_id: str = "") -> SimilarityMatrix:
    """Pairwise ModSim over ``models`` (plus ``target``) on the first ``budget`` queries.

    Only the target is a black box; when given as an oracle it is charged
    exactly ``budget`` queries.
    """
    if budget < 10:
        raise ConfigurationError(f"fingerprint budget must be >= 10, got {budget}")
    if len(queries) < budget:
        raise ConfigurationError(f"only {len(queries)} benign queries available for budget {budget}")
    q = np.asarray(queries[:budget])
    qid = query_set_id or f"first-{budget}"
    profiles = [decision_profile(m, q, qid) for m in models]
    if target is not None:
        profiles.append(decision_profile(target, q, qid))
    return similarity_from_profiles(profiles, budget)
