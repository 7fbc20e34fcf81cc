"""Re-check invariants over the persisted outputs of a run directory."""
from __future__ import annotations

from typing import TYPE_CHECKING, Callable

import numpy as np

from .metrics import BB_REF, NO_SOURCE, WB_REF, transfer_matrix
from .select import SCORE_GETTERS, select_source

if TYPE_CHECKING:
    from .pipeline import Pipeline


def _files(pipe: "Pipeline") -> str | None:
    from .pipeline import sha256_file

    bad = [f for f, h in pipe.manifest["files"].items()
           if not (pipe.out / f).exists() or sha256_file(pipe.out / f) != h]
    return f"{len(bad)} files changed or missing: {bad[:5]}" if bad else None


def _wb_is_min(pipe: "Pipeline") -> str | None:
    wb_attacks = [c.attack_id for c in pipe.cfg.whitebox]
    bad = 0
    for t in pipe.ids:
        for x in pipe.attack_ids:
            own = min(pipe.table.row(a, t, t, x).d for a in wb_attacks)
            if pipe.table.row(WB_REF, NO_SOURCE, t, x).d != own:
                bad += 1
    return f"{bad} white-box references differ from the minimum over own-model attacks" if bad else None


def _ordering(pipe: "Pipeline") -> str | None:
    worst = {}
    for t in pipe.ids:
        wb, bb = pipe.refs(t)
        worst[t] = float(np.mean(wb <= bb))
    low = {t: v for t, v in worst.items() if v < 0.95}
    return f"d_wb <= d_bb on fewer than 95% of inputs for {low}" if low else None


def _matrices(pipe: "Pipeline") -> str | None:
    bad = []
    for a in pipe.cfg.attack_ids:
        m, _ = transfer_matrix(pipe.table, a, pipe.ids, pipe.ids, pipe.families)
        if not np.array_equal(m, pipe.matrices[a]):
            bad.append(a)
    return f"matrices differ from the distortion table for {bad}" if bad else None


def _similarity(pipe: "Pipeline") -> str | None:
    for b, s in pipe.sims.items():
        v = s.values
        if not np.array_equal(v, v.T) or v.min() < 0 or v.max() > 1:
            return f"similarity at budget {b} is not a symmetric matrix in [0, 1]"
    return None


def _fit_products(pipe: "Pipeline") -> str | None:
    sim = pipe.sims[pipe.cfg.fingerprint_budget]
    for a, tab in pipe.fit.items():
        for e in tab:
            if e.modsim != sim[e.source, e.target]:
                return f"{a}: ModSim in the FiT table differs from the similarity matrix at {e}"
    return None


def _selections(pipe: "Pipeline") -> str | None:
    bad = 0
    for r in pipe.selection_rows:
        if r["category"] != "single":
            continue
        if r["d"] != pipe.table.row(r["attack"], r["choice"], r["target"], r["sample"]).d:
            bad += 1
        if r["method"] in SCORE_GETTERS:
            scores = pipe.fit[r["attack"]].scores(r["target"], r["sample"], pipe.candidates(r["target"]),
                                                  r["method"])
            if select_source(scores) != r["choice"]:
                bad += 1
    return f"{bad} single-source selections disagree with the tables" if bad else None


def _oracle_bound(pipe: "Pipeline") -> str | None:
    bad = []
    for e in pipe.summary:
        if e["category"] != "single" or e["method"] == "best":
            continue
        best = next(b for b in pipe.summary if (b["category"], b["attack"], b["method"]) ==
                    ("single", e["attack"], "best"))
        for t, v in e["per_target"].items():
            if v > best["per_target"][t] + 1e-12:
                bad.append((e["attack"], e["method"], t))
    return f"selections above the per-image oracle: {bad[:5]}" if bad else None


def _queries(pipe: "Pipeline") -> str | None:
    fp = pipe.manifest["target_queries"].get("fingerprint", {})
    wrong = {t: q for t, q in fp.items() if q != pipe.cfg.fingerprint_budget}
    return f"fingerprint query counts differ from the budget: {wrong}" if wrong else None


CHECKS: dict[str, Callable[["Pipeline"], str | None]] = {
    "file hashes": _files,
    "white-box reference is the minimum": _wb_is_min,
    "white-box below black-box": _ordering,
    "matrices match the table": _matrices,
    "similarity symmetric and bounded": _similarity,
    "FiT uses the stored ModSim": _fit_products,
    "selections maximize their score": _selections,
    "per-image oracle bounds every selection": _oracle_bound,
    "fingerprint queries equal the budget": _queries,
}


def verify_run(pipe: "Pipeline") -> list[tuple[str, str | None]]:
    """(check name, failure message or None) for every check."""
    return [(name, fn(pipe)) for name, fn in CHECKS.items()]
