"""TransQ estimates, the FiT score and the source-selection rules."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, InputError, ReferenceOrderingError


def transq1(surrogate_distortions: Sequence[float]) -> float:
    """Inverse of the mean surrogate distortion along the source's direction."""
    d = np.asarray(surrogate_distortions, dtype=np.float64)
    if d.size == 0:
        raise ConfigurationError("empty surrogate pool")
    return float(1.0 / d.mean())


def transq2(surrogate_distortions, surrogate_wb, surrogate_bb) -> float:
    """Score anchored like T-hat, but summed over surrogates at one input."""
    d, wb, bb = (np.asarray(v, dtype=np.float64) for v in (surrogate_distortions, surrogate_wb, surrogate_bb))
    if d.size == 0:
        raise ConfigurationError("empty surrogate pool")
    if not d.shape == wb.shape == bb.shape:
        raise InputError("surrogate lists differ in length")
    den = float(np.sum(bb - wb))
    if not den > 0:
        raise ReferenceOrderingError(f"surrogate references are not ordered (denominator {den})")
    return float(np.sum(bb - d) / den)


def asr_score(surrogate_distortions, budget: float) -> float:
    """Fraction of surrogates fooled within a distortion budget."""
    d = np.asarray(surrogate_distortions, dtype=np.float64)
    if d.size == 0:
        raise ConfigurationError("empty surrogate pool")
    return float(np.mean(d <= budget))


def fit_score(modsim: float, transq: float) -> float:
    if transq == float("-inf"):
        return transq  # unusable TransQ stays last even when ModSim is 0
    return modsim * transq


def surrogate_pool(all_ids: Sequence[str], source: str, target: str, families: Mapping[str, str],
                   exclude_family: bool = True, include_source: bool = False) -> list[str]:
    """Attacker-owned models used to rate a source: never the target (nor its family)."""
    pool = []
    for m in sorted(all_ids):
        if m == target or (exclude_family and families[m] == families[target]):
            continue
        if m == source and not include_source:
            continue
        pool.append(m)
    if not pool:
        raise ConfigurationError(f"empty surrogate pool for source {source!r}, target {target!r}")
    return pool


def candidate_pool(all_ids: Sequence[str], target: str, families: Mapping[str, str],
                   exclude_family: bool = True) -> list[str]:
    pool = [m for m in sorted(all_ids)
            if m != target and not (exclude_family and families[m] == families[target])]
    if not pool:
        raise ConfigurationError(f"no candidate sources left for target {target!r}")
    return pool


def select_source(scores: Mapping[str, float]) -> str:
    """Arg-max with ties resolved toward the smallest id."""
    if not scores:
        raise ConfigurationError("empty candidate pool")
    return min(scores, key=lambda k: (-scores[k], k))


def select_topk(scores: Mapping[str, float], k: int) -> list[str]:
    if k < 1 or len(scores) < k:
        raise ConfigurationError(f"cannot pick top-{k} from {len(scores)} candidates")
    return sorted(scores, key=lambda s: (-scores[s], s))[:k]


def select_attack_and_source(scores_per_attack: Mapping[str, Mapping[str, float]]) -> tuple[str, str]:
    """Joint arg-max over (attack, source); ties go to the smallest source id, then attack id."""
    pairs = {(a, s): v for a, table in scores_per_attack.items() for s, v in table.items()}
    if not pairs:
        raise ConfigurationError("empty candidate pool")
    a, s = min(pairs, key=lambda p: (-pairs[p], p[1], p[0]))
    return a, s


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitEntry:
    source: str
    target: str
    sample: int
    modsim: float
    transq1: float
    transq2: float
    asr: float

    @property
    def fit1(self) -> float:
        return fit_score(self.modsim, self.transq1)

    @property
    def fit2(self) -> float:
        return fit_score(self.modsim, self.transq2)


SCORE_GETTERS: dict[str, Callable[[FitEntry], float]] = {
    "modsim": lambda e: e.modsim,
    "asr": lambda e: e.asr,
    "transq1": lambda e: e.transq1,
    "transq2": lambda e: e.transq2,
    "fit1": lambda e: e.fit1,
    "fit2": lambda e: e.fit2,
}


class FitTable:
    """FiT ingredients per (source, target, sample) for one attack."""

    def __init__(self, entries=()):
        self._e: dict[tuple[str, str, int], FitEntry] = {}
        for e in entries:
            self._e[(e.source, e.target, e.sample)] = e

    def __iter__(self):
        return iter(self._e[k] for k in sorted(self._e))

    def __len__(self):
        return len(self._e)

    def get(self, source: str, target: str, sample: int) -> FitEntry:
        return self._e[(source, target, sample)]

    def scores(self, target: str, sample: int, candidates: Sequence[str], method: str) -> dict[str, float]:
        getter = SCORE_GETTERS[method]
        return {s: getter(self._e[(s, target, sample)]) for s in candidates}

    def with_modsim(self, modsim: Callable[[str, str], float]) -> "FitTable":
        """Same TransQ values under another similarity estimate."""
        return FitTable(replace(e, modsim=modsim(e.source, e.target)) for e in self)

    def to_csv(self, path: Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(FIT_HEADER)
        for e in self:
            w.writerow([e.source, e.target, e.sample,
                        *(repr(float(v)) for v in (e.modsim, e.transq1, e.transq2, e.asr, e.fit1, e.fit2))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, path: Path) -> "FitTable":
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != FIT_HEADER:
                raise InputError(f"unexpected FiT table header {reader.fieldnames}")
            entries = []
            for r in reader:
                e = FitEntry(r["source"], r["target"], int(r["sample"]), float(r["modsim"]),
                             float(r["transq1"]), float(r["transq2"]), float(r["asr"]))
                if repr(e.fit1) != r["fit1"] or repr(e.fit2) != r["fit2"]:
                    raise InputError(f"FiT product mismatch in row {r}")
                entries.append(e)
        return cls(entries)


FIT_HEADER = ("source", "target", "sample", "modsim", "transq1", "transq2", "asr", "fit1", "fit2")


def build_fit_table(
    lookup: Callable[[str, str, int], float],
    references: Callable[[str, int], tuple[float, float]],
    modsim: Callable[[str, str], float],
    ids: Sequence[str],
    families: Mapping[str, str],
    targets: Sequence[str],
    samples: Sequence[int],
    asr_budget: float,
    exclude_family: bool = True,
    include_source: bool = False,
) -> FitTable:
    """Assemble TransQ/ASR from surrogate distortions and multiply by ModSim.

    ``lookup(source, surrogate, sample)`` is the line-search distortion of the
    source's direction against a surrogate; ``references(surrogate, sample)``
    yields that surrogate's (white-box, black-box) distortions.
    """
    entries = []
    for t in targets:
        for s in candidate_pool(ids, t, families, exclude_family):
            pool = surrogate_pool(ids, s, t, families, exclude_family, include_source)
            for x in samples:
                d = [lookup(s, sig, x) for sig in pool]
                refs = [references(sig, x) for sig in pool]
                try:
                    q2 = transq2(d, [r[0] for r in refs], [r[1] for r in refs])
                except ReferenceOrderingError:
                    q2 = float("-inf")
                entries.append(FitEntry(s, t, x, modsim(s, t), transq1(d), q2, asr_score(d, asr_budget)))
    return FitTable(entries)
