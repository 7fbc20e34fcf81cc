"""Distortion, empirical operating characteristics and the transferability score."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import IncompleteTableError, InputError, ReferenceOrderingError

WB_REF = "wb-ref"
BB_REF = "bb-ref"
NO_SOURCE = "-"


def distortion(x_a, x) -> float:
    """Per-pixel amplitude ``||x_a - x||_2 / sqrt(N)``."""
    x_a = np.asarray(x_a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_a.shape != x.shape:
        raise InputError(f"shape mismatch {x_a.shape} vs {x.shape}")
    return float(np.linalg.norm(x_a - x) / math.sqrt(x.size))


@dataclass(frozen=True, eq=False)
class OperatingCharacteristic:
    """Empirical success rate vs distortion: ``P(D) = j/n`` on ``[d(j), d(j+1))``."""

    sorted_distortions: np.ndarray

    @property
    def n(self) -> int:
        return len(self.sorted_distortions)

    def __call__(self, D):
        return np.searchsorted(self.sorted_distortions, D, side="right") / self.n

    def curve(self) -> dict:
        """Breakpoints and the level reached at each (finite values only)."""
        d = self.sorted_distortions[np.isfinite(self.sorted_distortions)]
        bps = np.unique(d)
        levels = np.searchsorted(self.sorted_distortions, bps, side="right") / self.n
        return {"breakpoints": bps.tolist(), "levels": levels.tolist()}


def operating_characteristic(distortions: Iterable[float]) -> OperatingCharacteristic:
    d = np.sort(np.asarray(list(distortions), dtype=np.float64))
    if d.size == 0:
        raise InputError("operating characteristic of an empty list")
    if np.any(np.isnan(d)) or np.any(d < 0):
        raise InputError("distortions must be non-negative numbers")
    d.setflags(write=False)
    return OperatingCharacteristic(d)


@dataclass(frozen=True)
class TransferabilityScore:
    value: float
    numerator: float
    denominator: float
    n: int


def _three(d_st, d_wb, d_bb):
    arrs = [np.sort(np.asarray(d, dtype=np.float64)) for d in (d_st, d_wb, d_bb)]
    if len({a.size for a in arrs}) != 1 or arrs[0].size == 0:
        raise InputError(f"need three equal-length non-empty lists, got {[a.size for a in arrs]}")
    return arrs


def transferability_score(d_st, d_wb, d_bb) -> TransferabilityScore:
    """Signed score: 1 at the white-box references, 0 at the black-box ones."""
    st, wb, bb = _three(d_st, d_wb, d_bb)
    num = float(np.sum(bb - st))
    den = float(np.sum(bb - wb))
    if not den > 0:
        raise ReferenceOrderingError(f"white-box area does not dominate black-box area (denominator {den})")
    return TransferabilityScore(num / den, num, den, st.size)


def transferability_score_printed(d_st, d_wb, d_bb) -> float:
    """The ratio with both sums written as transfer-minus-black-box."""
    st, wb, bb = _three(d_st, d_wb, d_bb)
    return float(np.sum(st - bb) / np.sum(wb - bb))


def oc_gap_area(d_a, d_b, upper: float | None = None) -> float:
    """Integral of ``P_a(D) - P_b(D)`` by trapezoids over the merged breakpoints.

    Each breakpoint enters twice (left limit, then value) so the trapezoid rule
    is exact on the step functions.
    """
    oc_a, oc_b = operating_characteristic(d_a), operating_characteristic(d_b)
    pts = np.concatenate([oc_a.sorted_distortions, oc_b.sorted_distortions])
    pts = pts[np.isfinite(pts)]
    hi = float(pts.max()) if upper is None else upper
    grid = np.unique(np.concatenate([[0.0], pts[pts <= hi], [hi]]))
    # right-continuous steps: the difference on [g_i, g_i+1) is its value at g_i
    left = oc_a(grid[:-1]) - oc_b(grid[:-1])
    return float(np.sum(left * np.diff(grid)))


# ---------------------------------------------------------------------------
# Distortion table
# ---------------------------------------------------------------------------

TABLE_HEADER = ("attack", "source", "target", "sample", "d", "status", "clipped", "queries")


@dataclass(frozen=True)
class DistortionRow:
    attack: str
    source: str
    target: str
    sample: int
    d: float
    status: str = "found"
    clipped: bool = False
    queries: int = 0

    @property
    def key(self):
        return (self.attack, self.source, self.target, self.sample)


class DistortionTable:
    """Minimal boundary distortions keyed by (attack, source, target, sample)."""

    def __init__(self, rows: Iterable[DistortionRow] = ()):
        self._rows: dict[tuple, DistortionRow] = {}
        for r in rows:
            self.add(r)

    def add(self, row: DistortionRow) -> None:
        if not row.d >= 0:
            raise InputError(f"negative or NaN distortion in row {row}")
        if row.key in self._rows:
            raise InputError(f"duplicate row {row.key}")
        self._rows[row.key] = row

    def extend(self, rows: Iterable[DistortionRow]) -> None:
        for r in rows:
            self.add(r)

    def __len__(self) -> int:
        return len(self._rows)

    def __iter__(self):
        return iter(self._rows.values())

    def __contains__(self, key) -> bool:
        return key in self._rows

    def row(self, attack: str, source: str, target: str, sample: int) -> DistortionRow:
        return self._rows[(attack, source, target, sample)]

    def attacks(self) -> list[str]:
        return sorted({k[0] for k in self._rows})

    def sources(self, attack: str) -> list[str]:
        return sorted({k[1] for k in self._rows if k[0] == attack})

    def targets(self) -> list[str]:
        return sorted({k[2] for k in self._rows})

    def samples(self, target: str | None = None) -> list[int]:
        return sorted({k[3] for k in self._rows if target is None or k[2] == target})

    def lookup(self, attack: str, source: str, target: str, samples: Sequence[int]) -> np.ndarray:
        gaps = [(attack, source, target, s) for s in samples if (attack, source, target, s) not in self._rows]
        if gaps:
            raise IncompleteTableError(gaps)
        return np.array([self._rows[(attack, source, target, s)].d for s in samples])

    def references(self, target: str, samples: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        return (self.lookup(WB_REF, NO_SOURCE, target, samples),
                self.lookup(BB_REF, NO_SOURCE, target, samples))

    def validate_references(self) -> None:
        gaps = []
        for t in self.targets():
            for s in self.samples(t):
                for ref in (WB_REF, BB_REF):
                    if (ref, NO_SOURCE, t, s) not in self._rows:
                        gaps.append((ref, NO_SOURCE, t, s))
        if gaps:
            raise IncompleteTableError(gaps)

    def to_csv(self, path: Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_HEADER)
        for key in sorted(self._rows):
            r = self._rows[key]
            w.writerow([r.attack, r.source, r.target, r.sample, repr(float(r.d)), r.status,
                        int(r.clipped), r.queries])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, path: Path) -> "DistortionTable":
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != TABLE_HEADER:
                raise InputError(f"unexpected distortion table header {reader.fieldnames}")
            return cls(
                DistortionRow(r["attack"], r["source"], r["target"], int(r["sample"]), float(r["d"]),
                              r["status"], bool(int(r["clipped"])), int(r["queries"]))
                for r in reader
            )


def transfer_matrix(table: DistortionTable, attack: str, sources: Sequence[str], targets: Sequence[str],
                    families: dict[str, str] | None = None):
    """T-hat for every (source, target) pair over each target's sample set.

    Returns ``(matrix, excluded)`` where ``excluded`` flags diagonal and
    same-family cells; they are computed anyway.
    """
    m = np.zeros((len(sources), len(targets)))
    excluded = np.zeros_like(m, dtype=bool)
    gaps = []
    for j, t in enumerate(targets):
        samples = table.samples(t)
        try:
            wb, bb = table.references(t, samples)
        except IncompleteTableError as exc:
            gaps += exc.gaps
            continue
        for i, s in enumerate(sources):
            try:
                d = table.lookup(attack, s, t, samples)
            except IncompleteTableError as exc:
                gaps += exc.gaps
                continue
            m[i, j] = transferability_score(d, wb, bb).value
            excluded[i, j] = s == t or (families is not None and families.get(s) == families.get(t))
    if gaps:
        raise IncompleteTableError(gaps)
    return m, excluded


def matrix_to_csv(matrix: np.ndarray, sources: Sequence[str], targets: Sequence[str],
                  path: Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source", *targets])
    for s, row in zip(sources, matrix):
        w.writerow([s, *(repr(float(v)) for v in row)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def matrix_from_csv(path: Path) -> tuple[np.ndarray, list[str], list[str]]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    targets = rows[0][1:]
    sources = [r[0] for r in rows[1:]]
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]]), sources, targets
