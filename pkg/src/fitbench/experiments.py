"""Studies over a filled distortion table: source-pool curves, per-image winners,
attack dependence, epsilon sweep and ensemble growth.

Every function here is a pure read of persisted data plus a seed.
"""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, InputError
from .metrics import DistortionTable, operating_characteristic, transferability_score


def _score(d, wb, bb) -> float:
    return transferability_score(d, wb, bb).value


def nested_pools(candidates: Sequence[str], rng: np.random.Generator) -> list[str]:
    """A random order of the candidates; pool of size k is its first k entries."""
    return [candidates[i] for i in rng.permutation(len(candidates))]


def experiment_best_worst_curves(
    table: DistortionTable,
    attack: str,
    candidates: Mapping[str, Sequence[str]],
    samples: Sequence[int],
    pool_sizes: Sequence[int],
    repetitions: int,
    seed: int,
) -> dict:
    """T-hat against pool size for fixed best/worst sources and per-image oracles.

    ``candidates`` maps each target to its source pool. Pools are nested: for
    each (repetition, target) one random order is drawn and the pool of size
    k is its prefix, so the best curves can only rise and the worst only fall.
    """
    sizes = sorted(set(int(k) for k in pool_sizes))
    smallest = min(len(c) for c in candidates.values())
    if not sizes or sizes[0] < 1 or sizes[-1] > smallest:
        raise ConfigurationError(f"pool sizes must lie in [1, {smallest}], got {sizes}")
    keys = ("best", "worst", "per_image_best", "per_image_worst", "random_mean")
    acc = {k: np.zeros(len(sizes)) for k in keys}
    count = 0
    for r in range(repetitions):
        for t in sorted(candidates):
            rng = np.random.default_rng([seed, r, sorted(candidates).index(t)])
            order = nested_pools(list(candidates[t]), rng)
            wb, bb = table.references(t, samples)
            d = np.array([table.lookup(attack, s, t, samples) for s in order])
            single = np.array([_score(row, wb, bb) for row in d])
            for i, k in enumerate(sizes):
                acc["best"][i] += single[:k].max()
                acc["worst"][i] += single[:k].min()
                acc["random_mean"][i] += single[:k].mean()
                acc["per_image_best"][i] += _score(d[:k].min(axis=0), wb, bb)
                acc["per_image_worst"][i] += _score(d[:k].max(axis=0), wb, bb)
            count += 1
    out = {"attack": attack, "pool_sizes": sizes, "repetitions": repetitions}
    out.update({k: (v / count).tolist() for k, v in acc.items()})
    return out


def per_image_winners(d: np.ndarray, ids: Sequence[str]) -> list[str]:
    """Source with the smallest distortion per column; ties go to the smallest id."""
    ids = list(ids)
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    d = d[order]
    return [ids[order[j]] for j in np.argmin(d, axis=0)]


def experiment_best_source_distribution(
    table: DistortionTable,
    attack: str,
    candidates: Mapping[str, Sequence[str]],
    samples: Sequence[int],
    pool_sizes: Sequence[int],
    repetitions: int,
    seed: int,
) -> dict:
    """Share of images won by each source of a pool, sorted; the first share is the modal one."""
    sizes = sorted(set(int(k) for k in pool_sizes))
    smallest = min(len(c) for c in candidates.values())
    if not sizes or sizes[0] < 1 or sizes[-1] > smallest:
        raise ConfigurationError(f"pool sizes must lie in [1, {smallest}], got {sizes}")
    modal = np.zeros(len(sizes))
    shares = [np.zeros(k) for k in sizes]
    count = 0
    for r in range(repetitions):
        for t in sorted(candidates):
            rng = np.random.default_rng([seed, r, sorted(candidates).index(t)])
            order = nested_pools(list(candidates[t]), rng)
            d = np.array([table.lookup(attack, s, t, samples) for s in order])
            for i, k in enumerate(sizes):
                winners = per_image_winners(d[:k], order[:k])
                counts = np.array(sorted((winners.count(s) for s in order[:k]), reverse=True), dtype=float)
                share = counts / len(samples)
                modal[i] += share[0]
                shares[i] += share
            count += 1
    return {
        "attack": attack,
        "pool_sizes": sizes,
        "repetitions": repetitions,
        "modal_fraction": (modal / count).tolist(),
        "shares": [(s / count).tolist() for s in shares],
    }


def experiment_attack_dependence(
    table: DistortionTable,
    attack_a: str,
    attack_b: str,
    triples: Sequence[tuple[str, str, int]],
    bins: int = 24,
    groups: int = 5,
) -> dict:
    """2D histogram of paired distortions on log-spaced bins.

    The crossover summary splits the triples into ``groups`` quantile groups
    of the pair's geometric mean and reports, per group, how often attack b
    reaches the boundary first.
    """
    keep = [tr for tr in triples if (attack_a, *tr) in table and (attack_b, *tr) in table]
    if len(keep) < len(triples):
        raise InputError(f"{len(triples) - len(keep)} triples are missing for one of the two attacks")
    if not keep:
        raise InputError(f"no common (source, target, sample) triples for {attack_a} and {attack_b}")
    da = np.array([table.row(attack_a, *tr).d for tr in keep])
    db = np.array([table.row(attack_b, *tr).d for tr in keep])
    both = np.concatenate([da, db])
    lo = max(float(both[both > 0].min()) if np.any(both > 0) else 1e-6, 1e-12)
    hi = max(float(both.max()), lo * (1 + 1e-9))
    edges = np.geomspace(lo, hi * (1 + 1e-12), bins + 1)
    counts, _, _ = np.histogram2d(np.clip(da, lo, None), np.clip(db, lo, None), bins=[edges, edges])

    gm = np.sqrt(np.maximum(da, lo) * np.maximum(db, lo))
    order = np.argsort(gm, kind="stable")
    chunks = np.array_split(order, min(groups, len(order)))
    b_wins = [float(np.mean(db[c] < da[c])) for c in chunks]
    upper = [float(gm[c].max()) for c in chunks]
    crossover = None
    for i in range(1, len(b_wins)):
        if (b_wins[i - 1] > 0.5) != (b_wins[i] > 0.5):
            crossover = upper[i - 1]
            break
    return {
        "attack_a": attack_a,
        "attack_b": attack_b,
        "n": len(keep),
        "edges": edges.tolist(),
        "counts": counts.astype(int).tolist(),
        "diagonal_mass": float(np.trace(counts) / len(keep)),
        "b_wins_by_group": b_wins,
        "group_upper": upper,
        "crossover": crossover,
    }


def asr_curves_gap(curves: Mapping[str, Sequence[float]]) -> float:
    """Max vertical distance between the empirical success-rate curves of several lists."""
    ocs = [operating_characteristic(d) for d in curves.values()]
    if len(ocs) < 2:
        return 0.0
    grid = np.unique(np.concatenate([oc.sorted_distortions for oc in ocs]))
    levels = np.array([oc(grid) for oc in ocs])
    return float(np.max(levels.max(axis=0) - levels.min(axis=0)))


def experiment_epsilon_sweep(per_epsilon: Mapping[str, Sequence[float]],
                             scores: Mapping[str, Mapping[str, float]] | None = None) -> dict:
    """Success-rate curves per epsilon (pooled distortions) and their max vertical gap.

    ``scores`` optionally carries the per-target T-hat for each epsilon; the
    largest spread across epsilons is reported with it.
    """
    out = {
        "curves": {e: operating_characteristic(d).curve() for e, d in per_epsilon.items()},
        "max_gap": asr_curves_gap(per_epsilon),
    }
    if scores:
        targets = sorted(next(iter(scores.values())))
        spread = {t: float(np.ptp([scores[e][t] for e in scores])) for t in targets}
        out["scores"] = {e: dict(v) for e, v in scores.items()}
        out["score_spread"] = spread
        out["max_score_spread"] = max(spread.values())
    return out


def experiment_ensemble_size(growth: Mapping[str, Sequence[float]], fit_line: Mapping[str, float]) -> dict:
    """T-hat vs ensemble size (mean over targets) against the FiT top-k line.

    ``growth[t][m - 1]`` is the score of the random ensemble of size m for
    target t; ``fit_line[t]`` the score of the FiT-chosen ensemble.
    """
    if not growth:
        raise InputError("no targets in the ensemble-size study")
    length = min(len(v) for v in growth.values())
    curve = np.mean([np.asarray(v[:length]) for v in growth.values()], axis=0)
    line = float(np.mean([fit_line[t] for t in growth]))
    return {
        "sizes": list(range(1, length + 1)),
        "random_growth": curve.tolist(),
        "per_target": {t: list(map(float, v)) for t, v in growth.items()},
        "fit_line": [line] * length,
        "fit_beats_all_sizes": bool(np.all(line >= curve)),
    }
