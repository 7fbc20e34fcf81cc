"""One test per acceptance criterion; each records a pass/fail line shown at the end of the session.

The reference desk-scale config is run once per session (and a second time for
the determinism check). Methods compared in criteria 7, 8 and 10 are the ones
the config names up front: ``selection.single_method`` and
``selection.ensemble_method``.
"""
import filecmp
import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, random_linear
from fitbench.config import bundled_config
from fitbench.fingerprint import DecisionProfile, mod_sim
from fitbench.geometry import LineSearchParams, is_adversarial, min_distortion_along, normalize_direction
from fitbench.metrics import transferability_score
from fitbench.pipeline import run
from fitbench.select import fit_score, transq1, transq2
from fitbench.zoo import CrossEntropy, LogitDifference, Sample, forward, input_gradient, loss_value

pytestmark = pytest.mark.slow

MARGIN = 0.02


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((f"criterion {number}", bool(ok), detail))
    assert ok, detail


@pytest.fixture(scope="session")
def reference(tmp_path_factory):
    out = tmp_path_factory.mktemp("reference")
    t0 = time.perf_counter()
    pipe = run(bundled_config("reference"), out)
    return pipe, time.perf_counter() - t0


@pytest.fixture(scope="session")
def reference_again(tmp_path_factory):
    out = tmp_path_factory.mktemp("reference_again")
    return run(bundled_config("reference"), out)


# 1 ------------------------------------------------------------------------------

def test_criterion_01_score_anchors():
    t0 = time.perf_counter()
    r = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        wb = r.uniform(0.01, 1.0, 60)
        bb = wb + r.uniform(0.1, 2.0, 60)
        worst = max(worst, abs(transferability_score(wb, wb, bb).value - 1.0),
                    abs(transferability_score(bb, wb, bb).value - 0.0))
    secs = time.perf_counter() - t0
    record(1, worst <= 1e-12 and secs < 1.0, f"max anchor error {worst:.1e}, {secs:.3f} s")


# 2 ------------------------------------------------------------------------------

def trapezoid_cdf_gap(d_st, d_bb):
    """Trapezoid rule over the step functions P_st - P_bb, with doubled nodes at each jump."""
    grid = np.unique(np.concatenate([[0.0], d_st, d_bb]))
    st_s, bb_s = np.sort(d_st), np.sort(d_bb)
    level = lambda s, g: np.searchsorted(s, g, side="right") / len(s)
    gap = level(st_s, grid) - level(bb_s, grid)
    xs = np.repeat(grid, 2)[1:]
    ys = np.repeat(gap, 2)[:-1]
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2))


def test_criterion_02_wasserstein_area_identity():
    r = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        wb, st, bb = np.sort(r.gamma(2.0, 0.5, size=(3, 50)), axis=1)
        bb = bb + 1.0
        num = transferability_score(st, np.minimum(wb, st), bb).numerator
        area = 50 * trapezoid_cdf_gap(st, bb)
        worst = max(worst, abs(num - area) / abs(area))
    record(2, worst <= 1e-9, f"max relative error {worst:.1e} over 100 triples")


# 3 ------------------------------------------------------------------------------

def test_criterion_03_line_search(reference):
    pipe, _ = reference
    params = pipe.cfg.line_search
    r = np.random.default_rng(3)
    t0 = time.perf_counter()
    models = list(pipe.zoo)
    bad, cases = 0, 0
    while cases < 200:
        m = models[r.integers(len(models))]
        s = pipe.dataset.sample(int(r.choice(pipe.attack_ids)))
        u = normalize_direction(r.normal(size=s.x.size)).u
        res = min_distortion_along(m, s, u, params)
        if not res.found:
            continue
        cases += 1
        flip = is_adversarial(m, s, u, res.d)
        before = res.d <= 2 * params.tol or not is_adversarial(m, s, u, res.d - 2 * params.tol)
        bad += not (flip and before)

    # linear models away from the box faces: the flip is where the first logit gap closes
    closed, worst = 0, 0.0
    while closed < 100:
        m = random_linear(r, K=5, N=256, scale=2.0)
        x = np.full(256, 0.5) + r.uniform(-0.05, 0.05, 256)
        y = m.kernel.predict(x)
        u = normalize_direction(r.normal(size=256)).u
        W, b = m.layers[0].weight, m.layers[0].bias
        gaps, slopes = (W[y] - W) @ x + b[y] - b, (W[y] - W) @ u
        hit = [g / -sl for k, (g, sl) in enumerate(zip(gaps, slopes)) if k != y and sl < 0]
        expect = min(hit) if hit else np.inf
        if not expect < 0.4 / np.abs(u).max():
            continue
        res = min_distortion_along(m, Sample(x, y, 0), u, params)
        worst = max(worst, abs(res.d - expect))
        closed += 1
    secs = time.perf_counter() - t0
    ok = bad == 0 and worst <= 2 * params.tol and secs < 60
    record(3, ok, f"{bad}/200 bracket violations, closed-form error {worst:.1e} (2 tol = {2 * params.tol:g}), "
                  f"{secs:.1f} s")


# 4 ------------------------------------------------------------------------------

def test_criterion_04_gradient_fidelity(reference):
    pipe, _ = reference
    r = np.random.default_rng(4)
    h = 1e-5
    worst, flat = {}, 0
    for m in pipe.zoo:
        w = 0.0
        for i in range(25):
            s = pipe.dataset.sample(int(pipe.attack_ids[i % len(pipe.attack_ids)]))
            x = np.clip(s.x + r.normal(0, 0.01, s.x.size), 0, 1)
            loss = CrossEntropy(s.y) if i % 2 else LogitDifference(s.y, (s.y + 1 + i % (m.K - 1)) % m.K)
            g = input_gradient(m, x, loss)
            E = np.eye(x.size) * h
            fd = np.array([loss_value(forward(m, x + e), loss) - loss_value(forward(m, x - e), loss)
                           for e in E]) / (2 * h)
            err, scale = np.linalg.norm(g - fd), np.linalg.norm(fd)
            if scale == 0.0:
                # a flat loss: both must vanish, anything else counts as a total miss
                flat += 1
                w = max(w, 0.0 if err == 0.0 else np.inf)
            else:
                w = max(w, err / scale)
        worst[m.id] = w
    top = max(worst, key=worst.get)
    record(4, worst[top] <= 1e-3, f"max relative L2 error {worst[top]:.1e} ({top}), 25 cases x {len(worst)} models, "
                                          f"{flat} with a zero finite difference")


# 5 ------------------------------------------------------------------------------

def test_criterion_05_reference_ordering_and_convergence(reference):
    pipe, _ = reference
    share = {}
    for t in pipe.ids:
        wb, bb = pipe.refs(t)
        share[t] = float(np.mean(wb <= bb))
    conv = pipe.results["bb_convergence"]
    imp = {t: v["improvement"] for t, v in conv["per_target"].items()}
    low, worst = min(share, key=share.get), max(imp, key=imp.get)
    ok = share[low] >= 0.95 and imp[worst] < 0.10
    record(5, ok, f"min share d_wb <= d_bb {share[low]:.3f} ({low}); largest median d_bb improvement "
                  f"{conv['budget']} -> {conv['doubled']} queries {imp[worst]:.2%} ({worst})")


# 6 ------------------------------------------------------------------------------

def test_criterion_06_negative_transferability(reference):
    pipe, _ = reference
    excluded = pipe.matrix_excluded
    negative = []
    for a, m in pipe.matrices.items():
        cells = np.argwhere((m < 0) & ~excluded)
        negative += [(a, pipe.ids[i], pipe.ids[j], float(m[i, j])) for i, j in cells]
    lowest = min(negative, key=lambda c: c[3]) if negative else None
    record(6, bool(negative), f"{len(negative)} negative cells; lowest {lowest}")


# 7 ------------------------------------------------------------------------------

def test_criterion_07_selection_ordering(reference):
    pipe, secs = reference
    fit = pipe.cfg.selection.single_method
    tq = {"fit1": "transq1", "fit2": "transq2"}[fit]
    problems, parts = [], []
    for a in pipe.cfg.transfer_ids:
        v = {m: pipe.summary_score("single", a, m) for m in ("best", fit, tq, "modsim", "random")}
        for hi, lo in (("best", fit), (fit, tq), (tq, "random"), (fit, "modsim")):
            if v[hi] - v[lo] < -MARGIN:
                problems.append(f"{a}: {hi} {v[hi]:+.3f} < {lo} {v[lo]:+.3f}")
        parts.append(f"{a} best {v['best']:+.3f} {fit} {v[fit]:+.3f} {tq} {v[tq]:+.3f} "
                     f"modsim {v['modsim']:+.3f} random {v['random']:+.3f}")
    if secs >= 1800:
        problems.append(f"reference run took {secs:.0f} s")
    record(7, not problems, "; ".join(problems or parts) + f"; reference run {secs:.0f} s")


# 8 ------------------------------------------------------------------------------

def test_criterion_08_ensembles(reference):
    pipe, _ = reference
    fit = pipe.cfg.selection.ensemble_method
    problems, parts = [], []
    for a in pipe.cfg.transfer_ids:
        v = {m: pipe.summary_score("ensemble", a, m) for m in (fit, "random", "random-large")}
        for other in ("random", "random-large"):
            if v[fit] < v[other]:
                problems.append(f"{a}: {fit} top-{pipe.cfg.selection.ensemble_k} {v[fit]:+.3f} < {other} "
                                f"{v[other]:+.3f}")
        parts.append(f"{a} {fit} {v[fit]:+.3f} random {v['random']:+.3f} random-large {v['random-large']:+.3f}")
    record(8, not problems, "; ".join(problems or parts))


# 9 ------------------------------------------------------------------------------

def test_criterion_09_transq_identities():
    ok = all(transq1([c] * 9) == 1 / c for c in (0.003, 0.25, 1.0, 7.5))
    wb, bb = [0.1, 0.2, 0.3], [1.0, 2.0, 1.5]
    ok &= transq2(wb, wb, bb) == 1.0 and transq2(bb, wb, bb) == 0.0
    ok &= all(fit_score(1.0, q) == q and fit_score(0.0, q) == 0.0 for q in (-1.5, 0.0, 0.42, 3.0))
    record(9, ok, "TransQ1(c) = 1/c, TransQ2 anchors 1/0, FiT (1, q) -> q and (0, q) -> 0")


# 10 -----------------------------------------------------------------------------

def test_criterion_10_modsim(reference):
    pipe, _ = reference
    r = np.random.default_rng(10)
    p = lambda d: DecisionProfile("m", np.asarray(d), "q")
    sym = all(mod_sim(p(a), p(b)) == mod_sim(p(b), p(a))
              for a, b in (r.integers(0, 5, (2, 200)) for _ in range(50)))
    selfsim = min(mod_sim(p(a), p(a)) for a in r.integers(0, 5, (50, 200)))
    indep = mod_sim(p(r.integers(0, 5, 10_000)), p(r.integers(0, 5, 10_000)))
    sweep = pipe.results["fingerprint_sweep"]
    method = pipe.cfg.selection.single_method
    i200, i400 = sweep["budgets"].index(200), sweep["budgets"].index(400)
    change = {a: abs(v[method][i400] - v[method][i200]) for a, v in sweep["scores"].items()}
    worst = max(change, key=change.get)
    ok = sym and abs(selfsim - 1.0) <= 1e-12 and indep <= 0.01 and change[worst] <= 0.05
    record(10, ok, f"symmetric {sym}, min self-similarity {selfsim:.12f}, independent NMI {indep:.4f}, "
                   f"{method} change 200 -> 400 queries {change[worst]:.3f} ({worst})")


# 11 -----------------------------------------------------------------------------

def test_criterion_11_epsilon_insensitivity(reference):
    pipe, _ = reference
    e = pipe.results["epsilon_sweep"]
    record(11, e["max_gap"] <= 0.1, f"{e['attack']} max vertical gap {e['max_gap']:.3f} over {sorted(e['curves'])}")


# 12 -----------------------------------------------------------------------------

def test_criterion_12_determinism(reference, reference_again):
    a, b = reference[0].out, reference_again.out
    files = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    other = sorted(p.relative_to(b) for p in b.rglob("*.csv"))
    differ = [str(f) for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]
    ok = files == other and not differ
    record(12, ok, f"{len(files)} CSV tables compared byte for byte; differing: {differ or 'none'}")
