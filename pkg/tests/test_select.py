import math

import pytest

from fitbench.errors import ConfigurationError, InputError, ReferenceOrderingError
from fitbench.select import (FitEntry, FitTable, asr_score, build_fit_table, candidate_pool, fit_score,
                             select_attack_and_source, select_source, select_topk, surrogate_pool, transq1,
                             transq2)

FAMILIES = {"a1": "a", "a2": "a", "b1": "b", "b2": "b", "c1": "c", "c2": "c"}
IDS = sorted(FAMILIES)


def test_transq1_constant():
    for c in (0.01, 0.5, 3.0):
        assert transq1([c] * 7) == 1 / c


def test_transq1_is_inverse_mean():
    assert transq1([1.0, 3.0]) == 0.5


def test_transq2_anchors_and_errors():
    wb, bb = [1.0, 2.0], [3.0, 5.0]
    assert transq2(wb, wb, bb) == 1.0
    assert transq2(bb, wb, bb) == 0.0
    assert transq2([2.0, 3.5], wb, bb) == pytest.approx(0.5)
    with pytest.raises(ReferenceOrderingError):
        transq2([1.0, 1.0], bb, wb)
    with pytest.raises(InputError):
        transq2([1.0], wb, bb)
    with pytest.raises(ConfigurationError):
        transq2([], [], [])


def test_fit_identities():
    for q in (-2.5, 0.0, 0.3, 7.0):
        assert fit_score(1.0, q) == q
        assert fit_score(0.0, q) == 0.0
    assert fit_score(0.0, -math.inf) == -math.inf


def test_asr():
    assert asr_score([0.01, 0.02, 0.05, 0.1], 8 / 255) == 0.5
    assert asr_score([8 / 255], 8 / 255) == 1.0


def test_pools_exclude_target_family_and_source():
    assert candidate_pool(IDS, "a1", FAMILIES) == ["b1", "b2", "c1", "c2"]
    assert candidate_pool(IDS, "a1", FAMILIES, exclude_family=False) == ["a2", "b1", "b2", "c1", "c2"]
    assert surrogate_pool(IDS, "b1", "a1", FAMILIES) == ["b2", "c1", "c2"]
    assert surrogate_pool(IDS, "b1", "a1", FAMILIES, include_source=True) == ["b1", "b2", "c1", "c2"]
    with pytest.raises(ConfigurationError):
        surrogate_pool(["a1", "a2"], "a2", "a1", FAMILIES, exclude_family=False)


def test_tie_breaks():
    assert select_source({"z": 1.0, "b": 2.0, "a": 2.0}) == "a"
    assert select_topk({"z": 1.0, "b": 2.0, "a": 2.0}, 2) == ["a", "b"]
    assert select_attack_and_source({"taig": {"s2": 1.0, "s1": 0.5}, "di": {"s2": 1.0}}) == ("di", "s2")
    with pytest.raises(ConfigurationError):
        select_source({})
    with pytest.raises(ConfigurationError):
        select_topk({"a": 1.0}, 2)


def _build():
    # source s transfers to surrogate g with distortion depending only on the pair
    dist = lambda s, g, x: 0.1 + 0.01 * (IDS.index(s) + 2 * IDS.index(g)) + 0.001 * x
    refs = lambda g, x: (0.05, 1.0)
    modsim = lambda s, t: 0.5 if FAMILIES[s] == "b" else 0.25
    return build_fit_table(dist, refs, modsim, IDS, FAMILIES, IDS, [0, 1], 0.2), dist


def test_fit_table_entries_follow_definitions():
    tab, dist = _build()
    e = tab.get("b1", "a1", 1)
    pool = ["b2", "c1", "c2"]
    ds = [dist("b1", g, 1) for g in pool]
    assert e.transq1 == transq1(ds)
    assert e.transq2 == transq2(ds, [0.05] * 3, [1.0] * 3)
    assert e.asr == asr_score(ds, 0.2)
    assert e.fit1 == 0.5 * e.transq1
    assert len(tab) == 6 * 4 * 2


def test_fit_selection_prefers_similar_family():
    tab, _ = _build()
    scores = tab.scores("a1", 0, candidate_pool(IDS, "a1", FAMILIES), "fit1")
    assert select_source(scores) in ("b1", "b2")


def test_fit_table_csv_roundtrip_and_tamper(tmp_path):
    tab, _ = _build()
    p = tmp_path / "fit.csv"
    text = tab.to_csv(p)
    assert FitTable.from_csv(p).to_csv() == text
    lines = text.splitlines()
    cells = lines[1].split(",")
    cells[-2] = repr(float(cells[-2]) + 1.0)
    p.write_text("\n".join([lines[0], ",".join(cells), *lines[2:]]) + "\n")
    with pytest.raises(InputError):
        FitTable.from_csv(p)


def test_with_modsim_keeps_transq():
    tab, _ = _build()
    other = tab.with_modsim(lambda s, t: 1.0)
    for a, b in zip(tab, other):
        assert (a.transq1, a.transq2) == (b.transq1, b.transq2) and b.fit1 == b.transq1


def test_unordered_surrogate_references_give_minus_inf():
    refs = lambda g, x: (1.0, 1.0)
    tab = build_fit_table(lambda s, g, x: 0.5, refs, lambda s, t: 0.0, IDS, FAMILIES, ["a1"], [0], 0.1)
    e = tab.get("b1", "a1", 0)
    assert e.transq2 == -math.inf and e.fit2 == -math.inf


def test_fit_entry_products():
    e = FitEntry("s", "t", 0, 0.5, 2.0, -1.0, 0.25)
    assert (e.fit1, e.fit2) == (1.0, -0.5)
