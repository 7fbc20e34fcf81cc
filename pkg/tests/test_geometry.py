import math

import numpy as np
import pytest

from conftest import random_linear
from fitbench.errors import ConfigurationError, DegenerateDirectionError, PreconditionError
from fitbench.geometry import LineSearchParams, is_adversarial, min_distortion_along, normalize_direction
from fitbench.zoo import Sample


def closed_form_boundary(model, x, u, y):
    """Smallest delta > 0 where some class overtakes y on the unclipped ray x + delta u."""
    layer = model.layers[0]
    W, b = layer.weight, layer.bias
    best = math.inf
    for k in range(W.shape[0]):
        if k == y:
            continue
        gap0 = (W[y] - W[k]) @ x + b[y] - b[k]
        slope = (W[y] - W[k]) @ u
        if slope < 0:
            best = min(best, gap0 / -slope)
    return best


def test_normalize_direction_norm(rng):
    d = normalize_direction(rng.normal(size=37) * 1e-7)
    assert np.linalg.norm(d.u) == pytest.approx(math.sqrt(37), rel=1e-12)
    assert not d.u.flags.writeable


def test_normalize_rejects_degenerate():
    with pytest.raises(DegenerateDirectionError):
        normalize_direction(np.zeros(5))
    with pytest.raises(DegenerateDirectionError):
        normalize_direction(np.array([1.0, np.nan]))


def test_params_validation():
    with pytest.raises(ConfigurationError):
        LineSearchParams(cap=0)
    with pytest.raises(ConfigurationError):
        LineSearchParams(tol=-1)


def test_closed_form_on_linear_models(rng):
    params = LineSearchParams()
    checked = 0
    while checked < 100:
        m = random_linear(rng, K=4, N=24, scale=3.0)
        x = np.full(24, 0.5) + rng.uniform(-0.05, 0.05, size=24)
        y = m.kernel.predict(x)
        u = normalize_direction(rng.normal(size=24)).u
        expect = closed_form_boundary(m, x, u, y)
        # stay inside the box so the ray is the straight line the formula assumes
        if not expect < 0.4 / np.abs(u).max():
            continue
        r = min_distortion_along(m, Sample(x, y, 0), u, params)
        assert r.found and not r.clipped
        assert abs(r.d - expect) <= 2 * params.tol
        checked += 1


def test_flip_at_d_not_before(small_models, correct_samples, rng):
    params = LineSearchParams()
    models = list(small_models.values())
    for i in range(60):
        m = models[i % len(models)]
        s = correct_samples[i % len(correct_samples)]
        u = normalize_direction(rng.normal(size=s.x.size)).u
        r = min_distortion_along(m, s, u, params)
        if not r.found:
            continue
        assert is_adversarial(m, s, u, r.d)
        assert m.kernel.probe(s.x, u, r.d) == r.adversarial_label
        if r.d > 2 * params.tol:
            assert not is_adversarial(m, s, u, r.d - 2 * params.tol)


def test_not_found_enters_at_cap():
    # a model with a constant winner never flips
    from fitbench.zoo import linear_model

    m = linear_model(np.zeros((3, 4)), np.array([1.0, 0.0, 0.0]))
    r = min_distortion_along(m, Sample(np.full(4, 0.5), 0, 0), np.ones(4), LineSearchParams(cap=2.0))
    assert (r.d, r.found, r.status, r.adversarial_label) == (2.0, False, "not-found", 0)


def test_misclassified_precondition(rng):
    m = random_linear(rng)
    x = rng.random(16)
    wrong = (m.kernel.predict(x) + 1) % 3
    with pytest.raises(PreconditionError):
        min_distortion_along(m, Sample(x, wrong, 0), np.ones(16))


def test_query_bound_and_budget(rng):
    params = LineSearchParams()
    for _ in range(30):
        m = random_linear(rng, scale=2.0)
        x = rng.random(16)
        u = normalize_direction(rng.normal(size=16)).u
        r = min_distortion_along(m, Sample(x, m.kernel.predict(x), 0), u, params)
        assert r.queries <= params.query_bound(params.cap)
    capped = min_distortion_along(m, Sample(x, m.kernel.predict(x), 0), u, params, max_queries=3)
    assert capped.queries <= 3


def test_scaled_direction_same_point(rng):
    # the direction is renormalized upstream; the search reports a ray parameter for the given u
    m = random_linear(rng, scale=3.0)
    x = np.full(16, 0.5)
    s = Sample(x, m.kernel.predict(x), 0)
    u = normalize_direction(rng.normal(size=16)).u
    a = min_distortion_along(m, s, u)
    b = min_distortion_along(m, s, 2 * u)
    if a.found and a.d < 1.0:
        assert b.d == pytest.approx(a.d / 2, abs=2e-4)
