import numpy as np
import pytest

from conftest import random_linear
from fitbench.blackbox import BlackBoxConfig, DecisionOracle, blackbox_reference_distortions, run_blackbox
from fitbench.errors import ConfigurationError, PreconditionError
from fitbench.geometry import LineSearchParams, is_adversarial, min_distortion_along
from fitbench.sources import EnsembleSpec, ce_gradient, source_logits
from fitbench.transfer import TransferConfig, integrated_gradients, path_integral, run_transfer, transfer_point
from fitbench.whitebox import (WhiteBoxConfig, deepfool, run_whitebox, sign_iterations, whitebox_point,
                               whitebox_reference_distortions)
from fitbench.zoo import CrossEntropy, Sample, forward, linear_model, loss_value


@pytest.fixture(scope="module")
def pair(small_models, correct_samples):
    return small_models["tanh2"], correct_samples[:12]


# --- white box -------------------------------------------------------------------

@pytest.mark.parametrize("attack", ["ifgsm", "pgd"])
def test_budgeted_attacks_stay_in_ball_and_box(attack, pair):
    m, samples = pair
    cfg = WhiteBoxConfig(attack, epsilon=4 / 255, steps=10)
    for s in samples:
        xa = whitebox_point(m, s, cfg)
        assert np.abs(xa - s.x).max() <= cfg.epsilon + 1e-12
        assert xa.min() >= 0 and xa.max() <= 1


def test_ifgsm_raises_the_loss(pair):
    m, samples = pair
    cfg = WhiteBoxConfig("ifgsm", epsilon=4 / 255)
    for s in samples:
        before = loss_value(forward(m, s.x), CrossEntropy(s.y))
        after = loss_value(forward(m, whitebox_point(m, s, cfg)), CrossEntropy(s.y))
        assert after > before


def test_pgd_start_is_seeded(pair):
    m, samples = pair
    # one step: longer runs saturate at the ball corners and forget the start
    a = whitebox_point(m, samples[0], WhiteBoxConfig("pgd", seed=1, steps=1))
    b = whitebox_point(m, samples[0], WhiteBoxConfig("pgd", seed=1, steps=1))
    c = whitebox_point(m, samples[0], WhiteBoxConfig("pgd", seed=2, steps=1))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_deepfool_on_binary_linear_is_the_projection():
    # two classes: the minimal L2 flip is the projection onto the hyperplane
    w = np.array([[1.0, -2.0, 0.5, 0.0], [0.0, 0.0, 0.0, 0.0]])
    b = np.array([0.5, 0.0])
    m = linear_model(w, b)
    x = np.full(4, 0.5)
    r = deepfool(m, x, 0, overshoot=0.0)
    gap = w[0] @ x + b[0]
    expect = -(gap + 1e-4) / (w[0] @ w[0]) * w[0]
    assert np.allclose(r - x, expect, atol=1e-12)


def test_deepfool_flips_source(pair):
    m, samples = pair
    for s in samples:
        xa = whitebox_point(m, s, WhiteBoxConfig("deepfool"))
        assert int(np.argmax(forward(m, xa))) != s.y


def test_whitebox_reference_is_the_minimum(pair):
    m, samples = pair
    cfgs = [WhiteBoxConfig(a) for a in ("ifgsm", "pgd", "deepfool")]
    d, per = whitebox_reference_distortions(m, samples[:4], cfgs)
    for i in range(4):
        assert d[i] == min(per[a][i].d for a in per)


def test_whitebox_validation(pair):
    m, samples = pair
    with pytest.raises(ConfigurationError):
        WhiteBoxConfig("cw")
    s = samples[0]
    with pytest.raises(PreconditionError):
        run_whitebox(m, Sample(s.x, (s.y + 1) % m.K, s.id), WhiteBoxConfig("ifgsm"))


def test_sign_iterations_projection():
    x = np.array([0.0, 0.5, 1.0])
    xa = sign_iterations(x, lambda z, i: np.array([-1.0, 1.0, 1.0]), 0.1, 5, 0.05)
    assert np.allclose(xa, [0.0, 0.6, 1.0])


# --- transfer --------------------------------------------------------------------

def test_di_without_transform_is_ifgsm(pair):
    m, samples = pair
    cfg = TransferConfig("di", di_prob=0.0)
    for s in samples[:4]:
        ref = sign_iterations(s.x, lambda xa, _i: ce_gradient(m, xa, s.y), cfg.epsilon, cfg.steps, cfg.alpha)
        assert np.array_equal(transfer_point(m, s, cfg), ref)


def test_dwp_without_pruning_is_ifgsm(pair):
    m, samples = pair
    cfg = TransferConfig("dwp", dwp_prune=0.0, dwp_copies=2)
    for s in samples[:4]:
        ref = sign_iterations(s.x, lambda xa, _i: ce_gradient(m, xa, s.y), cfg.epsilon, cfg.steps, cfg.alpha)
        assert np.allclose(transfer_point(m, s, cfg), ref, atol=1e-15)


def test_integrated_gradients_completeness(small_models, small_ds):
    m = small_models["tanh"]
    x = small_ds.x_eval[0]
    base = np.zeros_like(x)
    ig = integrated_gradients(m, x, base, 400, 1)
    assert ig.sum() == pytest.approx(forward(m, x)[1] - forward(m, base)[1], rel=1e-4)


def test_integrated_gradients_exact_on_linear(rng):
    m = random_linear(rng)
    x = rng.random(16)
    ig = integrated_gradients(m, x, np.zeros(16), 1, 2)
    assert np.allclose(ig, x * m.layers[0].weight[2], atol=1e-14)


def test_path_integral_midpoint_rule():
    # gradient 2x on [0, 1]: the midpoint rule is exact for linear integrands
    out = path_integral(lambda p: 2 * p, np.array([1.0]), np.array([0.0]), 3)
    assert out[0] == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("attack", ["di", "taig", "dwp"])
def test_transfer_ball_seed_and_id(attack, pair):
    m, samples = pair
    cfg = TransferConfig(attack, taig_steps=4, seed=3)
    s = samples[1]
    xa = transfer_point(m, s, cfg)
    assert np.abs(xa - s.x).max() <= cfg.epsilon + 1e-12
    assert np.array_equal(xa, transfer_point(m, s, cfg))
    d = run_transfer(m, s, cfg)
    assert (d.source_id, d.attack_id, d.sample_id) == (m.id, attack, s.id)


def test_ensemble_is_logit_mean(small_models, correct_samples):
    a, b = small_models["tanh"], small_models["relu"]
    ens = EnsembleSpec((a, b))
    s = correct_samples[0]
    assert ens.id == "tanh+relu"
    assert np.allclose(source_logits(ens, s.x), (forward(a, s.x) + forward(b, s.x)) / 2, atol=1e-14)
    d = run_transfer(ens, s, TransferConfig("di", seed=1))
    assert d.source_id == "tanh+relu"


def test_ensemble_rejects_empty():
    with pytest.raises(ConfigurationError):
        EnsembleSpec(())


def test_transfer_config_validation():
    with pytest.raises(ConfigurationError):
        TransferConfig("mi")
    with pytest.raises(ConfigurationError):
        TransferConfig("dwp", dwp_prune=1.0)
    assert TransferConfig("di").with_epsilon(4 / 255).epsilon == 4 / 255


# --- black box --------------------------------------------------------------------

def test_oracle_counts_and_enforces_budget(small_models, correct_samples):
    m, s = small_models["relu"], correct_samples[0]
    o = DecisionOracle(m, 3)
    for _ in range(3):
        o.classify(s.x)
    assert o.queries == 3 and o.exhausted and o.remaining == 0
    with pytest.raises(RuntimeError):
        o.classify(s.x)


def test_oracle_line_search_charges_queries(small_models, correct_samples, rng):
    m, s = small_models["relu"], correct_samples[0]
    o = DecisionOracle(m, 10)
    o.line_search(s.x, rng.normal(size=s.x.size), s.y, LineSearchParams())
    assert o.queries <= 10


def test_blackbox_respects_budget_and_flips(small_models, correct_samples):
    m = small_models["tanh2"]
    for s in correct_samples[:5]:
        r = run_blackbox(m, s, BlackBoxConfig(budget=300, restarts=3))
        assert r.queries <= 300
        if r.found:
            assert is_adversarial(m, s, r.direction, r.d)


def test_blackbox_larger_budget_never_worse(small_models, correct_samples):
    m = small_models["wide"]
    for s in correct_samples[:5]:
        small = run_blackbox(m, s, BlackBoxConfig(budget=200, restarts=3))
        large = run_blackbox(m, s, BlackBoxConfig(budget=600, restarts=3))
        assert large.d <= small.d


def test_blackbox_above_whitebox_mostly(small_models, correct_samples):
    m = small_models["tanh"]
    samples = correct_samples[:10]
    wb, _ = whitebox_reference_distortions(m, samples, [WhiteBoxConfig(a) for a in ("ifgsm", "pgd", "deepfool")])
    bb, _ = blackbox_reference_distortions(m, samples, [BlackBoxConfig(budget=500, restarts=3)])
    assert np.mean(wb <= bb) >= 0.9


def test_blackbox_refinement_improves_on_random_rays(small_models, correct_samples):
    m, s = small_models["lin"], correct_samples[0]
    rays = run_blackbox(m, s, BlackBoxConfig(budget=100, restarts=3))
    refined = run_blackbox(m, s, BlackBoxConfig(budget=1000, restarts=3))
    assert refined.d < rays.d


def test_blackbox_config_validation():
    with pytest.raises(ConfigurationError):
        BlackBoxConfig(budget=10)
    with pytest.raises(ConfigurationError):
        BlackBoxConfig(restarts=0)


def test_whitebox_direction_line_search(pair):
    m, samples = pair
    for s in samples[:4]:
        r = min_distortion_along(m, s, run_whitebox(m, s, WhiteBoxConfig("deepfool")))
        assert r.found
