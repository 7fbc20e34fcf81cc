import numpy as np
import pytest

from conftest import SMALL_ARCHS
from fitbench.errors import ConfigurationError, InputError, TrainingError
from fitbench.zoo import (ArchSpec, CrossEntropy, LogitDifference, ModelSpec, ModelZoo, TrainingParams, accuracy,
                          build_zoo, forward, generate_dataset, input_gradient, load_zoo, loss_value, predict,
                          save_zoo, train_model)


def central_difference(model, x, loss, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (loss_value(forward(model, x + e), loss) - loss_value(forward(model, x - e), loss)) / (2 * h)
    return g


def test_dataset_deterministic_and_boxed():
    a = generate_dataset(5, 50, 20, K=3, N=8)
    b = generate_dataset(5, 50, 20, K=3, N=8)
    assert np.array_equal(a.x_train, b.x_train) and np.array_equal(a.y_eval, b.y_eval)
    assert a.x_train.min() >= 0 and a.x_train.max() <= 1
    assert not a.x_train.flags.writeable
    assert sorted(set(a.y_train.tolist())) == [0, 1, 2]
    c = generate_dataset(6, 50, 20, K=3, N=8)
    assert not np.array_equal(a.x_train, c.x_train)


def test_sample_ids_are_global(small_ds):
    s = small_ds.samples("eval")[3]
    assert s.id == small_ds.n_train + 3
    assert np.array_equal(small_ds.sample(s.id).x, s.x)
    with pytest.raises(InputError):
        small_ds.sample(10 ** 6)


def test_dataset_rejects_bad_sizes():
    with pytest.raises(ConfigurationError):
        generate_dataset(0, 10, 10, K=2, N=4)


def test_models_learn(small_models, small_ds):
    for m in small_models.values():
        assert m.eval_accuracy == accuracy(m, small_ds.x_eval, small_ds.y_eval)
        assert m.eval_accuracy > 0.75


def test_training_is_deterministic(small_ds):
    p = TrainingParams(epochs=20, accuracy_floor=0.0)
    a = train_model(ArchSpec((8,), "tanh"), small_ds, 3, params=p)
    b = train_model(ArchSpec((8,), "tanh"), small_ds, 3, params=p)
    assert a.digest() == b.digest()


def test_accuracy_floor_raises(small_ds):
    with pytest.raises(TrainingError):
        train_model(ArchSpec(), small_ds, 0, params=TrainingParams(epochs=1, accuracy_floor=0.99))


@pytest.mark.parametrize("mid", list(SMALL_ARCHS))
def test_gradient_matches_finite_differences(mid, small_models, small_ds):
    m = small_models[mid]
    rng = np.random.default_rng(list(SMALL_ARCHS).index(mid))
    worst = 0.0
    for i in range(25):
        x = small_ds.x_eval[i]
        loss = CrossEntropy(int(small_ds.y_eval[i])) if i % 2 else LogitDifference(0, 1 + i % (m.K - 1))
        x = np.clip(x + rng.normal(0, 0.01, size=x.size), 0, 1)
        g = input_gradient(m, x, loss)
        fd = central_difference(m, x, loss)
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    assert worst <= 1e-3


def test_forward_batch_matches_single(small_models, small_ds):
    m = small_models["tanh2"]
    batch = forward(m, small_ds.x_eval[:5])
    for i in range(5):
        assert np.allclose(batch[i], forward(m, small_ds.x_eval[i]), rtol=0, atol=1e-12)
    assert predict(m, small_ds.x_eval[0]) == int(np.argmax(batch[0]))


def test_wrong_dimension(small_models):
    with pytest.raises(InputError):
        forward(small_models["lin"], np.zeros(5))


def test_kernel_agrees_with_forward(small_models, small_ds):
    for m in small_models.values():
        assert [m.kernel.predict(x) for x in small_ds.x_eval] == list(predict(m, small_ds.x_eval))


def test_save_load_roundtrip(small_models, tmp_path):
    zoo = ModelZoo(list(small_models.values()))
    save_zoo(zoo, tmp_path)
    back = load_zoo(tmp_path)
    assert back.ids == zoo.ids
    for a, b in zip(zoo, back):
        assert a.digest() == b.digest() and a.arch == b.arch and a.family == b.family


def test_zoo_candidates_and_validation(small_models):
    zoo = ModelZoo(list(small_models.values()))
    assert zoo.candidates("tanh") == ["lin", "relu", "wide"]
    assert zoo.candidates("tanh", exclude_family=False) == ["lin", "tanh2", "relu", "wide"]
    with pytest.raises(ConfigurationError):
        zoo.validate(min_families=3, min_members=2)


def test_build_zoo_matches_direct(small_ds):
    p = TrainingParams(epochs=5, accuracy_floor=0.0)
    spec = ModelSpec("m", "f", ArchSpec((4,), "relu"), 11)
    zoo = build_zoo([spec], small_ds, p)
    direct = train_model(spec.arch, small_ds, 11, model_id="m", family="f", params=p)
    assert zoo["m"].digest() == direct.digest()


def test_arch_validation():
    with pytest.raises(ConfigurationError):
        ArchSpec((0,))
