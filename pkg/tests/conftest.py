import numpy as np
import pytest

from fitbench.zoo import ArchSpec, TrainingParams, generate_dataset, linear_model, train_model

# criterion lines collected by test_acceptance and printed at the end of the session
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0].split()[1])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def small_ds():
    return generate_dataset(7, 600, 200, K=4, N=32)


SMALL_ARCHS = {
    "lin": ("linear", ArchSpec()),
    "tanh": ("mlp-tanh", ArchSpec((16,), "tanh")),
    "tanh2": ("mlp-tanh", ArchSpec((16, 16), "tanh")),
    "relu": ("mlp-relu", ArchSpec((16, 16), "relu")),
    "wide": ("wide", ArchSpec((64,), "relu", 0.2)),
}


@pytest.fixture(scope="session")
def small_models(small_ds):
    params = TrainingParams(epochs=300, accuracy_floor=0.0)
    return {
        mid: train_model(arch, small_ds, seed, model_id=mid, family=fam, params=params)
        for seed, (mid, (fam, arch)) in enumerate(SMALL_ARCHS.items())
    }


@pytest.fixture(scope="session")
def correct_samples(small_ds, small_models):
    """Eval samples every small model classifies correctly."""
    return [s for s in small_ds.samples("eval") if all(m.kernel.predict(s.x) == s.y for m in small_models.values())]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_linear(rng, K=3, N=16, scale=1.0, model_id="lin"):
    return linear_model(rng.normal(0, scale, size=(K, N)), rng.normal(0, 0.1, size=K), model_id=model_id)
