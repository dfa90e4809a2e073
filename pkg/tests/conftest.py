import numpy as np
import pytest

from hybrid_al.alloop import DataSpec, DatasetContext, ExperimentConfig, Strategy
from hybrid_al.data import PhantomConfig, generate_phantom
from hybrid_al.model import TrainConfig, extract_features, train

SMALL_PHANTOM = PhantomConfig(n_volumes=8, height=32, width=32, depth=4)
FAST_TRAIN = TrainConfig(lr=2e-3, steps=80, eval_every=40, mc_passes=4)


def small_config(strategy="unc+hres", **kw):
    base = dict(
        data=DataSpec(seed=3, phantom=SMALL_PHANTOM),
        splits=(1, 5, 1, 1),
        iterations=2,
        strategy=Strategy(strategy),
        train=FAST_TRAIN,
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def small_volumes():
    return generate_phantom(3, SMALL_PHANTOM)


@pytest.fixture(scope="session")
def small_ctx(small_volumes):
    return DatasetContext(small_volumes, SMALL_PHANTOM.n_classes)


@pytest.fixture(scope="session")
def trained_model(small_volumes):
    vol = small_volumes[0]
    X = extract_features(vol.image)
    val = [(extract_features(small_volumes[1].image), small_volumes[1].labels)]
    return train(X, vol.labels.ravel(), TrainConfig(lr=2e-3, steps=300, eval_every=100), 4, val, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ----------------------------------------------------

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_acceptance(name: str, ok: bool, detail: str) -> None:
    """Record a criterion outcome; printed in the terminal summary."""
    ACCEPTANCE[name] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
