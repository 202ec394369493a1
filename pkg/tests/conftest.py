import numpy as np
import pytest

from services.config_service import TrainingConfig
from services.simulation_service import LinRegPrior


@pytest.fixture(autouse=True)
def quiet_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("FISHNETS_PROGRESS", "0")
    monkeypatch.setenv("FISHNETS_RUN_ROOT", str(tmp_path / "runs"))
    monkeypatch.delenv("DATABASE_URL", raising=False)


@pytest.fixture
def prior():
    return LinRegPrior()


@pytest.fixture
def training_config():
    def make(**overrides):
        values = {"epochs": 3, "batch_size": 4, "learning_rate": 1e-3, "seed": 0, "progress": False}
        values.update(overrides)
        return TrainingConfig(**values)

    return make


@pytest.fixture
def numeric_grad():
    """Central finite differences of loss_fn() with respect to params[name]."""

    def grad(loss_fn, params, name, eps=1e-6, max_entries=12, seed=0):
        array = params[name]
        rng = np.random.default_rng(seed)
        flat_idx = rng.choice(array.size, size=min(max_entries, array.size), replace=False)
        out = {}
        for flat in flat_idx:
            idx = np.unravel_index(flat, array.shape)
            original = array[idx]
            array[idx] = original + eps
            up = loss_fn()
            array[idx] = original - eps
            down = loss_fn()
            array[idx] = original
            out[idx] = (up - down) / (2 * eps)
        return out

    return grad


@pytest.fixture
def random_spd():
    def make(n, seed=0):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(n, n))
        return a @ a.T + n * np.eye(n)

    return make
