import numpy as np
import pytest

from effdim.services.dataset_factory import Dataset


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch, tmp_path):
    """Keep user environment settings out of the tests."""
    monkeypatch.delenv("EFFDIM_SEED", raising=False)
    monkeypatch.delenv("EFFDIM_LOG_LEVEL", raising=False)
    monkeypatch.delenv("EFFDIM_WORKERS", raising=False)
    monkeypatch.delenv("EFFDIM_MAX_DENSE_N", raising=False)
    monkeypatch.setenv("EFFDIM_OUTPUT_DIR", str(tmp_path / "runs"))


@pytest.fixture
def strip_grid():
    """Regular grid on a 2.5 x 1 rectangle: the first y-mode sits between x-harmonics."""
    xs = np.linspace(0.0, 2.5, 50)
    ys = np.linspace(0.0, 1.0, 20)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


@pytest.fixture
def linear_dataset():
    rng = np.random.default_rng(7)
    x = rng.uniform(0.0, 1.0, size=(200, 1))
    return Dataset(x, 2.0 * x, {"kind": "synthetic"})
