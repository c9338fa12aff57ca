import numpy as np
import pytest

from spatialvr.panel import PanelDataset
from spatialvr.simulation import DgpConfig, generate_realization


def make_panel(Y, n_treated, t0, distances=None):
    N, T = np.shape(Y)
    if distances is None:
        distances = np.arange(1, n_treated + 1, dtype=float)
    ids = tuple(f"T{i}" for i in range(n_treated)) + tuple(f"C{c}" for c in range(N - n_treated))
    return PanelDataset(ids, np.asarray(Y, dtype=float), n_treated, t0, tuple(range(T)), np.asarray(distances, dtype=float))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def dgp_small():
    """One realization of the simulation DGP: 5 treated, 10 controls, T0=20, 5 post periods."""
    return generate_realization(DgpConfig(t0=20, t_post=5), 0)


@pytest.fixture
def toy_panel_csv(tmp_path, dgp_small):
    from spatialvr.panel import write_panel_csv

    path = tmp_path / "panel.csv"
    write_panel_csv(dgp_small.data, path)
    return path


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
