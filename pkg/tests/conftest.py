import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trajrag.gridmap import SemanticMap

settings.register_profile(
    "trajrag", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("trajrag")

CATS = ("chair", "bed", "plant")


def open_map(h=40, w=40, res=0.05, cats=CATS) -> SemanticMap:
    """Fully explored, obstacle-free map."""
    m = SemanticMap(w, h, res, (0.0, 0.0), cats)
    m.explored[:] = True
    return m


def walled_map(h=40, w=40, res=0.05, cats=CATS) -> SemanticMap:
    """Explored room with a one-cell obstacle border."""
    m = open_map(h, w, res, cats)
    m.obstacle[0, :] = m.obstacle[-1, :] = True
    m.obstacle[:, 0] = m.obstacle[:, -1] = True
    return m


def corridor_mask(shape, rows, cols) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[rows[0] : rows[1], cols[0] : cols[1]] = True
    return mask


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
