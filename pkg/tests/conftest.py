import numpy as np
import pytest

from semsplat.scene import Camera, Gaussians, IdsField, Scene


def random_scene(rng, n=20, dim=4, n_groups=3, size=32, spread=0.6, scale=(0.05, 0.25)):
    """Small random scene in front of a camera at (0, 0, -3) looking at the origin."""
    pos = rng.uniform(-spread, spread, size=(n, 3))
    q = rng.normal(size=(n, 4))
    s = rng.uniform(*scale, size=(n, 3))
    o = rng.uniform(0.2, 0.95, size=n)
    c = rng.uniform(0, 1, size=(n, 3))
    g = Gaussians.from_values(pos, q, s, o, c)
    ids = rng.integers(-1, n_groups, size=n) if n_groups else np.full(n, -1)
    idsf = IdsField(rng.normal(size=(n, dim)), ids)
    cam = Camera.look_at([0.3, -0.2, -3.0], [0, 0, 0], width=size, height=size, fov_deg=40, up=(0, -1, 0))
    return Scene(g, idsf, [cam], [np.zeros((size, size, 3))]), cam


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines collected by test_acceptance.py and repeated at the end of the run
CRITERIA: list = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: s.split()[1]):
            terminalreporter.write_line(line)
