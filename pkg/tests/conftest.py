import math
import sys

import numpy as np
import pytest

from itersync.liegroup import Group, Pose, hat, random_rotation
from itersync.synthgen import SynthConfig, generate


def series_expm(A: np.ndarray, terms: int = 30) -> np.ndarray:
    """Truncated power series sum_{k<=terms} A^k / k!."""
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, terms + 1):
        term = term @ A / k
        out = out + term
    return out


def twist_matrix(eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=float)
    M = np.zeros((4, 4))
    M[:3, :3] = hat(eps[3:])
    M[:3, 3] = eps[:3]
    return M


def random_pose(rng, group=Group.SE3) -> Pose:
    return Pose(random_rotation(rng), rng.normal(size=3), group)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_graph(group="SE3", n=8, density=0.4, outliers=0.2, seed=0):
    cfg = SynthConfig(group=group, n_nodes=(n, n), edge_density=(density, density),
                      outlier_fraction=outliers, seed=seed, sigma_rot=math.radians(3.0))
    return generate(cfg)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
