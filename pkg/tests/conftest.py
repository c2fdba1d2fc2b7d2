import numpy as np
import pytest

from fedkd.data import CohortSpec, generate_cohort
from fedkd.nn import ModelArch
from fedkd.tasks import FEDERATED_TASKS


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_spec(seed=0, **kw):
    """A cheap 8-client cohort on a 16x16 grid with the default participation pattern."""
    base = dict(grid_shape=(16, 16), spacing_mm=(3.0, 3.0), seed=seed)
    base.update(kw)
    return CohortSpec(**base)


@pytest.fixture(scope="session")
def small_shards():
    return generate_cohort(small_spec())


def tiny_arch(tasks=FEDERATED_TASKS, grid=(16, 16), layers=(12,), taps=()):
    return ModelArch.for_tasks(grid, layers, tasks, deep_supervision_taps=taps)


def scan_angle(p, q, n=1_000_000):
    """Brute-force argmin of the alignment objective on an n-point angle grid.

    Coarse pass on 4096 angles, then every fine grid angle within two coarse
    steps of the coarse winner. The objective is evaluated directly (rotate,
    subtract, square) on both passes.
    """
    from fedkd.geometry import alignment_objective
    coarse = np.arange(4096) * (2 * np.pi / 4096)
    k = int(np.argmin(alignment_objective(p, q, coarse)))
    step = n // 4096 + 1
    idx = np.arange(k * n // 4096 - 2 * step, k * n // 4096 + 2 * step + 1) % n
    fine = idx * (2 * np.pi / n)
    return float(fine[int(np.argmin(alignment_objective(p, q, fine)))])


def angle_gap(a, b):
    return abs((a - b + np.pi) % (2 * np.pi) - np.pi)


def ms_cohort(n=50, swapped=(), seed=0, noise=0.8, radius=10.0):
    """Landmark dicts built around the nominal layout with optional MS1/MS2 swaps."""
    from fedkd.data import nominal_landmarks
    rng = np.random.default_rng(seed)
    nom = nominal_landmarks(radius)
    out = []
    for i in range(n):
        centre = rng.uniform(30, 60, 2)
        rot = np.radians(rng.normal(0, 10))
        c, s = np.cos(rot), np.sin(rot)
        R = np.array([[c, -s], [s, c]])
        pts = {k: R @ v + centre + rng.normal(0, noise, 2) for k, v in nom.items()}
        if i in swapped:
            pts["MS1"], pts["MS2"] = pts["MS2"], pts["MS1"]
        out.append(pts)
    return out


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
