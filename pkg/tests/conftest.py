import numpy as np
import pytest

from fluxcaustic.geometry import ImagePlane, build_grid_lens


def bumpy(lens, amplitude=0.2, seed=0, n=4):
    rng = np.random.default_rng(seed)
    x, y = lens.xy[:, 0], lens.xy[:, 1]
    z = lens.z.copy()
    for _ in range(n):
        cx, cy = rng.uniform(-0.3, 0.3, 2) * lens.width
        z += amplitude * rng.choice([-1, 1]) * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * (0.2 * lens.width) ** 2))
    return lens.with_heights(z)


@pytest.fixture
def small_lens():
    return build_grid_lens(9, 9, (10.0, 10.0), 120.0, 121.0)


@pytest.fixture
def small_plane():
    return ImagePlane(150.0, 16.0, 16.0, 32, 32)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, printed at the end of the run
CRITERIA: dict = {}


def report_criterion(number: int, title: str, passed: bool, detail: str):
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    CRITERIA[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
