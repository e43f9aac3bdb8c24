import numpy as np
import pytest

from pushxfer import pushsim as ps
from pushxfer.features import build_feature_set


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def cube_shape():
    return ps.gen_shape(ps.preset_shape("cube"), np.random.default_rng(7))


@pytest.fixture(scope="session")
def cube_scene(cube_shape):
    pose = cube_shape.resting_pose()
    cloud = cube_shape.world_cloud(pose)
    return pose, cloud, build_feature_set(cloud)


@pytest.fixture(scope="session")
def links():
    return ps.default_links()


CRITERIA_LINES = []


@pytest.fixture
def criterion(capsys):
    """Record (and echo) one pass/fail line for an acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES):
            terminalreporter.write_line(line)
