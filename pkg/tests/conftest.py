import numpy as np
import pytest

from sdfgrasp.grasp_data import observe
from sdfgrasp.kinematics import KinematicChain
from sdfgrasp.scenes import tabletop_scene
from sdfgrasp.sdf import Box, Capsule, Cylinder, Sphere


@pytest.fixture(scope="session")
def chain():
    return KinematicChain.default()


@pytest.fixture(scope="session")
def box_scene():
    return tabletop_scene(Box((0.03, 0.035, 0.07)), yaw=0.3)


@pytest.fixture(scope="session")
def box_obs(box_scene):
    return observe(box_scene, "high", 0.002, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


PRIMITIVES = [Sphere(0.3), Box((0.2, 0.3, 0.4)), Cylinder(0.25, 0.35), Capsule(0.15, 0.3)]


# acceptance lines, echoed in the terminal summary whether or not output is captured
ACCEPTANCE = []


def record_criterion(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
