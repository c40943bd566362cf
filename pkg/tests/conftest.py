import numpy as np
import pytest

from colonmap.camera import Intrinsics
from colonmap.synth import SceneSpec, centerline_trajectory, render_sequence

# acceptance-criterion outcomes collected by test_acceptance.py
ACCEPTANCE_RESULTS = {}


def tube_spec(frames=10, seed=1):
    K = Intrinsics.centered(80.0, 128, 96)
    traj = centerline_trajectory(frames, start_z=-1.0, step=0.08, yaw_deg=1.0)
    return SceneSpec("tube", K, traj, seed=seed)


@pytest.fixture(scope="session")
def tube_scene():
    spec = tube_spec()
    return spec, render_sequence(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        passed, name, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {name}  ({detail})")
