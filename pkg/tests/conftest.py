import numpy as np
import pytest

from afford3d.memory import build_memory_bank
from afford3d.scene_io import CameraIntrinsics, Frame, PointCloud, Pose, SceneSequence
from afford3d.synthetic import SyntheticSceneSpec, default_spec, generate_synthetic_scene


def rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@pytest.fixture
def intr():
    return CameraIntrinsics(100.0, 100.0, 64.0, 48.0, 128, 96)


@pytest.fixture
def tiny_scene(intr):
    """Two frames looking down +z at a flat 3x3 patch."""
    pts = np.array([[x, y, 2.0] for x in (-0.1, 0.0, 0.1) for y in (-0.1, 0.0, 0.1)])
    frames = []
    for i in range(2):
        rgb = np.full((96, 128, 3), 40 * i, dtype=np.uint8)
        depth = np.full((96, 128), 2.0)
        frames.append(Frame(i, rgb, depth, intr, Pose.identity()))
    return SceneSequence("tiny", frames, PointCloud(pts, np.full((9, 3), 7, dtype=np.uint8)))


@pytest.fixture(scope="session")
def synth7():
    return generate_synthetic_scene(SyntheticSceneSpec(seed=7, n_drawers=3, lamp_side="left"))


@pytest.fixture(scope="session")
def synth_pair():
    return [generate_synthetic_scene(default_spec(s)) for s in (100, 101)]


@pytest.fixture(scope="session")
def bank(synth_pair):
    scenes = {s.scene.scene_id: s.scene for s in synth_pair}
    anns = [a for s in synth_pair for a in s.annotations]
    return build_memory_bank(anns, scenes, k=20)


# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
