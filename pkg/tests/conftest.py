import numpy as np
import pytest

from semtex import synthetic
from semtex.atlas import build_texel_table, generate_uv_atlas
from semtex.camera import CameraFrame
from semtex.semantic import SegmentationResult


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def room():
    return synthetic.box_room()


@pytest.fixture(scope="session")
def room_table(room):
    mesh = generate_uv_atlas(room.positions, room.faces, 256)
    return build_texel_table(mesh, 256)


@pytest.fixture(scope="session")
def room_camera():
    return synthetic.default_camera(96, 72)


@pytest.fixture(scope="session")
def room_poses():
    return synthetic.room_trajectory((6.0, 5.0, 3.0), n=20, seed=0)


@pytest.fixture(scope="session")
def room_gt(room, room_camera, room_poses):
    return [synthetic.render_labels(room, room_camera, p) for p in room_poses]


def exact_frames(scene, model, poses, gts):
    """Frames whose segmentation is the ground truth at full confidence."""
    frames = []
    for i, (pose, gt) in enumerate(zip(poses, gts)):
        labels = np.where(gt == 255, 0, gt).astype(np.uint16)
        seg = SegmentationResult(labels, np.ones(gt.shape, dtype=np.float32))
        frames.append(CameraFrame(i, model, pose, segmentation=seg))
    return frames


# --------------------------------------------------------------------------
# acceptance report: one pass/fail line per criterion in the terminal summary

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when == "teardown":
        return
    if report.when == "call" or report.failed:
        number, title = mark.args
        passed = report.passed and _criteria.get(number, (title, True))[1]
        _criteria[number] = (title, passed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, passed = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {title}")
