import numpy as np
import pytest

from hybridslam import synthetic
from hybridslam.geometry import CameraIntrinsics


@pytest.fixture
def intr_small():
    # 160x120 with the principal point at (80, 60), as in the worked examples
    return CameraIntrinsics(100.0, 100.0, 80.0, 60.0, 160, 120, 1000.0)


@pytest.fixture(scope="session")
def synth_intr():
    return synthetic.default_intrinsics(160, 120)


@pytest.fixture(scope="session")
def room_frames(synth_intr):
    """Six noise-free frames from the start of the default loop."""
    poses = synthetic.circle_trajectory(200)[:6]
    return synthetic.render_frames(synthetic.default_room(), poses, synth_intr)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# one PASS/FAIL line per acceptance criterion, printed at the end of the session
ACCEPTANCE: list = []


@pytest.fixture
def accept():
    def record(name: str, ok: bool, detail: str = ""):
        line = f"[ACCEPTANCE] {'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
