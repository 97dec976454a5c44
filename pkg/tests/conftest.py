import numpy as np
import pytest
from hypothesis import settings

from colonpipe.synthcolon import (Lighting, TrajectorySpec, build_phantom, default_phantom,
                                  render_sequence, sample_trajectory)

settings.register_profile("repo", deadline=None, max_examples=60)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def phantom():
    return build_phantom(default_phantom())


@pytest.fixture(scope="session")
def rendered(phantom):
    """16 frames at 96x96 through the default phantom."""
    spec = TrajectorySpec(n_frames=16, speed_min=1.5, speed_max=2.5, start_s=20.0, tilt_deg=5.0,
                          width=96, height=96, seed=3)
    traj = sample_trajectory(spec, phantom)
    return traj, render_sequence(phantom, traj.poses, traj.intrinsics, Lighting())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA] = []


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line per acceptance criterion, then assert it."""
    lines = request.config.stash[_CRITERIA]

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
