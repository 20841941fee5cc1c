import sys
from pathlib import Path

from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

import pytest  # noqa: E402

SMALL_SYNTH = ["--set", "synth.image_size=112", "--set", "synth.boxes_per_room=3", "--set", "synth.frames=8",
               "--set", "synth.orbit_radius=1.8", "--set", "masks.min_area=100", "--seed", "4"]


@pytest.fixture(scope="session")
def small_trajectory(tmp_path_factory):
    """A rendered 3-box, 8-frame trajectory shared by the CLI and service tests."""
    from openvox.cli import main

    out = tmp_path_factory.mktemp("synth") / "traj"
    assert main(["synth", "--out", str(out), *SMALL_SYNTH]) == 0
    return out


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
