import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def geometry():
    from acoustic_fusion.geometry import default_geometry
    return default_geometry()


@pytest.fixture(scope="session")
def pair_geometry():
    """Two microphones 5 cm apart on the lateral axis (left mic first)."""
    from acoustic_fusion.geometry import ArrayGeometry
    return ArrayGeometry(np.array([[0.0, 0.025, 0.0], [0.0, -0.025, 0.0]]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def speech_scene(geometry):
    """6 s, one speech-like source at 40 deg, 2 m, 20 dB SNR."""
    from acoustic_fusion.simulator import SceneScript, SourceSpec, render_scene
    script = SceneScript([SourceSpec([(0.0, 40.0, 2.0)], "speech")], snr_db=20.0)
    return render_scene(script, geometry, 16000, 6.0, seed=7)


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE = []


@pytest.fixture
def criterion(capsys):
    """Record one pass/fail line: criterion(number, title, ok, detail)."""
    def record(number, title, ok, detail=""):
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
        ACCEPTANCE.append((number, line))
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
