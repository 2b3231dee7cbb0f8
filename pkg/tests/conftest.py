import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from skelkit.synth import generate, preset

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# acceptance results, printed in the terminal summary
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {name}: {detail}")


@pytest.fixture(scope="session")
def hinge2():
    return generate(preset("hinge2", n_frames=10))


@pytest.fixture(scope="session")
def arm3():
    spec = preset("arm3")
    mesh, gt = generate(spec)
    return spec, mesh, gt


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
