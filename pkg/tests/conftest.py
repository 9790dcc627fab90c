import os

import pytest
from hypothesis import HealthCheck, settings

from spidefect.synthgen import GeneratorConfig, generate

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_data():
    """10 panels with a planted signal and a high defect rate: 31,120 pins."""
    return generate(GeneratorConfig(seed=11, num_panels=10, pin_defect_rate=0.02,
                                    planted_signal_strength=2.0, operator_bad_rate=0.3,
                                    missing_pin_number_rate=0.0))


@pytest.fixture(scope="session")
def default_data():
    """Default rates, 200 panels (622,400 pins)."""
    return generate(GeneratorConfig(seed=5, num_panels=200))
