import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


@pytest.fixture
def scalar():
    from hjbs.models import scalar_model
    return scalar_model()


@pytest.fixture
def heat():
    from hjbs.models import HeatConfig, build_heat_model
    return build_heat_model(HeatConfig())


@pytest.fixture
def delay():
    from hjbs.models import DelayConfig, build_delay_model
    return build_delay_model(DelayConfig(m_lag=50))


def ou_scalar_mean_var(x, t, a=-1.0, g=1.0):
    return np.exp(a * t) * x, g * g * np.expm1(2 * a * t) / (2 * a)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
