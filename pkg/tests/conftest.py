import logging
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fracstar.cli import build_instance
from fracstar.config import load_config
from fracstar.oracle_suite import tiny_instance

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_CONFIG = ROOT / "configs" / "default.toml"

settings.register_profile(
    "default", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

#: acceptance lines collected during the session, printed in the summary
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(autouse=True)
def _quiet_coverage():
    # coverage diagnostics are expected for constraint-violating samples
    logging.getLogger("fracstar").setLevel(logging.ERROR)
    yield


@pytest.fixture(scope="session")
def default_instance():
    return build_instance(load_config(DEFAULT_CONFIG))


@pytest.fixture(scope="session")
def default_problem(default_instance):
    return default_instance.problem()


@pytest.fixture(scope="session")
def tiny():
    return tiny_instance()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
