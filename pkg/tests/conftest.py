import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import hvac_limit_cycle  # noqa: E402


@pytest.fixture(scope="session")
def nominal_cycle():
    """Converged deterministic thermostat cycle of the nominal house."""
    return hvac_limit_cycle()
