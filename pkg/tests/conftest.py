import pytest

from bessauth import REFERENCE_PACK, REFERENCE_SCENARIO, data_path
from bessauth.battery import CellParams, load_pack

# Datasheet-style parameters of the two characterized cells.
CELL1 = CellParams(
    nominal_voltage=3.5, rated_capacity=2.0, initial_soc=64.0, response_time=5.0,
    max_capacity=2.05, cutoff_voltage=2.625, full_voltage=4.1,
    nominal_current=0.4, internal_resistance=0.017, capacity_nominal=1.8087,
    exp_voltage=3.88, exp_capacity=0.2)

CELL2 = CellParams(
    nominal_voltage=3.5, rated_capacity=2.0, initial_soc=65.0, response_time=5.0,
    max_capacity=2.02, cutoff_voltage=2.622, full_voltage=4.1,
    nominal_current=0.4, internal_resistance=0.012, capacity_nominal=1.7897,
    exp_voltage=3.81, exp_capacity=0.2)


@pytest.fixture(scope="session")
def pack_path():
    return str(data_path(REFERENCE_PACK))


@pytest.fixture(scope="session")
def scenario_path():
    return str(data_path(REFERENCE_SCENARIO))


@pytest.fixture
def pack(pack_path):
    return load_pack(pack_path)


@pytest.fixture
def quiet_pack(pack_path):
    p = load_pack(pack_path)
    p.noise_sigma = 0.0
    return p
