import pytest

from rackbench.inventory import parse_inventory
from rackbench.sim.testbed import ScenarioConfig, SimTestbed, default_inventory_text

# the inventory listing the hardware racks ship with: rack 1's worker group,
# a single consumer host, and the per-rack control nodes
RACK_LISTING = """\
[odroids-testgroup]
192.168.1.[1:16] ssh_pass=odroid

[odroids-testgroup-consumer]
192.168.1.1 ssh_pass=odroid

[odroids-control]
192.168.[1:8].42
"""


@pytest.fixture
def rack_inventory():
    return parse_inventory(RACK_LISTING)


@pytest.fixture
def full_inventory():
    # adds the all-workers group covering every rack
    return parse_inventory(default_inventory_text())


@pytest.fixture
def testbed():
    return SimTestbed()


@pytest.fixture
def small_testbed():
    # one rack keeps per-test sim time cheap
    return SimTestbed(ScenarioConfig(racks=1))


@pytest.fixture
def ready_small(small_testbed):
    from rackbench import experiment as exp

    exp.ready_testbed(small_testbed)
    return small_testbed
