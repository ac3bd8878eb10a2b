import pytest

from locality import BlockExecutor, TopologyConfig, get_numa_domains, load_mock_topology
from locality.execution import recorder

# device 0 is roomy, device 1 holds exactly 1 MB
DEVICES = {0: 64_000_000, 1: 1_000_000}


@pytest.fixture
def topo():
    """Mock dual-socket machine: 2 domains x 6 units, two mock devices."""
    return load_mock_topology(TopologyConfig.uniform(2, 6, DEVICES))


@pytest.fixture
def domains(topo):
    return get_numa_domains(topo)


@pytest.fixture
def block_exec(domains):
    ex = BlockExecutor(domains)
    yield ex
    ex.shutdown()


@pytest.fixture
def recording():
    with recorder as rec:
        yield rec


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
