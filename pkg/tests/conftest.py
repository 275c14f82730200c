import pytest

from services.job_archive import write_archive
from services.topology import Topology, parse_topology


@pytest.fixture
def line_topology_text():
    """Tre router in linea, a - b - c"""
    return (
        "# linea\n"
        "router a\n"
        "router b\n"
        "router c\n"
        "link a b delay=5\n"
        "link b c delay=10 loss=0.01\n"
    )


@pytest.fixture
def line_topology(line_topology_text) -> Topology:
    return parse_topology(line_topology_text)


@pytest.fixture
def diamond_topology() -> Topology:
    """a-b-d piu' corto di a-c-d; c-d pesante"""
    return parse_topology(
        "router a\nrouter b\nrouter c\nrouter d\n"
        "link a b weight=1\n"
        "link b d weight=1\n"
        "link a c weight=1\n"
        "link c d weight=5\n"
    )


@pytest.fixture
def echo_archive(tmp_path):
    """Archivio minimo: pinger verso un echo su un link da 1 ms"""
    topology = (
        "router p app=pinger\n"
        "router e app=echo\n"
        "link p e delay=1\n"
    )
    config = {
        "name": "echo smoke",
        "routing_mode": "OTF",
        "duration_s": 1.0,
        "seed": 7,
        "apps": {"p": {"app": "pinger", "params": {"dst": "e", "count": 5, "interval_s": 0.05}}}
    }
    return write_archive(tmp_path / "echo-job", topology, config)


@pytest.fixture
def make_archive(tmp_path):
    """Factory di archivi in directory temporanee"""
    counter = {"n": 0}

    def make(topology_text, config=None, routes_text=None, handlers=None):
        counter["n"] += 1
        return write_archive(tmp_path / f"job-{counter['n']}", topology_text, config, routes_text, handlers)
    return make


@pytest.fixture
def fast_settings():
    """Tempi dell'agente ridotti per i test in-process"""
    return {
        "heartbeat_interval_s": 0.05,
        "suspect_after_missed": 4,
        "election_timeout_s": 0.2,
        "election_backoff_s": (0.01, 0.05),
        "rpc_timeout_s": 0.5,
        "rpc_attempts": 1,
        "deploy_timeout_s": 5.0
    }
