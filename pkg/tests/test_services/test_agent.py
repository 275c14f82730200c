import asyncio
import time

import pytest
import pytest_asyncio

from services.agent import LocalCluster, LoadProbe, NodeAgent
from services.control_protocol import AgentId, LocalNetwork, Message, Opcode
from services.placement import LoadSample, NodeCapacity


async def _eventually(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        await asyncio.sleep(0.02)
    return predicate()


@pytest_asyncio.fixture
async def cluster(tmp_path, fast_settings):
    cluster = LocalCluster(5, base_port=7700, data_dir=tmp_path, settings=fast_settings)
    await cluster.start()
    yield cluster
    await cluster.stop()


def test_load_probe_injection():
    probe = LoadProbe(NodeCapacity(cpu=4, mem=1024, egress=1000, ingress=1000))
    probe.inject(LoadSample(0.5, 0.5, 0.5, 0.5))
    assert probe.sample() == LoadSample(0.5, 0.5, 0.5, 0.5)
    probe.clear()
    sample = probe.sample()
    assert 0.0 <= sample.avg_cpu_load <= 1.0
    assert 0.0 <= sample.memory_usage <= 1.0


def test_majority_counts_configured_cluster(tmp_path):
    ids = [AgentId("h", p) for p in range(1, 6)]
    agent = NodeAgent(ids[0], ids, LocalNetwork().transport(), data_dir=tmp_path)
    assert agent.peers == ids[1:]
    assert agent.majority == 3


@pytest.mark.asyncio
async def test_highest_agent_is_elected(cluster):
    leader = cluster.leader
    assert leader.agent_id == AgentId("127.0.0.1", 7704)
    assert all(a.leader == leader.agent_id for a in cluster.agents)


@pytest.mark.asyncio
async def test_heartbeats_reach_leader(cluster):
    leader = cluster.leader
    followers = {a.agent_id for a in cluster.agents} - {leader.agent_id}
    assert await _eventually(lambda: followers <= set(leader.control.samples))
    assert leader.control.suspected() == []


@pytest.mark.asyncio
async def test_leader_failures_elect_next_highest(cluster):
    for expected in (7703, 7702):
        await cluster.kill(cluster.leader)
        assert await _eventually(
            lambda: cluster.leader is not None and cluster.leader.agent_id.port == expected
        )
    # con due agenti su cinque non c'e' maggioranza
    await cluster.kill(cluster.leader)
    assert await _eventually(lambda: all(a.leader is None for a in cluster.running))
    await asyncio.sleep(0.5)
    assert all(a.leader is None for a in cluster.running)


@pytest.mark.asyncio
async def test_minority_partition_has_no_leader(cluster):
    ids = [a.agent_id for a in cluster.agents]
    cluster.network.partition(ids[:2], ids[2:])
    minority = cluster.agents[:2]
    assert await _eventually(lambda: all(a.leader is None for a in minority))
    assert all(a.leader == ids[4] for a in cluster.agents[2:])

    cluster.network.heal()
    assert await _eventually(lambda: all(a.leader == ids[4] for a in cluster.agents))


@pytest.mark.asyncio
async def test_unsupported_opcode_is_nacked(cluster):
    reply = await cluster.agents[0].handle(Message(Opcode.ANSWER, {}))
    assert not reply.success
    reply = await cluster.agents[0].handle(Message(Opcode.SUBMIT, {"archive": ""}))
    assert reply.error == "not leader"


@pytest.mark.asyncio
async def test_status_reports_leader_and_clock(cluster):
    reply = await cluster.agents[0].handle(Message(Opcode.STATUS, {}))
    assert reply.payload["leader"] == "127.0.0.1:7704"
    assert reply.payload["hosted"] == []
    assert isinstance(reply.payload["clock"], float)


@pytest.mark.asyncio
async def test_finished_elections_are_forgotten(cluster):
    follower = cluster.agents[2]
    challenge = Message(Opcode.ELECTION, {"from": str(cluster.agents[0].agent_id), "epoch": 0})
    for _ in range(5):
        reply = await follower.handle(challenge)
        assert reply.opcode is Opcode.ANSWER
        assert await _eventually(lambda: not follower._electing)
    assert await _eventually(lambda: all(len(a._tasks) == 1 for a in cluster.running))
    assert cluster.leader.agent_id == AgentId("127.0.0.1", 7704)
