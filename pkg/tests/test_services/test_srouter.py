import json

import pytest

from services.exceptions import ChainError, NoRouteError, PayloadTooLargeError, ProtocolError
from services.ihandlers import IHandler
from services.packet import MAX_PAYLOAD, ControlSubtype, Packet
from services.routing import build_otf
from services.srouter import (
    EVENT_LOG_HEADER,
    TIMEOUT,
    Disposition,
    EventLog,
    RouterCheckpoint,
    SRouter
)
from services.topology import parse_topology


@pytest.fixture
def router_for(line_topology):
    routes = build_otf(line_topology)

    def make(vid=b"b", **kwargs):
        return SRouter(vid, line_topology, routes.table(vid), clock=lambda: 0.0, **kwargs)
    return make


def _forward(router, from_vid, packet):
    assert router.ingress(from_vid, packet.encode()) is None
    return router.process_one(router.next_ingress(0.0))


def test_forward_decrements_ttl(router_for):
    router = router_for()
    result = _forward(router, b"a", Packet.data(b"a", b"c", b"hi", ttl=5))
    assert result.disposition is Disposition.FORWARDED
    assert result.next_hop == b"c"
    packet, decision = router.transmit_next(b"c", 0.0)
    assert packet.ttl == 4
    assert decision.deliver_at == pytest.approx(0.010)
    assert router.counters["forwarded"] == 1


def test_deliver_to_cqueue(router_for):
    router = router_for()
    result = _forward(router, b"a", Packet.data(b"a", b"b", b"payload"))
    assert result.disposition is Disposition.CONSUMED
    received = router.app_recv(timeout=0)
    assert received.payload == b"payload"
    assert received.ingress_link == b"a"
    assert router.app_recv(timeout=0) is TIMEOUT


def test_ttl_expiry_at_transit_router(router_for):
    router = router_for()
    result = _forward(router, b"a", Packet.data(b"a", b"c", b"", ttl=0))
    assert result.disposition is Disposition.DROPPED
    assert result.reason == "ttl-expired"
    assert router.counters["ttl_expired"] == 1
    # all'ultimo hop un ttl nullo non impedisce la consegna
    assert _forward(router, b"a", Packet.data(b"a", b"b", b"", ttl=0)).disposition is Disposition.CONSUMED


def test_malformed_ingress_counted(router_for):
    router = router_for()
    assert router.ingress(b"a", b"\x00\x01garbage") == "malformed"
    assert router.counters["malformed"] == 1
    assert router.links[b"a"].counters.drop_reasons == {"malformed": 1}


def test_ingress_from_non_neighbor_rejected(router_for):
    router = router_for(vid=b"a")
    with pytest.raises(ProtocolError):
        router.ingress(b"c", Packet.data(b"c", b"a", b"").encode())


def test_ingress_queue_full():
    topology = parse_topology("router a\nrouter b\nlink a b qlen=1\n")
    router = SRouter(b"b", topology, build_otf(topology).table(b"b"))
    assert router.ingress(b"a", Packet.data(b"a", b"b", b"1").encode()) is None
    assert router.ingress(b"a", Packet.data(b"a", b"b", b"2").encode()) == "queue-full"


def test_app_send_errors(router_for):
    router = router_for(vid=b"a")
    with pytest.raises(NoRouteError):
        router.app_send(b"zz", b"x")
    with pytest.raises(PayloadTooLargeError):
        router.app_send(b"c", bytes(MAX_PAYLOAD + 1))
    result = router.app_send(b"c", b"x")
    assert result.next_hop == b"b"
    assert router.counters["originated"] == 1
    assert router.counters["forwarded"] == 0


def test_chain_keeps_bypass_last(router_for):
    router = router_for()
    router.register_ihandler("counter")
    router.register_ihandler("log_packets", position=0)
    assert router.chain == ("log_packets", "counter", "bypass")
    with pytest.raises(ChainError):
        router.register_ihandler("bypass")
    with pytest.raises(ChainError):
        router.register_ihandler("drop_all", position=5)
    with pytest.raises(ChainError):
        router.remove_ihandler("bypass")
    router.remove_ihandler("log_packets")
    assert router.chain == ("counter", "bypass")


def test_handlers_from_topology():
    topology = parse_topology("router a\nrouter b handlers=counter,drop_all\nlink a b\n")
    router = SRouter(b"b", topology, build_otf(topology).table(b"b"))
    assert router.chain == ("counter", "drop_all", "bypass")
    result = _forward(router, b"a", Packet.data(b"a", b"b", b""))
    assert result.disposition is Disposition.DROPPED
    assert router.handler("counter").count == 1
    assert router.counters["handler_drops"] == 1


def test_failing_handler_drops_packet(router_for):
    class Broken(IHandler):
        name = "broken"

        def handle(self, router, packet):
            raise RuntimeError("boom")

    router = router_for()
    router.register_ihandler(Broken())
    result = _forward(router, b"a", Packet.data(b"a", b"b", b""))
    assert result.reason == "handler-error"
    assert router.counters["handler_errors"] == 1


def test_payload_grown_past_limit_is_dropped(router_for):
    router = router_for()
    router.register_ihandler("append_byte")
    result = _forward(router, b"a", Packet.data(b"a", b"c", bytes(MAX_PAYLOAD)))
    assert result.disposition is Disposition.DROPPED
    assert result.reason == "handler-error"
    assert router.counters["handler_errors"] == 1
    assert router.transmit_next(b"c", 0.0) is None


def test_unencodable_packet_is_dropped_at_transmit(router_for):
    router = router_for()
    router.app_send(b"c", b"x", ttl=300)
    assert router.transmit_next(b"c", 0.0) is None
    assert router.counters["unencodable"] == 1
    assert router.links[b"c"].counters.drop_reasons == {"unencodable": 1}


def test_pause_and_resume_control(router_for):
    router = router_for()
    kicked = []
    router.on_egress = kicked.append
    router.app_send(b"a", b"x")
    router.ingress(b"a", Packet.control(b"a", b"b", ControlSubtype.PAUSE).encode())
    assert router.links[b"a"].paused
    assert router.transmit_next(b"a", 0.0) is None
    router.ingress(b"a", Packet.control(b"a", b"b", ControlSubtype.RESUME).encode())
    assert not router.links[b"a"].paused
    assert kicked[-1] == b"a"
    assert router.transmit_next(b"a", 0.0) is not None


def test_vid_map_versions_are_monotonic(router_for):
    router = router_for()
    seen = []
    router.on_vid_map = seen.append
    body = json.dumps({"version": 2, "map": {b"c".hex(): ["10.0.0.2", 9000]}}).encode()
    router.ingress(b"a", Packet.control(b"a", b"b", ControlSubtype.VIDMAP, body).encode())
    assert router.vid_map[b"c"] == ("10.0.0.2", 9000)
    assert router.vid_map_version == 2
    assert not router.apply_vid_map(1, {b"c": ("old", 1)})
    assert router.vid_map[b"c"] == ("10.0.0.2", 9000)
    assert seen == [{b"c": ("10.0.0.2", 9000)}]


def test_introspect_is_a_copy(router_for):
    router = router_for()
    router.app_send(b"c", b"x")
    snapshot = router.app_introspect()
    router.app_send(b"c", b"y")
    assert snapshot.counters["originated"] == 1
    assert snapshot.routes == {b"a": b"a", b"c": b"c"}
    assert snapshot.chain == ("bypass",)


def test_snapshot_totals_sum_link_counters(router_for):
    router = router_for()
    _forward(router, b"a", Packet.data(b"a", b"c", b"", ttl=0))
    router.links[b"c"].counters.migration_loss = 2
    totals = router.app_introspect().totals()
    assert totals["ttl_expired"] == 1
    assert totals["link_dropped"] == 1
    assert totals["migration_loss"] == 2


def test_checkpoint_restores_state():
    topology = parse_topology(
        "router a\nrouter b handlers=counter\nrouter c\nlink a b loss=0.3\nlink b c\n"
    )
    routes = build_otf(topology)
    router = SRouter(b"b", topology, routes.table(b"b"), seed=11)
    for i in range(4):
        router.ingress(b"a", Packet.data(b"a", b"c", bytes([i])).encode())
    router.process_one(router.next_ingress(0.0))
    router.app_send(b"a", b"queued")
    router.transmit_next(b"a", 0.0)
    router.apply_vid_map(3, {b"c": ("h", 1)})

    cp = RouterCheckpoint.from_json(router.checkpoint().to_json())
    clone = SRouter.from_checkpoint(cp, topology, routes.table(b"b"), seed=11)
    assert len(clone.links[b"a"].ingress_queue) == 3
    assert [p.payload for p in clone.links[b"c"].egress_queue.snapshot()] == [b"\x00"]
    assert clone.handler("counter").count == 1
    assert clone.counters == router.counters
    assert clone.vid_map_version == 3
    assert clone.links[b"a"].counters.sent == router.links[b"a"].counters.sent
    # stesso stato del PRNG: le prossime decisioni di perdita coincidono
    probe = Packet.data(b"b", b"a", b"")
    assert [clone.links[b"a"].emulate(probe, 1.0).dropped for _ in range(20)] == \
        [router.links[b"a"].emulate(probe, 1.0).dropped for _ in range(20)]


def test_checkpoint_for_other_vid_rejected(router_for):
    checkpoint = router_for(vid=b"a").checkpoint()
    with pytest.raises(ProtocolError):
        router_for().load_checkpoint(checkpoint)


def test_checkpoint_carries_event_log(router_for):
    router = router_for()
    _forward(router, b"a", Packet.data(b"a", b"c", b"x"))
    rows = list(router.event_log.rows)
    cp = RouterCheckpoint.from_json(router.checkpoint().to_json())

    clone = router_for(event_log=EventLog(clock=lambda: 0.0))
    clone.load_checkpoint(cp)
    assert clone.event_log.rows == rows
    assert clone.event_log.to_csv() == router.event_log.to_csv()

    # log condiviso: nessuna riga duplicata
    shared = router_for(event_log=router.event_log)
    shared.load_checkpoint(cp)
    assert shared.event_log.rows == rows


def test_event_log_csv():
    log = EventLog(clock=lambda: 1.5)
    log.record("send", b"b", Packet.data(b"a", b"c", b""), "")
    lines = log.to_csv().splitlines()
    assert lines[0] == ",".join(EVENT_LOG_HEADER)
    assert lines[1].startswith("1500000,send,b,a,c,")


def test_event_log_records_drop_and_forward(router_for):
    router = router_for()
    _forward(router, b"a", Packet.data(b"a", b"c", b""))
    _forward(router, b"a", Packet.data(b"a", b"c", b"", ttl=0))
    events = [row[1] for row in router.event_log.rows]
    assert events == ["recv", "forward", "recv", "drop"]
