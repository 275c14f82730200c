import math

import pytest

from services.applications import resolve_app
from services.exceptions import MigrationError, RoutingError
from services.job_archive import load_archive, pack_directory
from services.log_persistence import LogStore
from services.packet import MAX_PAYLOAD
from services.routing import RouteSet, RoutingMode, RoutingTable, build_otf
from services.simulator import EventScheduler, Simulator, run_archive
from services.topology import generate_scale_free, parse_topology, serialize_topology


def _simulator(text, apps, seed=0):
    topology = parse_topology(text)
    return Simulator(topology, build_otf(topology), seed=seed, apps=apps)


LINE = "router a\nrouter b\nrouter c\nlink a b delay=5 {ab}\nlink b c delay=10 {bc}\n"


def test_scheduler_orders_by_time_then_insertion():
    scheduler = EventScheduler()
    seen = []
    scheduler.schedule_at(2.0, seen.append, "late")
    scheduler.schedule_at(1.0, seen.append, "first")
    scheduler.schedule_at(1.0, seen.append, "second")
    assert scheduler.run(until=1.5) == 2
    assert seen == ["first", "second"]
    assert scheduler.now == 1.5
    scheduler.run()
    assert seen[-1] == "late"


def test_ping_rtt_is_twice_the_path_delay():
    pinger = resolve_app("pinger", {"dst": "c", "count": 5})
    sim = _simulator(LINE.format(ab="", bc=""), {b"a": pinger, b"c": resolve_app("echo")})
    sim.run(until=2.0)
    assert len(pinger.rtts) == 5
    assert all(rtt == pytest.approx(0.030) for rtt in pinger.rtts)


def test_same_seed_gives_identical_trace():
    traces = []
    for _ in range(2):
        apps = {b"a": resolve_app("counted_stream", {"dst": "c", "count": 300}), b"c": resolve_app("sink")}
        sim = _simulator(LINE.format(ab="loss=0.2", bc="loss=0.1 bw=1544"), apps, seed=42)
        sim.run(until=5.0)
        traces.append(sim.trace())
    assert traces[0] == traces[1]
    assert "drop" in traces[0]


def test_conservation_without_loss():
    sink = resolve_app("sink")
    stream = resolve_app("counted_stream", {"dst": "c", "count": 2000})
    sim = _simulator(LINE.format(ab="bw=10000", bc=""), {b"a": stream, b"c": sink})
    sim.run(until=20.0)
    assert stream.sent == 2000
    assert sink.received == 2000
    assert sink.sequences == list(range(2000))
    assert sim.counters(b"a", b"b").sent == sim.counters(b"b", b"a").received == 2000


def test_loss_within_three_sigma():
    sink = resolve_app("sink")
    stream = resolve_app("counted_stream", {"dst": "b", "count": 10000})
    sim = _simulator("router a\nrouter b\nlink a b loss=0.1\n", {b"a": stream, b"b": sink}, seed=5)
    sim.run(until=60.0)
    sigma = math.sqrt(10000 * 0.1 * 0.9)
    assert abs((10000 - sink.received) - 1000) <= 3 * sigma


def test_bandwidth_matches_configuration():
    sink = resolve_app("sink")
    sender = resolve_app("saturating_sender", {"dst": "b", "duration_s": 5.0, "wire_size": 1518})
    sim = _simulator("router a\nrouter b\nlink a b bw=384\n", {b"a": sender, b"b": sink})
    sim.run(until=6.0)
    assert sink.goodput_kbps() == pytest.approx(384.0, rel=0.01)


def test_migration_conserves_packets():
    sink = resolve_app("sink")
    stream = resolve_app("counted_stream", {"dst": "c", "count": 3000})
    sim = _simulator(LINE.format(ab="bw=1000", bc="bw=1000"), {b"a": stream, b"c": sink})
    sim.run(until=0.2)
    record = sim.migrate(b"b", duration_s=0.05)
    sim.run(until=30.0)
    assert record.finished_at == pytest.approx(0.25)
    assert sim.vid_map_version == 1
    assert sim.routers[b"a"].vid_map_version == 1
    assert stream.sent == 3000
    assert sink.received + sim.migration_loss == 3000


def test_migration_errors(line_topology):
    sim = Simulator(line_topology, build_otf(line_topology))
    with pytest.raises(MigrationError):
        sim.migrate(b"zz")
    sim.migrate(b"b")
    with pytest.raises(MigrationError):
        sim.migrate(b"b")


def test_route_set_must_match_topology(line_topology, diamond_topology):
    with pytest.raises(RoutingError):
        Simulator(line_topology, build_otf(diamond_topology))


def _scale_free_archive(make_archive, duration_s=2.0):
    lines = serialize_topology(generate_scale_free(10, 2, seed=1)).splitlines()
    links = [i for i, line in enumerate(lines) if line.startswith("link")]
    for i in links[:2]:
        lines[i] += " qpolicy=red:5:50:0.1:0.002"
    config = {
        "name": "scale free smoke",
        "backend": "virtual",
        "seed": 3,
        "duration_s": duration_s,
        "handlers": ["counter"],
        "apps": {
            "0": {"app": "pinger", "params": {"dst": "9", "count": 20}},
            "9": {"app": "echo"}
        }
    }
    return make_archive("\n".join(lines) + "\n", config)


def test_counter_handler_sees_every_processed_packet(make_archive):
    spec = load_archive(pack_directory(_scale_free_archive(make_archive)))
    sim = Simulator(spec.topology, spec.routes, seed=spec.config.seed,
                    app_params=spec.app_params(), handler_params=spec.handler_params)
    sim.run(until=spec.config.duration_s)
    assert sim.apps[b"0"].report()["replies"] == 20
    processed = 0
    for router in sim.routers.values():
        count = router.handler("counter").count
        assert count == router.counters["forwarded"] + router.counters["delivered"]
        processed += count
    assert processed > 0


def test_run_archive_writes_logs_and_manifest(make_archive, tmp_path):
    spec = load_archive(pack_directory(_scale_free_archive(make_archive)))
    store = LogStore(tmp_path / "data")
    manifest = run_archive(spec, store, job_id="virtual-smoke")
    assert manifest.state == "Done"
    assert len(manifest.log_files) == 10
    assert len(store.list_logs("virtual-smoke")) == 10
    assert manifest.apps[b"0".hex()]["replies"] == 20
    assert store.read_manifest("virtual-smoke").config_hash == spec.config_hash


def test_oversized_payload_after_handler_is_dropped_not_raised():
    topology = parse_topology("router a\nrouter b handlers=append_byte\nrouter c\nlink a b\nlink b c\n")
    sim = Simulator(topology, build_otf(topology))
    sim.routers[b"a"].app_send(b"c", bytes(MAX_PAYLOAD))
    sim.routers[b"a"].app_send(b"c", bytes(MAX_PAYLOAD - 1))
    sim.run(until=2.0)
    assert sim.routers[b"b"].counters["handler_errors"] == 1
    assert sim.routers[b"c"].counters["delivered"] == 1
    assert len(sim.routers[b"c"].app_recv(timeout=0).payload) == MAX_PAYLOAD
    assert "handler-error" in sim.trace()


def test_stc_loop_expires_by_ttl(line_topology):
    tables = {
        b"a": {b"b": b"b", b"c": b"b"},
        b"b": {b"a": b"a", b"c": b"a"},
        b"c": {b"a": b"b", b"b": b"b"}
    }
    routes = RouteSet(
        tables={o: RoutingTable(owner=o, entries=e, mode=RoutingMode.STC) for o, e in tables.items()},
        topology_hash=line_topology.content_hash(),
        mode=RoutingMode.STC
    )
    sim = Simulator(line_topology, routes)
    sim.routers[b"a"].app_send(b"c", b"loop", ttl=5)
    sim.run(until=5.0)
    assert sim.routers[b"b"].counters["ttl_expired"] == 1
    assert sim.routers[b"a"].counters["forwarded"] == 2
    assert sim.routers[b"b"].counters["forwarded"] == 2
    assert sim.routers[b"c"].counters["delivered"] == 0
    assert "ttl-expired" in sim.trace()
