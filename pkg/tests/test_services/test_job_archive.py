import tarfile

import pytest

from services.exceptions import ArchiveError
from services.job_archive import (
    load_archive,
    pack_archive,
    pack_directory,
    read_archive,
    validate_archive,
    write_archive
)
from services.routing import RoutingMode

LINE = "router a\nrouter b\nrouter c\nlink a b\nlink b c\n"
LINE_ROUTES = (
    "table a\nroute b via b\nroute c via b\n"
    "table b\nroute a via a\nroute c via c\n"
    "table c\nroute a via b\nroute b via b\n"
)


def test_read_directory_archive(echo_archive):
    spec = read_archive(echo_archive)
    assert spec.vids == [b"p", b"e"]
    assert spec.config.name == "echo smoke"
    assert spec.config.seed == 7
    assert spec.routes.mode is RoutingMode.OTF
    assert spec.topology.router(b"p").app == "pinger"
    assert spec.app_params() == {b"p": {"dst": "e", "count": 5, "interval_s": 0.05}}


def test_config_hash_is_deterministic(echo_archive):
    assert pack_directory(echo_archive) == pack_directory(echo_archive)
    first = read_archive(echo_archive).config_hash
    assert first == read_archive(echo_archive).config_hash
    assert len(first) == 64


def test_tar_with_top_level_directory(echo_archive, tmp_path):
    path = tmp_path / "echo.tar"
    with tarfile.open(path, "w") as tar:
        tar.add(echo_archive, arcname="echo-job")
    spec = read_archive(path)
    assert spec.config.name == "echo smoke"
    assert spec.archive == pack_archive(path)


def test_empty_config_uses_defaults(make_archive):
    spec = read_archive(make_archive(LINE))
    assert spec.config.routing_mode == "OTF"
    assert spec.config.backend == "realtime"
    assert spec.requirement(b"a").cpu == 1.0
    assert spec.weights().as_tuple() == (0.4, 0.3, 0.2, 0.1)


def test_all_diagnostics_collected(make_archive):
    path = make_archive("router a\nlink a b\n", {"routing_mode": "XYZ", "bogus": 1})
    with pytest.raises(ArchiveError) as info:
        read_archive(path)
    diagnostics = info.value.diagnostics
    assert any(d.startswith("topology.txt:") for d in diagnostics)
    assert any(d.startswith("job.json: routing_mode") for d in diagnostics)
    assert any(d.startswith("job.json: bogus") for d in diagnostics)


def test_missing_topology(tmp_path):
    root = tmp_path / "empty"
    root.mkdir()
    (root / "job.json").write_text("{}")
    assert validate_archive(root) == ["topology.txt: missing"]


def test_missing_path_and_garbage(tmp_path):
    assert "not found" in validate_archive(tmp_path / "nope")[0]
    with pytest.raises(ArchiveError):
        load_archive(b"definitely not a tar")


def test_stc_requires_routes_file(make_archive):
    diagnostics = validate_archive(make_archive(LINE, {"routing_mode": "STC"}))
    assert diagnostics == ["routes.txt: required with routing_mode STC"]


def test_stc_routes_loaded(make_archive):
    spec = read_archive(make_archive(LINE, {"routing_mode": "STC"}, routes_text=LINE_ROUTES))
    assert spec.routes.mode is RoutingMode.STC
    assert spec.routes.table(b"a").lookup(b"c") == b"b"
    assert spec.routes_text == LINE_ROUTES


def test_stc_route_errors_reported(make_archive):
    bad = LINE_ROUTES.replace("route c via b\ntable b", "route c via c\ntable b")
    diagnostics = validate_archive(make_archive(LINE, {"routing_mode": "STC"}, routes_text=bad))
    assert len(diagnostics) == 1
    assert diagnostics[0].startswith("routing (STC):")
    assert "line 3" in diagnostics[0]


def test_unknown_names_reported(make_archive):
    config = {
        "apps": {"zz": {"app": "echo"}, "a": {"app": "no_such_app"}},
        "handlers": ["no_such_handler"],
        "requirements": {"qq": {"cpu": 2}}
    }
    diagnostics = validate_archive(make_archive(LINE, config))
    assert "job.json: apps: Unknown VID: zz" in diagnostics
    assert "job.json: requirements: Unknown VID: qq" in diagnostics
    assert "router a: unknown application no_such_app" in diagnostics
    assert "router b: Handler not found in registry: no_such_handler" in diagnostics


def test_config_handlers_only_for_routers_without_chain(make_archive):
    topology = "router a handlers=counter\nrouter b\nlink a b\n"
    spec = read_archive(make_archive(topology, {"handlers": ["drop_all"]}))
    assert spec.topology.router(b"a").handlers == ("counter",)
    assert spec.topology.router(b"b").handlers == ("drop_all",)


def test_handler_params(make_archive):
    spec = read_archive(make_archive(LINE, handlers={"drop_from": {"src": "a"}}))
    assert spec.handler_params == {"drop_from": {"src": "a"}}
    diagnostics = validate_archive(make_archive(LINE, handlers={"mystery": {}}))
    assert diagnostics == ["handlers/mystery.json: Handler not found in registry: mystery"]


def test_requirements_per_router(make_archive):
    config = {"requirements": {"default": {"cpu": 2}, "b": {"cpu": 3, "mem": 8}}}
    spec = read_archive(make_archive(LINE, config))
    assert spec.requirement(b"a").cpu == 2
    assert spec.requirement(b"b").cpu == 3
    assert spec.requirement(b"b").mem == 8


def test_write_archive_layout(tmp_path):
    root = write_archive(tmp_path / "w", LINE, {"name": "x"}, LINE_ROUTES, {"counter": {}})
    assert sorted(p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file()) == [
        "handlers/counter.json", "job.json", "routes.txt", "topology.txt"
    ]
