import io
import json

import pytest

from components.cli import build_parser, exit_code_for, main
from services.placement import generate_instance, instance_to_csv

VIRTUAL_CONFIG = {
    "name": "virtual echo",
    "backend": "virtual",
    "duration_s": 1.0,
    "apps": {"p": {"app": "pinger", "params": {"dst": "e", "count": 3, "interval_s": 0.05}}}
}
TOPOLOGY = "router p app=pinger\nrouter e app=echo\nlink p e delay=2\n"


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("LITELAB_PORT", "LITELAB_PEERS", "LITELAB_DATA_DIR"):
        monkeypatch.setenv(name, "")
        monkeypatch.delenv(name)


def _run(*argv):
    out = io.StringIO()
    code = main(list(argv), out=out)
    return code, out.getvalue()


def test_validate_ok(echo_archive):
    code, output = _run("validate", str(echo_archive))
    assert code == 0
    assert output.strip().endswith(": ok")


def test_validate_reports_diagnostics(make_archive):
    code, output = _run("validate", str(make_archive("router a\nlink a b\n", {"seed": "x"})))
    assert code == 2
    assert "topology.txt:" in output
    assert "job.json: seed" in output


def test_run_virtual_backend(make_archive, tmp_path):
    archive = make_archive(TOPOLOGY, VIRTUAL_CONFIG)
    code, output = _run("run", str(archive), f"--data-dir={tmp_path / 'data'}")
    assert code == 0
    assert "state: Done" in output
    assert "routers: 2" in output
    jobs = list((tmp_path / "data").iterdir())
    assert len(jobs) == 1
    manifest = json.loads((jobs[0] / "manifest.json").read_text())
    assert manifest["apps"][b"p".hex()]["replies"] == 3
    assert len(list((jobs[0] / "routers").glob("*.csv"))) == 2


def test_run_invalid_archive(tmp_path):
    code, output = _run("run", str(tmp_path / "missing"), f"--data-dir={tmp_path}")
    assert code == 2
    assert "not found" in output


@pytest.mark.parametrize("argv", [
    ["bogus"],
    [],
    ["agent", "--port=70000"],
    ["agent", "--peers=nohost"],
    ["bench", "mapping", "--m=x"],
])
def test_usage_errors(argv):
    assert _run(*argv)[0] == 2


def test_bad_environment(monkeypatch, echo_archive):
    monkeypatch.setenv("LITELAB_PEERS", "not-a-peer")
    code, output = _run("validate", str(echo_archive))
    assert code == 2
    assert output.startswith("error:")


def test_parser_defaults():
    args = build_parser().parse_args(["bench", "link", "--backend=virtual", "--delays=1,5", "--kinds=delay"])
    assert args.delays == [1.0, 5.0]
    assert args.kinds == ["delay"]
    assert args.seed == 0
    assert str(args.out) == "bench-results"


@pytest.mark.parametrize("history,expected", [
    ([["Submitted", 0], ["Mapping", 1], ["Failed", 2]], 3),
    ([["Submitted", 0], ["Mapping", 1], ["Deploying", 2], ["Failed", 3]], 4),
])
def test_exit_code_for_failed_jobs(history, expected):
    assert exit_code_for({"state": "Failed", "history": history}) == expected
    assert exit_code_for({"state": "Done", "history": history}) == 0


def test_bench_mapping_and_rerun(tmp_path):
    out = tmp_path / "results"
    code, output = _run("bench", "mapping", "--m=3", "--n=6", "--headroom=3", "--seed=2", f"--out={out}")
    assert code == 0
    assert output.startswith("benchmark: mapping")
    assert sorted(p.name for p in out.iterdir()) == ["bench-mapping.csv", "bench-mapping.json", "bench-mapping.txt"]

    code, _ = _run("bench", "rerun", str(out / "bench-mapping.json"), f"--out={tmp_path / 'again'}")
    assert code == 0
    assert (tmp_path / "again" / "bench-mapping.csv").exists()


def test_bench_mapping_instance_writes_deployments(tmp_path):
    instance = tmp_path / "instance.csv"
    instance.write_text(instance_to_csv(generate_instance(3, 5, seed=1, headroom=3.0)))
    out = tmp_path / "results"
    code, _ = _run("bench", "mapping", f"--instance={instance}", "--solvers=naive", f"--out={out}")
    assert code == 0
    lines = (out / "deployment-naive.csv").read_text().splitlines()
    assert lines[0] == "virtual,node,value"
    assert len(lines) == 6


def test_bench_mapping_missing_instance(tmp_path):
    code, output = _run("bench", "mapping", f"--instance={tmp_path / 'none.csv'}", f"--out={tmp_path}")
    assert code == 2
    assert output.startswith("error:")


def test_bench_link_virtual(tmp_path):
    code, output = _run(
        "bench", "link", "--backend=virtual", "--kinds=delay", "--delays=5", "--sizes=64", "--pings=10",
        f"--out={tmp_path}"
    )
    assert code == 0
    assert "flagged: 0" in output
