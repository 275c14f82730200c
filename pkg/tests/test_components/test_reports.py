import pytest

from components.reports import ReportRenderer
from services.benchmarks import BenchReport
from services.log_persistence import RunManifest


@pytest.fixture
def report():
    report = BenchReport("link", {"backend": "virtual"}, seed=4, environment={"cpu_count": 8})
    report.add({"kind": "delay", "delay_ms": 5, "packet_size": 64}, 10.0, 10.0)
    report.add({"kind": "bandwidth", "bandwidth_kbps": 56, "packet_size": 64}, 50.0, 56.0, flagged=True)
    report.summary["flagged"] = 1
    return report


def test_bench_summary(report):
    text = ReportRenderer().bench_summary(report)
    lines = text.splitlines()
    assert lines[:5] == ["benchmark: link", "seed: 4", "env.cpu_count: 8", "cells: 2", "flagged: 1"]
    assert "max pct_err: 10.714" in lines
    assert "  flagged kind=bandwidth bandwidth_kbps=56 packet_size=64 observed=50" in lines


def test_refused_summary():
    report = BenchReport("link", {}, seed=0, refused="timer too coarse")
    text = ReportRenderer().bench_summary(report)
    assert text.endswith("REFUSED: timer too coarse\n")
    assert "cells" not in text


def test_write_and_load_bench(report, tmp_path):
    renderer = ReportRenderer(tmp_path / "out")
    paths = renderer.write_bench(report)
    assert [p.name for p in paths] == ["bench-link.csv", "bench-link.json", "bench-link.txt"]
    assert ReportRenderer.load_bench(paths[1]) == report
    assert paths[0].read_text().startswith("kind,bandwidth_kbps")


def test_write_bench_needs_output_dir(report):
    with pytest.raises(ValueError):
        ReportRenderer().write_bench(report)


def test_job_summary():
    status = {
        "job_id": "demo-1",
        "state": "Done",
        "history": [["Submitted", 100.0], ["Mapping", 100.25], ["Done", 101.5]],
        "log_dir": "data/demo-1"
    }
    manifest = RunManifest(
        job_id="demo-1", name="demo", state="Done", config_hash="0", routing_mode="OTF", seed=0,
        agents=["h:1", "h:2"], vid_owner={"61": "h:1", "62": "h:2"},
        missing_agents=["h:2"], apps={"61": {"replies": 3}}, log_files=["a-61.csv"]
    )
    lines = ReportRenderer().job_summary(status, manifest).splitlines()
    assert lines == [
        "job: demo-1",
        "state: Done",
        "history: Submitted(+0.00s) -> Mapping(+0.25s) -> Done(+1.50s)",
        "logs: data/demo-1",
        "routers: 2",
        "agents: h:1, h:2",
        "log files: 1",
        "missing agents: h:2",
        '  app 61: {"replies": 3}'
    ]


def test_job_summary_with_error():
    text = ReportRenderer().job_summary({"job_id": "x", "state": "Failed", "error": "no capacity"})
    assert text == "job: x\nstate: Failed\nerror: no capacity\n"
