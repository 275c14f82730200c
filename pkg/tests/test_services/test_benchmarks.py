import math

import pytest

from services.benchmarks import (
    BenchReport,
    bench_link,
    bench_mapping,
    bench_mapping_file,
    bench_topology,
    build_topology,
    linear_fit,
    pct_error,
    rerun
)
from services.placement import check_deployment, generate_instance, instance_to_csv


def test_pct_error():
    assert pct_error(110.0, 100.0) == pytest.approx(10.0)
    assert pct_error(90.0, 100.0) == pytest.approx(10.0)
    assert pct_error(5.0, 0.0) is None
    assert pct_error(5.0, None) is None


def test_linear_fit_exact_line():
    slope, intercept, r_squared = linear_fit([(1, 3), (2, 5), (3, 7)])
    assert slope == pytest.approx(2.0)
    assert intercept == pytest.approx(1.0)
    assert r_squared == pytest.approx(1.0)


def test_report_csv_and_json():
    report = BenchReport("link", {"backend": "virtual"}, seed=1)
    report.add({"kind": "delay", "delay_ms": 5, "packet_size": 64}, 10.2, 10.0, samples=3)
    report.add({"kind": "loss", "loss_pct": 0, "packet_size": 64}, 0.0, 0.0)
    lines = report.to_csv().splitlines()
    assert lines[0] == "kind,bandwidth_kbps,delay_ms,loss_pct,packet_size,observed,expected,pct_err,stdev,samples,flagged"
    assert lines[1] == "delay,,5,,64,10.2,10,2.000,0,3,0"
    assert lines[2].split(",")[6:8] == ["0", "N/A"]
    assert BenchReport.from_json(report.to_json()) == report


def test_link_delay_virtual():
    report = bench_link(backend="virtual", kinds=("delay",), delay_grid_ms=(10,), packet_sizes=(64,), ping_count=20)
    (cell,) = report.cells
    assert cell.samples == 20
    assert cell.observed == pytest.approx(20.0)
    assert cell.pct_err == pytest.approx(0.0, abs=1e-6)
    assert report.environment["timer_granularity_ms"] is None


def test_link_bandwidth_virtual():
    report = bench_link(
        backend="virtual", kinds=("bandwidth",), bandwidth_grid_kbps=(384,), packet_sizes=(1518,), duration_s=5.0
    )
    (cell,) = report.cells
    assert cell.expected == 384
    assert not cell.flagged
    assert report.summary["flagged"] == 0


def test_link_loss_virtual():
    report = bench_link(backend="virtual", kinds=("loss",), loss_grid_pct=(2.5,), loss_packets=5000, seed=3)
    (cell,) = report.cells
    assert cell.samples == 5000
    assert abs(cell.observed - 2.5) < 5 * cell.stdev


def test_link_refused_on_coarse_timer(mocker):
    mocker.patch("services.benchmarks.measure_timer_granularity", return_value=10.0)
    report = bench_link(backend="realtime")
    assert report.refused.startswith("timer granularity 10.00 ms")
    assert report.cells == []


def test_build_topology_errors():
    with pytest.raises(ValueError):
        build_topology("isp", 0, 4.0, 0)
    with pytest.raises(ValueError):
        build_topology("ring", 10, 4.0, 0)
    assert len(build_topology("scale_free", 30, 4.0, 1).routers) == 30


def test_topology_construction_virtual():
    report = bench_topology(generator="scale_free", sizes=(20, 40), degree=4.0, seed=2)
    assert [c.params["nodes"] for c in report.cells] == [20, 40]
    assert all(c.observed > 0 for c in report.cells)
    assert set(report.summary) == {"slope_s_per_node", "intercept_s", "r_squared"}
    assert all(c.expected is not None for c in report.cells)


def test_topology_construction_stc():
    report = bench_topology(generator="random", sizes=(30,), routing_mode="STC", seed=1)
    (cell,) = report.cells
    assert cell.params["routing_mode"] == "STC"
    assert report.summary == {}


def test_mapping_grid():
    report = bench_mapping(m_grid=(4,), n_grid=(10,), seed=5, headroom=3.0)
    naive, heuristic = report.cells
    assert naive.params["solver"] == "naive" and heuristic.params["solver"] == "heuristic"
    assert naive.params["feasible"] == heuristic.params["feasible"] == 1
    assert 1 <= heuristic.params["nodes_considered"] <= 4
    assert float(heuristic.params["objective"]) <= float(naive.params["objective"]) * (1 + 1e-6)


def test_mapping_infeasible_instance_flagged():
    report = bench_mapping(m_grid=(2,), n_grid=(6,), seed=1, headroom=0.5, solvers=("naive",))
    (cell,) = report.cells
    assert cell.flagged
    assert cell.params["feasible"] == 0
    assert math.isnan(float(cell.params["objective"]))


def test_mapping_file_and_rerun(tmp_path):
    instance = generate_instance(3, 8, seed=7, headroom=2.5)
    path = tmp_path / "instance.csv"
    path.write_text(instance_to_csv(instance))
    report, deployments = bench_mapping_file(str(path))
    assert set(deployments) == {"naive", "heuristic"}
    assert check_deployment(deployments["naive"], instance) == []

    again = rerun(report)
    assert again.config == report.config
    assert [c.params for c in again.cells] == [c.params for c in report.cells]
