"""Suite di benchmark: accuratezza dei link, tempo di costruzione della rete,
efficienza del mapping.

Ogni BenchReport contiene la configurazione completa e il seed con cui e'
stato prodotto: `rerun(report)` lo riesegue. I CSV hanno un'intestazione
fissa per benchmark.
"""
import asyncio
import csv
import io
import logging
import math
import os
import platform
import socket
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import psutil
from dataclasses_json import dataclass_json

from config.settings import APP_CONFIG
from services.agent import LocalCluster
from services.applications import UserApp
from services.exceptions import InfeasibleMappingError, PortConflictError
from services.job_archive import load_archive, pack_directory, write_archive
from services.overlay import OverlayHost
from services.placement import (
    DeploymentMatrix,
    MappingInstance,
    NodeCapacity,
    PhysicalNode,
    check_deployment,
    generate_instance,
    load_instance_csv,
    solve_heuristic,
    solve_naive
)
from services.routing import build_otf, serialize_routes
from services.simulator import Simulator
from services.topology import (
    LinkSpec,
    RouterConfig,
    Topology,
    Vid,
    generate_random,
    generate_scale_free,
    largest_component,
    load_edge_list,
    mean_degree_probability,
    serialize_topology
)

logger = logging.getLogger(__name__)

BENCH_CONFIG = APP_CONFIG["bench"]

VALUE_COLUMNS = ["observed", "expected", "pct_err", "stdev", "samples", "flagged"]
PARAM_COLUMNS = {
    "link": ["kind", "bandwidth_kbps", "delay_ms", "loss_pct", "packet_size"],
    "topology": ["generator", "routing_mode", "nodes", "links"],
    "mapping": ["m", "n", "solver", "nodes_considered", "feasible", "objective"]
}

SENDER, RECEIVER = b"a", b"b"


def pct_error(observed: float, expected: Optional[float]) -> Optional[float]:
    """|observed - expected| / expected * 100; None quando expected e' 0"""
    if not expected:
        return None
    return abs(observed - expected) / abs(expected) * 100.0


@dataclass_json
@dataclass
class BenchCell:
    params: Dict[str, Any]
    observed: float
    expected: Optional[float] = None
    pct_err: Optional[float] = None
    stdev: float = 0.0
    samples: int = 0
    flagged: bool = False


@dataclass_json
@dataclass
class BenchReport:
    benchmark: str
    config: Dict[str, Any]
    seed: int
    environment: Dict[str, Any] = field(default_factory=dict)
    cells: List[BenchCell] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)
    refused: Optional[str] = None

    @property
    def columns(self) -> List[str]:
        return PARAM_COLUMNS[self.benchmark] + VALUE_COLUMNS

    def add(self, params: Dict[str, Any], observed: float, expected: Optional[float] = None,
            stdev: float = 0.0, samples: int = 0, flagged: bool = False) -> BenchCell:
        cell = BenchCell(params, observed, expected, pct_error(observed, expected), stdev, samples, flagged)
        self.cells.append(cell)
        return cell

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(self.columns)
        for cell in self.cells:
            values = {
                "observed": f"{cell.observed:.6g}",
                "expected": "N/A" if cell.expected is None else f"{cell.expected:.6g}",
                "pct_err": "N/A" if cell.pct_err is None else f"{cell.pct_err:.3f}",
                "stdev": f"{cell.stdev:.6g}",
                "samples": cell.samples,
                "flagged": int(cell.flagged)
            }
            writer.writerow([cell.params.get(c, values.get(c, "")) for c in self.columns])
        return buffer.getvalue()


def measure_timer_granularity(samples: int = 50, request_s: float = 0.001) -> float:
    """Ritardo medio oltre la richiesta di un timer asyncio da 1 ms, in ms"""
    async def probe() -> List[float]:
        loop = asyncio.get_running_loop()
        overshoot = []
        for _ in range(samples):
            start = loop.time()
            await asyncio.sleep(request_s)
            overshoot.append(loop.time() - start - request_s)
        return overshoot

    return statistics.mean(asyncio.run(probe())) * 1000.0


def environment_info(granularity_ms: Optional[float] = None) -> Dict[str, Any]:
    return {
        "host": platform.node(),
        "platform": platform.platform(),
        "python": platform.python_version(),
        "cpu_count": psutil.cpu_count(),
        "timer_granularity_ms": granularity_ms
    }


# esperimenti a due router

def _two_routers(link: LinkSpec, sender_app: str, receiver_app: str) -> Topology:
    return Topology(
        routers=(RouterConfig(SENDER, app=sender_app), RouterConfig(RECEIVER, app=receiver_app)),
        links=(link,)
    )


def _free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def run_virtual(
    topology: Topology, app_params: Dict[Vid, Dict[str, Any]], seed: int, until_s: float
) -> Dict[Vid, UserApp]:
    sim = Simulator(topology, build_otf(topology), seed=seed, app_params=app_params)
    sim.run(until=until_s)
    sim.stop_apps()
    return sim.apps


async def _run_overlay(
    topology: Topology,
    app_params: Dict[Vid, Dict[str, Any]],
    seed: int,
    done: Callable[[Dict[Vid, UserApp]], bool],
    timeout_s: float
) -> Dict[Vid, UserApp]:
    vid_map = {vid: ("127.0.0.1", _free_port()) for vid in topology.vids}
    host = OverlayHost("bench", topology, build_otf(topology), vid_map, seed=seed, app_params=app_params)
    conflicts = await host.deploy(list(topology.vids))
    if conflicts:
        await host.stop()
        raise PortConflictError(vid_map[conflicts[0]][1])
    await host.connect()
    await host.start()
    apps = {vid: host.app(vid) for vid in topology.vids if host.app(vid) is not None}
    loop = asyncio.get_running_loop()
    deadline = loop.time() + timeout_s
    while loop.time() < deadline and not done(apps):
        await asyncio.sleep(0.05)
    await host.stop()
    return apps


def run_realtime(
    topology: Topology,
    app_params: Dict[Vid, Dict[str, Any]],
    seed: int,
    done: Callable[[Dict[Vid, UserApp]], bool],
    timeout_s: float
) -> Dict[Vid, UserApp]:
    return asyncio.run(_run_overlay(topology, app_params, seed, done, timeout_s))


def _experiment(
    backend: str,
    topology: Topology,
    app_params: Dict[Vid, Dict[str, Any]],
    seed: int,
    horizon_s: float,
    done: Callable[[Dict[Vid, UserApp]], bool]
) -> Dict[Vid, UserApp]:
    if backend == "virtual":
        return run_virtual(topology, app_params, seed, horizon_s)
    return run_realtime(topology, app_params, seed, done, horizon_s)


def _bandwidth_cell(report: BenchReport, backend: str, kbps: float, size: int, duration_s: float, seed: int):
    topology = _two_routers(LinkSpec(SENDER, RECEIVER, bandwidth_kbps=kbps), "saturating_sender", "sink")
    params = {
        SENDER: {"dst": "b", "duration_s": duration_s, "wire_size": size},
        RECEIVER: {"bucket_s": 1.0}
    }
    apps = _experiment(backend, topology, params, seed, duration_s + 1.0, lambda a: False)
    sink = apps[RECEIVER]
    rates = sink.bucket_rates_kbps()
    observed = sink.goodput_kbps()
    cell = report.add(
        {"kind": "bandwidth", "bandwidth_kbps": kbps, "packet_size": size},
        observed, kbps,
        stdev=statistics.stdev(rates) if len(rates) > 1 else 0.0,
        samples=sink.received
    )
    cell.flagged = cell.pct_err is None or cell.pct_err > BENCH_CONFIG["bandwidth_tolerance_pct"]


def _delay_cell(report: BenchReport, backend: str, delay_ms: float, size: int, count: int, seed: int):
    topology = _two_routers(LinkSpec(SENDER, RECEIVER, delay_ms=delay_ms), "pinger", "echo")
    timeout_s = max(1.0, 4 * delay_ms / 1000.0)
    params = {SENDER: {"dst": "b", "count": count, "size": size, "timeout_s": timeout_s}, RECEIVER: {}}
    horizon = count * (2 * delay_ms / 1000.0 + 0.05) + 5.0
    apps = _experiment(backend, topology, params, seed, horizon, lambda a: a[SENDER].done)
    rtts_ms = [r * 1000.0 for r in apps[SENDER].rtts]
    observed = statistics.mean(rtts_ms) if rtts_ms else 0.0
    report.add(
        {"kind": "delay", "delay_ms": delay_ms, "packet_size": size},
        observed, 2 * delay_ms,
        stdev=statistics.stdev(rtts_ms) if len(rtts_ms) > 1 else 0.0,
        samples=len(rtts_ms)
    )


def _loss_cell(report: BenchReport, backend: str, loss_pct: float, packets: int, seed: int):
    rate = loss_pct / 100.0
    topology = _two_routers(LinkSpec(SENDER, RECEIVER, loss_rate=rate), "counted_stream", "sink")
    params = {SENDER: {"dst": "b", "count": packets, "size": 64}, RECEIVER: {}}
    horizon = packets * 0.001 + 10.0
    apps = _experiment(
        backend, topology, params, seed, horizon,
        lambda a: a[SENDER].sent >= packets and _settled(a)
    )
    sent = apps[SENDER].sent
    observed = (1.0 - apps[RECEIVER].received / sent) * 100.0 if sent else 0.0
    sigma = math.sqrt(rate * (1 - rate) / sent) * 100.0 if sent else 0.0
    report.add(
        {"kind": "loss", "loss_pct": loss_pct, "packet_size": 64},
        observed, loss_pct,
        stdev=sigma,
        samples=sent,
        flagged=abs(observed - loss_pct) > 3 * sigma
    )


def _settled(apps: Dict[Vid, UserApp]) -> bool:
    sink = apps[RECEIVER]
    return sink.last_at is not None and time.monotonic() - sink.last_at > 0.5


def bench_link(
    backend: str = "realtime",
    kinds: Sequence[str] = ("bandwidth", "delay", "loss"),
    bandwidth_grid_kbps: Sequence[float] = tuple(BENCH_CONFIG["bandwidth_grid_kbps"]),
    packet_sizes: Sequence[int] = tuple(BENCH_CONFIG["packet_sizes"]),
    delay_grid_ms: Sequence[float] = tuple(BENCH_CONFIG["delay_grid_ms"]),
    loss_grid_pct: Sequence[float] = tuple(BENCH_CONFIG["loss_grid_pct"]),
    duration_s: float = BENCH_CONFIG["link_duration_s"],
    ping_count: int = BENCH_CONFIG["ping_count"],
    loss_packets: int = BENCH_CONFIG["loss_packets"],
    seed: int = 0
) -> BenchReport:
    config = {
        "backend": backend, "kinds": list(kinds),
        "bandwidth_grid_kbps": list(bandwidth_grid_kbps), "packet_sizes": list(packet_sizes),
        "delay_grid_ms": list(delay_grid_ms), "loss_grid_pct": list(loss_grid_pct),
        "duration_s": duration_s, "ping_count": ping_count, "loss_packets": loss_packets
    }
    report = BenchReport("link", config, seed)
    granularity = measure_timer_granularity() if backend == "realtime" else None
    report.environment = environment_info(granularity)
    if granularity is not None and granularity > BENCH_CONFIG["max_timer_granularity_ms"]:
        report.refused = (
            f"timer granularity {granularity:.2f} ms exceeds "
            f"{BENCH_CONFIG['max_timer_granularity_ms']} ms; accuracy numbers would be misleading"
        )
        logger.error(report.refused)
        return report

    if "bandwidth" in kinds:
        for kbps in bandwidth_grid_kbps:
            for size in packet_sizes:
                logger.info("Banda %s kbps, pacchetti da %d B", kbps, size)
                _bandwidth_cell(report, backend, kbps, size, duration_s, seed)
    if "delay" in kinds:
        for delay_ms in delay_grid_ms:
            for size in packet_sizes:
                logger.info("Ritardo %s ms, pacchetti da %d B", delay_ms, size)
                _delay_cell(report, backend, delay_ms, size, ping_count, seed)
    if "loss" in kinds:
        for loss_pct in loss_grid_pct:
            logger.info("Perdita %s%%", loss_pct)
            _loss_cell(report, backend, loss_pct, loss_packets, seed)
    report.summary["flagged"] = sum(c.flagged for c in report.cells)
    return report


# costruzione della rete

def build_topology(generator: str, nodes: int, degree: float, seed: int, isp_text: Optional[str] = None) -> Topology:
    if generator == "random":
        return largest_component(generate_random(nodes, mean_degree_probability(nodes, degree), seed))
    if generator == "scale_free":
        return generate_scale_free(nodes, max(1, round(degree / 2)), seed)
    if generator == "isp":
        if isp_text is None:
            raise ValueError("generator 'isp' requires an edge-list file")
        return load_edge_list(isp_text)
    raise ValueError(f"unknown generator {generator}")


def _job_archive(topology: Topology, routing_mode: str, directory: str) -> bytes:
    config = {
        "name": "bench-topology",
        "routing_mode": routing_mode,
        "duration_s": 0,
        "migration": {"enabled": False},
        "requirements": {"default": {"cpu": 0.01, "mem": 0.1, "egress": 0.1, "ingress": 0.1}}
    }
    routes_text = serialize_routes(build_otf(topology)) if routing_mode == "STC" else None
    write_archive(directory, serialize_topology(topology), config, routes_text)
    return pack_directory(directory)


def _construct_virtual(archive: bytes) -> float:
    started = time.perf_counter()
    spec = load_archive(archive)
    capacity = NodeCapacity(cpu=1e6, mem=1e6, egress=1e6, ingress=1e6, slots=len(spec.vids))
    instance = MappingInstance((PhysicalNode(capacity),), tuple(spec.requirement(v) for v in spec.vids), spec.weights())
    solve_heuristic(instance)
    Simulator(spec.topology, spec.routes, seed=spec.config.seed, handler_params=spec.handler_params)
    return time.perf_counter() - started


async def _construct_realtime(archive: bytes, nodes: int, agents: int, data_dir: str) -> float:
    capacity = NodeCapacity(cpu=1e6, mem=1e6, egress=1e6, ingress=1e6, slots=max(1, nodes))
    cluster = LocalCluster(
        agents, base_port=_free_port(), data_dir=data_dir, capacity=capacity,
        settings={"heartbeat_interval_s": 0.2, "election_timeout_s": 0.5}
    )
    await cluster.start()
    try:
        job_id = await cluster.submit(archive)
        status = await cluster.wait_job(job_id, timeout=600.0)
    finally:
        await cluster.stop()
    times = {state: at for state, at in status["history"]}
    if "Running" not in times:
        raise InfeasibleMappingError(status.get("error") or "job never reached Running")
    return times["Running"] - times["Submitted"]


def bench_topology(
    generator: str = "random",
    sizes: Sequence[int] = tuple(range(100, 1001, 100)),
    degree: float = 4.0,
    routing_mode: str = "OTF",
    backend: str = "virtual",
    agents: int = 1,
    repeats: int = 1,
    seed: int = 0,
    isp_text: Optional[str] = None
) -> BenchReport:
    """Tempo dall'accettazione dell'archivio alla rete in esecuzione, per dimensione"""
    config = {
        "generator": generator, "sizes": list(sizes), "degree": degree, "routing_mode": routing_mode,
        "backend": backend, "agents": agents, "repeats": repeats, "isp_text": isp_text
    }
    report = BenchReport("topology", config, seed, environment=environment_info())
    grid = [None] if generator == "isp" else list(sizes)
    series = []
    for size in grid:
        topology = build_topology(generator, size or 0, degree, seed, isp_text)
        timings = []
        for _ in range(repeats):
            with tempfile.TemporaryDirectory() as directory:
                archive = _job_archive(topology, routing_mode, os.path.join(directory, "job"))
                if backend == "virtual":
                    timings.append(_construct_virtual(archive))
                else:
                    timings.append(asyncio.run(
                        _construct_realtime(archive, len(topology.routers), agents, os.path.join(directory, "data"))
                    ))
        observed = statistics.mean(timings)
        series.append((len(topology.routers), observed))
        report.add(
            {"generator": generator, "routing_mode": routing_mode,
             "nodes": len(topology.routers), "links": len(topology.links)},
            observed,
            stdev=statistics.stdev(timings) if len(timings) > 1 else 0.0,
            samples=len(timings)
        )
        logger.info("%s n=%d: %.3f s", generator, len(topology.routers), observed)

    if len(series) >= 2:
        slope, intercept, r_squared = linear_fit(series)
        report.summary.update({"slope_s_per_node": slope, "intercept_s": intercept, "r_squared": r_squared})
        for cell, (n, observed) in zip(report.cells, series):
            cell.expected = slope * n + intercept
            cell.pct_err = pct_error(observed, cell.expected)
    return report


def linear_fit(points: Sequence[tuple]) -> tuple:
    """Retta ai minimi quadrati e coefficiente R^2"""
    x = np.array([p[0] for p in points], dtype=float)
    y = np.array([p[1] for p in points], dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    residual = float(np.sum((y - (slope * x + intercept)) ** 2))
    total = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 - residual / total if total > 0 else 1.0
    return float(slope), float(intercept), r_squared


# mapping

def _mapping_cell(report: BenchReport, instance: MappingInstance, solver: str) -> Optional[DeploymentMatrix]:
    m, n = len(instance.nodes), len(instance.virtuals)
    started = time.perf_counter()
    considered = m
    deployment = None
    try:
        if solver == "naive":
            deployment = solve_naive(instance)
        else:
            deployment, considered = solve_heuristic(instance)
        feasible = not check_deployment(deployment, instance)
        objective = deployment.objective(instance.preferences())
    except InfeasibleMappingError as e:
        feasible, objective = False, float("nan")
        considered = e.nodes_considered or m
    elapsed = time.perf_counter() - started
    report.add(
        {"m": m, "n": n, "solver": solver, "nodes_considered": considered,
         "feasible": int(feasible), "objective": f"{objective:.6g}"},
        elapsed,
        samples=1,
        flagged=not feasible
    )
    logger.info("m=%d n=%d %s: %.3f s, %d nodi considerati", m, n, solver, elapsed, considered)
    return deployment


def bench_mapping(
    m_grid: Sequence[int] = (32, 64, 128, 256),
    n_grid: Sequence[int] = (200,),
    seed: int = 0,
    headroom: float = 2.0,
    solvers: Sequence[str] = ("naive", "heuristic")
) -> BenchReport:
    config = {"m_grid": list(m_grid), "n_grid": list(n_grid), "headroom": headroom, "solvers": list(solvers)}
    report = BenchReport("mapping", config, seed, environment=environment_info())
    for n in n_grid:
        for m in m_grid:
            instance = generate_instance(m, n, seed, headroom=headroom)
            for solver in solvers:
                _mapping_cell(report, instance, solver)
    return report


def bench_mapping_file(
    instance_path: str,
    solvers: Sequence[str] = ("naive", "heuristic"),
    seed: int = 0
) -> Tuple[BenchReport, Dict[str, DeploymentMatrix]]:
    """Come bench_mapping, su un'istanza letta da CSV; restituisce anche i deployment trovati"""
    with open(instance_path, encoding="utf-8") as f:
        instance = load_instance_csv(f.read())
    config = {"instance_path": instance_path, "solvers": list(solvers)}
    report = BenchReport("mapping", config, seed, environment=environment_info())
    deployments = {}
    for solver in solvers:
        deployment = _mapping_cell(report, instance, solver)
        if deployment is not None:
            deployments[solver] = deployment
    return report, deployments


def rerun(report: BenchReport) -> BenchReport:
    """Riesegue un benchmark con la configurazione e il seed registrati nel report"""
    config = dict(report.config)
    if report.benchmark == "link":
        return bench_link(seed=report.seed, **config)
    if report.benchmark == "topology":
        return bench_topology(seed=report.seed, **config)
    if report.benchmark == "mapping" and "instance_path" in config:
        return bench_mapping_file(seed=report.seed, **config)[0]
    if report.benchmark == "mapping":
        return bench_mapping(seed=report.seed, **config)
    raise ValueError(f"unknown benchmark {report.benchmark}")
