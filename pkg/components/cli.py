"""Superficie operatore: avvio degli agenti, esecuzione dei job, validazione
degli archivi e suite di benchmark.

I flag seguono la forma `--chiave=valore`. Codici di uscita: 0 ok,
2 uso o validazione, 3 mapping impossibile, 4 errore a runtime.
"""
import argparse
import asyncio
import logging
import signal
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, TextIO

from config.settings import APP_CONFIG, EXIT_CODES
from components.reports import ReportRenderer
from services.agent import ClusterClient, LocalCluster, NodeAgent
from services.benchmarks import bench_link, bench_mapping, bench_mapping_file, bench_topology, rerun
from services.control_protocol import AgentId, TcpTransport
from services.exceptions import ArchiveError, JobRejectedError, LiteLabError, PlacementError
from services.job_archive import load_archive, pack_archive, validate_archive
from services.log_persistence import LogStore
from services.placement import deployment_to_csv
from services.simulator import run_archive
from utils.debug_utils import setup_logging
from utils.env_manager import Environment, initialize_environment, parse_peers, parse_port

logger = logging.getLogger(__name__)

AGENT_CONFIG = APP_CONFIG["agent"]
BENCH_CONFIG = APP_CONFIG["bench"]


def _floats(text: str) -> List[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> List[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _words(text: str) -> List[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="litelab", description="Emulazione di reti overlay su un cluster di agenti")
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--log-file", default=None)
    parser.add_argument("--env-file", default=None)
    commands = parser.add_subparsers(dest="command", required=True)

    agent = commands.add_parser("agent", help="avvia un NodeAgent e serve fino all'interruzione")
    agent.add_argument("--host", default=AGENT_CONFIG["default_host"])
    agent.add_argument("--port", type=parse_port, default=None)
    agent.add_argument("--peers", type=parse_peers, default=None)
    agent.add_argument("--data-dir", type=Path, default=None)

    run = commands.add_parser("run", help="esegue un job e attende Done o Failed")
    run.add_argument("archive", type=Path)
    run.add_argument("--agents", type=int, default=1, help="agenti in-process se non ci sono peer")
    run.add_argument("--peers", type=parse_peers, default=None)
    run.add_argument("--data-dir", type=Path, default=None)
    run.add_argument("--timeout", type=float, default=None)

    validate = commands.add_parser("validate", help="stampa la diagnostica di un archivio")
    validate.add_argument("archive", type=Path)

    bench = commands.add_parser("bench", help="benchmark di accuratezza e scalabilita'")
    suites = bench.add_subparsers(dest="suite", required=True)

    link = suites.add_parser("link")
    link.add_argument("--backend", choices=("realtime", "virtual"), default="realtime")
    link.add_argument("--kinds", type=_words, default=["bandwidth", "delay", "loss"])
    link.add_argument("--bandwidth", type=_floats, default=BENCH_CONFIG["bandwidth_grid_kbps"])
    link.add_argument("--sizes", type=_ints, default=BENCH_CONFIG["packet_sizes"])
    link.add_argument("--delays", type=_floats, default=BENCH_CONFIG["delay_grid_ms"])
    link.add_argument("--loss", type=_floats, default=BENCH_CONFIG["loss_grid_pct"])
    link.add_argument("--duration", type=float, default=BENCH_CONFIG["link_duration_s"])
    link.add_argument("--pings", type=int, default=BENCH_CONFIG["ping_count"])
    link.add_argument("--packets", type=int, default=BENCH_CONFIG["loss_packets"])

    topology = suites.add_parser("topology")
    topology.add_argument("--generator", choices=("random", "scale_free", "isp"), default="random")
    topology.add_argument("--nodes", type=_ints, default=list(range(100, 1001, 100)))
    topology.add_argument("--degree", type=float, default=4.0)
    topology.add_argument("--routing", choices=("OTF", "SYM", "STC"), default="OTF")
    topology.add_argument("--backend", choices=("realtime", "virtual"), default="virtual")
    topology.add_argument("--agents", type=int, default=1)
    topology.add_argument("--repeats", type=int, default=1)
    topology.add_argument("--isp", type=Path, default=None, help="edge list di una mappa ISP")

    mapping = suites.add_parser("mapping")
    mapping.add_argument("--m", type=_ints, default=[32, 64, 128, 256])
    mapping.add_argument("--n", type=_ints, default=[200])
    mapping.add_argument("--headroom", type=float, default=2.0)
    mapping.add_argument("--solvers", type=_words, default=["naive", "heuristic"])
    mapping.add_argument("--instance", type=Path, default=None, help="istanza CSV al posto della griglia")

    again = suites.add_parser("rerun", help="riesegue un report JSON con la sua configurazione")
    again.add_argument("report", type=Path)

    for suite in (link, topology, mapping, again):
        suite.add_argument("--seed", type=int, default=0)
        suite.add_argument("--out", type=Path, default=Path("bench-results"))
    return parser


# agent

async def serve_agent(agent: NodeAgent, stop: asyncio.Event):
    await agent.start()
    try:
        await stop.wait()
    finally:
        await agent.stop()


def cmd_agent(args: argparse.Namespace, env: Environment, out: TextIO) -> int:
    agent_id = AgentId(args.host, args.port or env.port)
    peers = args.peers if args.peers is not None else env.peers
    agent = NodeAgent(agent_id, peers or [agent_id], TcpTransport(), data_dir=args.data_dir or env.data_dir)

    async def main():
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        await serve_agent(agent, stop)

    try:
        asyncio.run(main())
    except LiteLabError as e:
        print(f"agent {agent_id}: {e}", file=out)
        return EXIT_CODES["runtime"]
    return EXIT_CODES["ok"]


# run

def exit_code_for(status: Dict[str, Any]) -> int:
    if status["state"] == "Done":
        return EXIT_CODES["ok"]
    reached = {state for state, _ in status.get("history", [])}
    if "Deploying" not in reached:
        return EXIT_CODES["infeasible"]
    return EXIT_CODES["runtime"]


async def run_on_cluster(
    archive: bytes,
    agents: int,
    data_dir: Path,
    timeout: float,
    peers: Optional[List[AgentId]] = None,
    base_port: int = AGENT_CONFIG["default_port"]
) -> Dict[str, Any]:
    """Sottomette il job ai peer indicati o, in loro assenza, a un cluster in-process"""
    if peers:
        client = ClusterClient(peers)
        job_id = await client.submit(archive)
        logger.info("Job %s sottomesso al cluster", job_id)
        return await client.wait(job_id, timeout=timeout)

    cluster = LocalCluster(agents, base_port=base_port, data_dir=data_dir)
    await cluster.start()
    try:
        job_id = await cluster.submit(archive)
        logger.info("Job %s sottomesso al cluster locale di %d agenti", job_id, agents)
        return await cluster.wait_job(job_id, timeout=timeout)
    finally:
        await cluster.stop()


def cmd_run(args: argparse.Namespace, env: Environment, out: TextIO) -> int:
    renderer = ReportRenderer()
    data_dir = args.data_dir or env.data_dir
    store = LogStore(data_dir)
    try:
        archive = pack_archive(args.archive)
        spec = load_archive(archive)
    except ArchiveError as e:
        print("\n".join(e.diagnostics), file=out)
        return EXIT_CODES["usage"]

    if spec.config.backend == "virtual":
        try:
            manifest = run_archive(spec, store)
        except LiteLabError as e:
            print(f"error: {e}", file=out)
            return EXIT_CODES["runtime"]
        status = {"job_id": manifest.job_id, "state": manifest.state, "log_dir": str(store.job_dir(manifest.job_id))}
        print(renderer.job_summary(status, manifest), end="", file=out)
        return EXIT_CODES["ok"]

    timeout = args.timeout or spec.config.duration_s + AGENT_CONFIG["deploy_timeout_s"] + 60.0
    peers = args.peers if args.peers is not None else env.peers
    try:
        status = asyncio.run(run_on_cluster(archive, args.agents, data_dir, timeout, peers, env.port))
    except JobRejectedError as e:
        print("\n".join(e.diagnostics), file=out)
        return EXIT_CODES["usage"]
    except LiteLabError as e:
        print(f"error: {e}", file=out)
        return EXIT_CODES["runtime"]

    manifest = None
    if (store.job_dir(status["job_id"]) / "manifest.json").exists():
        manifest = store.read_manifest(status["job_id"])
    print(renderer.job_summary(status, manifest), end="", file=out)
    return exit_code_for(status)


def cmd_validate(args: argparse.Namespace, env: Environment, out: TextIO) -> int:
    diagnostics = validate_archive(args.archive)
    if diagnostics:
        print("\n".join(diagnostics), file=out)
        return EXIT_CODES["usage"]
    print(f"{args.archive}: ok", file=out)
    return EXIT_CODES["ok"]


# bench

def cmd_bench(args: argparse.Namespace, env: Environment, out: TextIO) -> int:
    renderer = ReportRenderer(args.out)
    try:
        if args.suite == "link":
            report = bench_link(
                backend=args.backend, kinds=args.kinds, bandwidth_grid_kbps=args.bandwidth,
                packet_sizes=args.sizes, delay_grid_ms=args.delays, loss_grid_pct=args.loss,
                duration_s=args.duration, ping_count=args.pings, loss_packets=args.packets, seed=args.seed
            )
        elif args.suite == "topology":
            isp_text = args.isp.read_text(encoding="utf-8") if args.isp is not None else None
            report = bench_topology(
                generator=args.generator, sizes=args.nodes, degree=args.degree, routing_mode=args.routing,
                backend=args.backend, agents=args.agents, repeats=args.repeats, seed=args.seed, isp_text=isp_text
            )
        elif args.suite == "mapping" and args.instance is not None:
            report, deployments = bench_mapping_file(str(args.instance), solvers=args.solvers, seed=args.seed)
            args.out.mkdir(parents=True, exist_ok=True)
            for solver, deployment in deployments.items():
                (args.out / f"deployment-{solver}.csv").write_text(deployment_to_csv(deployment), encoding="utf-8")
        elif args.suite == "mapping":
            report = bench_mapping(m_grid=args.m, n_grid=args.n, seed=args.seed, headroom=args.headroom,
                                   solvers=args.solvers)
        else:
            report = rerun(ReportRenderer.load_bench(args.report))
    except (OSError, ValueError, PlacementError) as e:
        print(f"error: {e}", file=out)
        return EXIT_CODES["usage"]
    except LiteLabError as e:
        print(f"error: {e}", file=out)
        return EXIT_CODES["runtime"]

    renderer.write_bench(report)
    print(renderer.bench_summary(report), end="", file=out)
    return EXIT_CODES["runtime"] if report.refused else EXIT_CODES["ok"]


COMMANDS: Dict[str, Callable[[argparse.Namespace, Environment, TextIO], int]] = {
    "agent": cmd_agent,
    "run": cmd_run,
    "validate": cmd_validate,
    "bench": cmd_bench
}


def main(argv: Optional[Sequence[str]] = None, out: TextIO = sys.stdout) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CODES["ok"] if e.code == 0 else EXIT_CODES["usage"]
    setup_logging(args.log_level.upper(), args.log_file)
    try:
        env = initialize_environment(args.env_file)
    except ValueError as e:
        print(f"error: {e}", file=out)
        return EXIT_CODES["usage"]
    return COMMANDS[args.command](args, env, out)
