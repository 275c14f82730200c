"""Ciclo di vita dei job sul leader: submit, mapping, deploy, monitoraggio,
migrazione e raccolta dei log.

Il leader e' l'unico a prendere decisioni a livello di job; gli agenti
eseguono gli ASSIGN/RESUME/VIDMAP/MIGRATE/COLLECT che ricevono.
"""
import asyncio
import base64
import enum
import itertools
import logging
import time
import uuid
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Tuple

from slugify import slugify

from config.settings import APP_CONFIG, ERROR_MESSAGES
from services.control_protocol import AgentId, AssignPayload, CollectPayload, Message, Opcode, SamplePayload
from services.exceptions import (
    AgentUnreachableError,
    ArchiveError,
    InfeasibleMappingError,
    InvalidTransitionError,
    JobError,
    JobRejectedError,
    LiteLabError,
    MigrationError,
    NoReliefError,
    PlacementError,
    PortConflictError
)
from services.job_archive import JobSpec, load_archive
from services.log_persistence import LogStore, RunManifest
from services.placement import (
    DeploymentMatrix,
    LoadSample,
    MappingInstance,
    Move,
    NodeCapacity,
    PhysicalNode,
    apply_moves,
    node_load,
    plan_migration,
    solve_heuristic
)
from services.srouter import Address
from services.topology import Vid, vid_text

if TYPE_CHECKING:
    from services.agent import NodeAgent

logger = logging.getLogger(__name__)

AGENT_CONFIG = APP_CONFIG["agent"]


class JobState(str, enum.Enum):
    SUBMITTED = "Submitted"
    MAPPING = "Mapping"
    DEPLOYING = "Deploying"
    RUNNING = "Running"
    COLLECTING = "Collecting"
    DONE = "Done"
    FAILED = "Failed"


_ORDER = [
    JobState.SUBMITTED, JobState.MAPPING, JobState.DEPLOYING,
    JobState.RUNNING, JobState.COLLECTING, JobState.DONE
]
TERMINAL = (JobState.DONE, JobState.FAILED)


@dataclass
class TaskAssignment:
    agent: AgentId
    vids: List[Vid]
    vid_map: Dict[Vid, Address]


@dataclass
class JobDescriptor:
    job_id: str
    spec: JobSpec
    state: JobState = JobState.SUBMITTED
    history: List[Tuple[str, float]] = field(default_factory=list)
    deployment: Optional[DeploymentMatrix] = None
    nodes_considered: Optional[int] = None
    agents: List[AgentId] = field(default_factory=list)
    vid_owner: Dict[Vid, AgentId] = field(default_factory=dict)
    vid_map: Dict[Vid, Address] = field(default_factory=dict)
    vid_map_version: int = 0
    clock_offsets: Dict[str, float] = field(default_factory=dict)
    missing_agents: List[str] = field(default_factory=list)
    migrations: List[Dict[str, Any]] = field(default_factory=list)
    apps: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    counters: Dict[str, Dict[str, int]] = field(default_factory=dict)
    error: Optional[str] = None
    log_dir: Optional[str] = None
    started_wall: Optional[float] = None

    def __post_init__(self):
        if not self.history:
            self.history.append((self.state.value, time.time()))

    def advance(self, state: JobState):
        if self.state in TERMINAL:
            raise InvalidTransitionError(f"{ERROR_MESSAGES['invalid_transition']}: {self.state.value} is terminal")
        if state is not JobState.FAILED and _ORDER.index(state) != _ORDER.index(self.state) + 1:
            raise InvalidTransitionError(
                f"{ERROR_MESSAGES['invalid_transition']}: {self.state.value} -> {state.value}"
            )
        logger.info("Job %s: %s -> %s", self.job_id, self.state.value, state.value)
        self.state = state
        self.history.append((state.value, time.time()))

    def fail(self, error: str):
        self.error = error
        self.advance(JobState.FAILED)

    def assignments(self) -> List[TaskAssignment]:
        tasks: Dict[AgentId, TaskAssignment] = {}
        for vid in self.spec.vids:
            owner = self.vid_owner[vid]
            task = tasks.setdefault(owner, TaskAssignment(owner, [], {}))
            task.vids.append(vid)
            task.vid_map[vid] = self.vid_map[vid]
        return [tasks[a] for a in sorted(tasks)]

    def summary(self) -> Dict[str, Any]:
        return {
            "job_id": self.job_id,
            "state": self.state.value,
            "error": self.error,
            "history": [list(h) for h in self.history],
            "agents": [str(a) for a in self.agents],
            "nodes_considered": self.nodes_considered,
            "vid_owner": {vid_text(v): str(a) for v, a in sorted(self.vid_owner.items())},
            "migrations": list(self.migrations),
            "missing_agents": list(self.missing_agents),
            "log_dir": self.log_dir
        }


class JobControl:
    """Stato dei job e dei campioni di carico, tenuto dal leader"""

    def __init__(self, agent: "NodeAgent", store: LogStore):
        self.agent = agent
        self.store = store
        self.jobs: Dict[str, JobDescriptor] = {}
        self.samples: Dict[AgentId, SamplePayload] = {}
        self.last_seen: Dict[AgentId, float] = {}
        self._overloaded_since: Dict[AgentId, float] = {}
        self._tasks: Dict[str, asyncio.Task] = {}
        self._busy: Dict[str, asyncio.Lock] = {}
        self._seq = itertools.count(1)
        self._next_port = AGENT_CONFIG["router_port_base"]

    @property
    def settings(self) -> Dict[str, Any]:
        return self.agent.settings

    # campioni e stato del cluster

    def on_sample(self, agent: AgentId, sample: SamplePayload):
        self.samples[agent] = sample
        self.last_seen[agent] = time.monotonic()

    def seen(self, agents: List[AgentId]):
        now = time.monotonic()
        for agent in agents:
            self.last_seen[agent] = now

    def live_agents(self) -> List[AgentId]:
        window = self.settings["heartbeat_interval_s"] * self.settings["suspect_after_missed"]
        now = time.monotonic()
        live = {self.agent.agent_id}
        live.update(a for a, seen in self.last_seen.items() if now - seen <= window)
        return sorted(live)

    def suspected(self) -> List[AgentId]:
        live = set(self.live_agents())
        return sorted(a for a in self.last_seen if a not in live)

    def _node(self, agent: AgentId) -> PhysicalNode:
        sample = self.samples.get(agent)
        if sample is None:
            if agent == self.agent.agent_id:
                return PhysicalNode(self.agent.capacity, self.agent.probe.sample())
            return PhysicalNode(NodeCapacity(**AGENT_CONFIG["capacity"]))
        return PhysicalNode(NodeCapacity(**sample.capacity), LoadSample(**sample.load))

    def instance(self, job: JobDescriptor) -> MappingInstance:
        return MappingInstance(
            nodes=tuple(self._node(a) for a in job.agents),
            virtuals=tuple(job.spec.requirement(v) for v in job.spec.vids),
            weights=job.spec.weights()
        )

    # submit e mapping

    def new_job_id(self, spec: JobSpec) -> str:
        return f"{slugify(spec.config.name) or 'job'}-{next(self._seq)}-{uuid.uuid4().hex[:6]}"

    async def submit(self, archive: bytes) -> str:
        try:
            spec = load_archive(archive)
        except ArchiveError as e:
            raise JobRejectedError(e.diagnostics) from e
        if spec.config.backend != "realtime":
            raise JobRejectedError(["backend 'virtual' runs locally, not on agents"])

        job = JobDescriptor(self.new_job_id(spec), spec)
        self.jobs[job.job_id] = job
        self._busy[job.job_id] = asyncio.Lock()
        job.advance(JobState.MAPPING)
        try:
            self.map(job)
        except InfeasibleMappingError as e:
            job.nodes_considered = e.nodes_considered
            job.fail(e.report)
            self.write_manifest(job)
            return job.job_id
        except PlacementError as e:
            logger.error("Job %s: mapping fallito: %s", job.job_id, e)
            job.fail(str(e))
            self.write_manifest(job)
            return job.job_id
        self._tasks[job.job_id] = asyncio.create_task(self._lifecycle(job))
        return job.job_id

    def map(self, job: JobDescriptor) -> DeploymentMatrix:
        job.agents = self.live_agents()
        deployment, considered = solve_heuristic(self.instance(job))
        job.deployment = deployment
        job.nodes_considered = considered
        job.vid_owner = {vid: job.agents[deployment.node_of(j)] for j, vid in enumerate(job.spec.vids)}
        logger.info(
            "Job %s mappato su %d agenti (%d considerati)",
            job.job_id, len(set(job.vid_owner.values())), considered
        )
        return deployment

    # deploy

    def _allocate_port(self) -> int:
        base, span = AGENT_CONFIG["router_port_base"], AGENT_CONFIG["router_port_span"]
        port = self._next_port
        self._next_port = base + (self._next_port - base + 1) % span
        return port

    def _assign_message(self, job: JobDescriptor, vids: List[Vid], checkpoint: Optional[str] = None) -> Message:
        payload = AssignPayload(
            job_id=job.job_id,
            archive=base64.b64encode(job.spec.archive).decode("ascii"),
            vids=[v.hex() for v in vids],
            vid_map={v.hex(): [host, port] for v, (host, port) in job.vid_map.items()},
            version=job.vid_map_version,
            checkpoint=checkpoint
        )
        return Message(Opcode.ASSIGN, payload.to_dict())

    async def _call(self, agent: AgentId, message: Message, timeout: Optional[float] = None) -> Message:
        return await self.agent.call(agent, message, timeout=timeout or self.settings["deploy_timeout_s"])

    async def _assign(self, job: JobDescriptor, task: TaskAssignment) -> List[Vid]:
        reply = await self._call(task.agent, self._assign_message(job, task.vids))
        if reply.success:
            return []
        conflicts = [bytes.fromhex(v) for v in reply.payload.get("conflicts", [])]
        if not conflicts:
            raise JobError(f"agent {task.agent} rejected assignment: {reply.error}")
        return conflicts

    async def _broadcast(self, job: JobDescriptor, message: Message, agents: Optional[List[AgentId]] = None):
        targets = agents if agents is not None else sorted(set(job.vid_owner.values()))
        replies = await asyncio.gather(*(self._call(a, message) for a in targets), return_exceptions=True)
        for agent, reply in zip(targets, replies):
            if isinstance(reply, AgentUnreachableError):
                raise AgentUnreachableError(str(agent), f"during {message.opcode.name} for job {job.job_id}")
            if isinstance(reply, BaseException):
                raise reply
            if not reply.success:
                raise JobError(f"agent {agent} failed {message.opcode.name}: {reply.error}")

    async def deploy(self, job: JobDescriptor) -> List[TaskAssignment]:
        job.advance(JobState.DEPLOYING)
        for vid in job.spec.vids:
            job.vid_map[vid] = (job.vid_owner[vid].host, self._allocate_port())
        tasks = job.assignments()

        pending = tasks
        for attempt in range(self.settings["deploy_port_retries"] + 1):
            results = await asyncio.gather(*(self._assign(job, t) for t in pending), return_exceptions=True)
            retry: List[TaskAssignment] = []
            for task, result in zip(pending, results):
                if isinstance(result, AgentUnreachableError):
                    raise AgentUnreachableError(str(task.agent), f"crashed while deploying job {job.job_id}")
                if isinstance(result, BaseException):
                    raise result
                if result:
                    for vid in result:
                        job.vid_map[vid] = (task.agent.host, self._allocate_port())
                    logger.warning("Job %s: porte occupate su %s, riassegno %d router", job.job_id, task.agent, len(result))
                    retry.append(TaskAssignment(task.agent, result, {v: job.vid_map[v] for v in result}))
            pending = retry
            if not pending:
                break
        if pending:
            raise PortConflictError(pending[0].vid_map[pending[0].vids[0]][1], {"job_id": job.job_id})

        job.vid_map_version = 1
        await self._broadcast(job, self._vid_map_message(job, job.vid_map))
        await self.measure_offsets(job)
        await self._broadcast(job, Message(Opcode.RESUME, {"job_id": job.job_id, "phase": "connect"}))
        await self._broadcast(job, Message(Opcode.RESUME, {"job_id": job.job_id, "phase": "start"}))
        job.started_wall = time.time()
        job.advance(JobState.RUNNING)
        return job.assignments()

    def _vid_map_message(self, job: JobDescriptor, mapping: Dict[Vid, Address]) -> Message:
        return Message(Opcode.VIDMAP, {
            "job_id": job.job_id,
            "version": job.vid_map_version,
            "map": {v.hex(): [host, port] for v, (host, port) in sorted(mapping.items())}
        })

    async def measure_offsets(self, job: JobDescriptor):
        """Offset del clock monotono di ogni agente rispetto a quello del leader"""
        for agent in sorted(set(job.vid_owner.values())):
            before = time.monotonic()
            reply = await self._call(agent, Message(Opcode.STATUS, {}))
            after = time.monotonic()
            if "clock" in reply.payload:
                job.clock_offsets[str(agent)] = float(reply.payload["clock"]) - (before + after) / 2

    # esecuzione e monitoraggio

    async def _lifecycle(self, job: JobDescriptor):
        try:
            await self.deploy(job)
            await self._run(job)
            job.advance(JobState.COLLECTING)
            await self.collect(job)
            job.advance(JobState.DONE)
        except asyncio.CancelledError:
            raise
        except LiteLabError as e:
            logger.error("Job %s fallito: %s", job.job_id, e)
            await self._abort(job, str(e))
        except Exception as e:
            logger.exception("Job %s: errore inatteso", job.job_id)
            await self._abort(job, f"{type(e).__name__}: {e}")
        self.write_manifest(job)

    async def _abort(self, job: JobDescriptor, error: str):
        if job.state not in TERMINAL:
            job.fail(error)
        try:
            await self.collect(job)
        except Exception:
            logger.exception("Job %s: raccolta dei log fallita", job.job_id)

    async def _run(self, job: JobDescriptor):
        elapsed = time.time() - (job.started_wall or time.time())
        await asyncio.sleep(max(0.0, job.spec.config.duration_s - elapsed))

    async def tick(self):
        """Passo periodico del leader: sospetti e sovraccarichi sostenuti"""
        now = time.monotonic()
        for agent in self.suspected():
            logger.warning("Agente %s sospetto: nessun campione da %.1f s", agent, now - self.last_seen[agent])
        for job in list(self.jobs.values()):
            if job.state is not JobState.RUNNING or not job.spec.config.migration.enabled:
                continue
            lock = self._busy[job.job_id]
            if lock.locked():
                continue
            async with lock:
                await self._check_overload(job, now)

    async def _check_overload(self, job: JobDescriptor, now: float):
        threshold = job.spec.config.migration.threshold
        weights = job.spec.weights()
        for row, agent in enumerate(job.agents):
            load = node_load(self._node(agent).load, weights)
            if load <= threshold:
                self._overloaded_since.pop(agent, None)
                continue
            since = self._overloaded_since.setdefault(agent, now)
            if now - since < job.spec.config.migration.sustain_s:
                continue
            self._overloaded_since.pop(agent, None)
            try:
                moves = plan_migration(job.deployment, self.instance(job), row, threshold)
            except NoReliefError as e:
                logger.warning("Job %s: %s", job.job_id, e)
                continue
            try:
                await self.execute_migration(job, moves)
            except LiteLabError as e:
                logger.error("Job %s: migrazione annullata: %s", job.job_id, e)

    async def execute_migration(self, job: JobDescriptor, moves: List[Move]):
        for move in moves:
            await self._migrate_one(job, move)

    async def _migrate_one(self, job: JobDescriptor, move: Move):
        vid = job.spec.vids[move.virtual]
        source, target = job.agents[move.source], job.agents[move.target]
        request = {"job_id": job.job_id, "vid": vid.hex()}
        started = time.time()

        await self._call(source, Message(Opcode.PAUSE, request))
        reply = await self._call(source, Message(Opcode.MIGRATE, request))
        if not reply.success:
            raise MigrationError(f"export of {vid_text(vid)} from {source} failed: {reply.error}")
        checkpoint = reply.payload["checkpoint"]

        old_address = job.vid_map[vid]
        job.vid_map[vid] = (target.host, self._allocate_port())
        try:
            reply = await self._call(target, self._assign_message(job, [vid], checkpoint))
            if not reply.success:
                raise MigrationError(reply.error)
        except (AgentUnreachableError, MigrationError) as e:
            job.vid_map[vid] = old_address
            await self._call(source, self._assign_message(job, [vid], checkpoint))
            job.vid_map_version += 1
            await self._broadcast(job, self._vid_map_message(job, {vid: old_address}))
            await self._call(source, Message(Opcode.RESUME, request))
            raise MigrationError(f"move of {vid_text(vid)} to {target} failed, rolled back to {source}: {e}") from e

        # la proprieta' del VID passa al target con la diffusione della nuova mappa
        job.vid_map_version += 1
        job.vid_owner[vid] = target
        await self._broadcast(
            job,
            self._vid_map_message(job, {vid: job.vid_map[vid]}),
            agents=sorted(set(job.vid_owner.values()) | {source})
        )
        await self._call(target, Message(Opcode.RESUME, request))
        job.deployment = apply_moves(job.deployment, [move])
        job.migrations.append({
            "vid": vid.hex(),
            "source": str(source),
            "target": str(target),
            "version": job.vid_map_version,
            "started_at": started,
            "finished_at": time.time()
        })
        logger.info("Job %s: %s migrato da %s a %s", job.job_id, vid_text(vid), source, target)

    # raccolta

    async def collect(self, job: JobDescriptor):
        agents = sorted(set(job.vid_owner.values())) if job.deployment is not None else []
        for agent in agents:
            try:
                reply = await self._call(agent, Message(Opcode.COLLECT, {"job_id": job.job_id}))
            except AgentUnreachableError:
                logger.warning("Job %s: log di %s non raccolti", job.job_id, agent)
                job.missing_agents.append(str(agent))
                continue
            if not reply.success:
                job.missing_agents.append(str(agent))
                continue
            collected = CollectPayload.from_dict(reply.payload["result"])
            for vid_hex, csv_text in sorted(collected.logs.items()):
                self.store.write_router_log(job.job_id, bytes.fromhex(vid_hex), csv_text)
            job.apps.update(collected.apps)
            job.counters.update(collected.counters)
        job.log_dir = str(self.store.job_dir(job.job_id))

    def write_manifest(self, job: JobDescriptor):
        manifest = RunManifest(
            job_id=job.job_id,
            name=job.spec.config.name,
            state=job.state.value,
            config_hash=job.spec.config_hash,
            routing_mode=job.spec.config.routing_mode,
            seed=job.spec.config.seed,
            agents=[str(a) for a in job.agents],
            deployment=job.deployment.assign.tolist() if job.deployment is not None else [],
            vid_owner={v.hex(): str(a) for v, a in sorted(job.vid_owner.items())},
            clock_offsets=dict(job.clock_offsets),
            missing_agents=list(job.missing_agents),
            migrations=list(job.migrations),
            apps=dict(job.apps),
            counters=dict(job.counters),
            error=job.error,
            log_files=[p.name for p in self.store.list_logs(job.job_id)]
        )
        self.store.write_manifest(manifest)
        job.log_dir = str(self.store.job_dir(job.job_id))

    # cambio di leader

    def adopt(
        self,
        job_id: str,
        spec: JobSpec,
        owners: Dict[Vid, AgentId],
        vid_map: Dict[Vid, Address],
        version: int,
        started_wall: float
    ):
        """Riprende il controllo di un job gia' in esecuzione dopo un'elezione"""
        if job_id in self.jobs:
            return
        agents = sorted(set(owners.values()) | set(self.live_agents()))
        job = JobDescriptor(job_id, spec, state=JobState.RUNNING)
        job.agents = agents
        job.vid_owner = dict(owners)
        job.vid_map = dict(vid_map)
        job.vid_map_version = version
        job.started_wall = started_wall
        job.deployment = DeploymentMatrix.from_assignment([agents.index(owners[v]) for v in spec.vids], len(agents))
        self.jobs[job_id] = job
        self._busy[job_id] = asyncio.Lock()
        self._tasks[job_id] = asyncio.create_task(self._resume_lifecycle(job))
        logger.info("Job %s adottato dal nuovo leader", job_id)

    async def _resume_lifecycle(self, job: JobDescriptor):
        try:
            await self._run(job)
            job.advance(JobState.COLLECTING)
            await self.collect(job)
            job.advance(JobState.DONE)
        except asyncio.CancelledError:
            raise
        except LiteLabError as e:
            logger.error("Job %s fallito: %s", job.job_id, e)
            await self._abort(job, str(e))
        except Exception as e:
            logger.exception("Job %s: errore inatteso", job.job_id)
            await self._abort(job, f"{type(e).__name__}: {e}")
        self.write_manifest(job)

    def status(self, job_id: str) -> Dict[str, Any]:
        if job_id not in self.jobs:
            raise JobError(f"unknown job {job_id}")
        return self.jobs[job_id].summary()

    async def wait(self, job_id: str):
        task = self._tasks.get(job_id)
        if task is not None:
            await asyncio.shield(task)

    async def stop(self):
        for task in self._tasks.values():
            task.cancel()
        await asyncio.gather(*self._tasks.values(), return_exceptions=True)
        self._tasks.clear()
