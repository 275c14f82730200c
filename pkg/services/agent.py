"""NodeAgent: un demone per nodo fisico.

Ogni agente ospita i router che il leader gli assegna e invia al leader un
SAMPLE a ogni intervallo di heartbeat. Il leader e' scelto con l'algoritmo
Bully sull'ordine (host, port); un candidato si proclama solo se raggiunge
la maggioranza del cluster configurato, altrimenti l'agente resta senza
leader. Tre heartbeat senza risposta rendono il leader sospetto e avviano
una nuova elezione.
"""
import asyncio
import base64
import logging
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Awaitable, Callable, Dict, List, Optional, Union

import psutil
from tenacity import AsyncRetrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from config.settings import APP_CONFIG
from services.control_protocol import (
    AgentId,
    AssignPayload,
    CollectPayload,
    LocalNetwork,
    Message,
    Opcode,
    SamplePayload,
    TcpTransport,
    Transport,
    ack,
    nack
)
from services.exceptions import AgentUnreachableError, JobError, JobRejectedError, LiteLabError
from services.job_archive import JobSpec, load_archive
from services.job_control import JobControl
from services.log_persistence import LogStore
from services.overlay import OverlayHost
from services.placement import RESOURCES, LoadSample, NodeCapacity
from services.topology import Vid, vid_text

logger = logging.getLogger(__name__)

AGENT_CONFIG = APP_CONFIG["agent"]


class LoadProbe:
    """Carico del nodo da psutil, sostituibile con un carico sintetico"""

    def __init__(self, capacity: NodeCapacity):
        self.capacity = capacity
        self.synthetic: Optional[LoadSample] = None
        self._last_bytes: Optional[int] = None
        self._last_at: Optional[float] = None
        psutil.cpu_percent(interval=None)

    def inject(self, sample: LoadSample):
        self.synthetic = sample

    def clear(self):
        self.synthetic = None

    def _traffic_kbps(self) -> float:
        counters = psutil.net_io_counters()
        total = counters.bytes_sent + counters.bytes_recv
        now = time.monotonic()
        rate = 0.0
        if self._last_bytes is not None and self._last_at is not None and now > self._last_at:
            rate = (total - self._last_bytes) * 8 / 1000.0 / (now - self._last_at)
        self._last_bytes, self._last_at = total, now
        return max(0.0, rate)

    def sample(self) -> LoadSample:
        if self.synthetic is not None:
            return self.synthetic
        memory = psutil.virtual_memory()
        return LoadSample.normalized(
            cpu_percent=psutil.cpu_percent(interval=None),
            traffic_kbps=self._traffic_kbps(),
            memory_mb=memory.percent / 100.0 * self.capacity.mem,
            capacity=self.capacity
        )


@dataclass
class HostedJob:
    spec: JobSpec
    host: OverlayHost
    started_wall: Optional[float] = None


class NodeAgent:
    def __init__(
        self,
        agent_id: AgentId,
        peers: List[AgentId],
        transport: Transport,
        data_dir: Union[str, Path] = "data",
        capacity: Optional[NodeCapacity] = None,
        settings: Optional[Dict[str, Any]] = None
    ):
        self.agent_id = agent_id
        self.peers = sorted(set(peers) - {agent_id})
        self.transport = transport
        self.settings = {**AGENT_CONFIG, **(settings or {})}
        self.capacity = capacity or NodeCapacity(**AGENT_CONFIG["capacity"])
        self.probe = LoadProbe(self.capacity)
        self.store = LogStore(data_dir)
        self.control = JobControl(self, self.store)
        self.leader: Optional[AgentId] = None
        self.epoch = 0
        self.hosted: Dict[str, HostedJob] = {}
        self.running = False
        self._coordinator = asyncio.Event()
        self._electing = False
        self._missed = 0
        self._tasks: List[asyncio.Task] = []
        self._rng = random.Random(str(agent_id))
        self._handlers: Dict[Opcode, Callable[[Dict[str, Any]], Awaitable[Message]]] = {
            Opcode.ELECTION: self._on_election,
            Opcode.COORDINATOR: self._on_coordinator,
            Opcode.SUBMIT: self._on_submit,
            Opcode.SAMPLE: self._on_sample,
            Opcode.ASSIGN: self._on_assign,
            Opcode.PAUSE: self._on_pause,
            Opcode.RESUME: self._on_resume,
            Opcode.VIDMAP: self._on_vid_map,
            Opcode.MIGRATE: self._on_migrate,
            Opcode.COLLECT: self._on_collect,
            Opcode.STATUS: self._on_status
        }

    @property
    def is_leader(self) -> bool:
        return self.leader == self.agent_id

    @property
    def majority(self) -> int:
        return (len(self.peers) + 1) // 2 + 1

    # ciclo di vita

    async def start(self):
        await self.transport.serve(self.agent_id, self.handle)
        self.running = True
        logger.info("Agente %s avviato, %d peer", self.agent_id, len(self.peers))
        self._tasks.append(asyncio.create_task(self._heartbeat_loop()))
        await self.start_election()

    async def stop(self):
        self.running = False
        for task in self._tasks:
            task.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self._tasks.clear()
        await self.control.stop()
        for hosted in self.hosted.values():
            await hosted.host.stop()
        self.hosted.clear()
        await self.transport.close()
        self.leader = None
        logger.info("Agente %s fermato", self.agent_id)

    async def call(
        self,
        target: AgentId,
        message: Message,
        attempts: Optional[int] = None,
        timeout: Optional[float] = None
    ) -> Message:
        if target == self.agent_id:
            return await self.handle(message)
        reply = None
        async for attempt in AsyncRetrying(
            stop=stop_after_attempt(attempts or self.settings["rpc_attempts"]),
            wait=wait_exponential(multiplier=0.05, max=1.0),
            retry=retry_if_exception_type(AgentUnreachableError),
            reraise=True
        ):
            with attempt:
                reply = await self.transport.request(target, message, timeout or self.settings["rpc_timeout_s"])
        return reply

    async def handle(self, message: Message) -> Message:
        handler = self._handlers.get(message.opcode)
        if handler is None:
            return nack(f"unsupported opcode {message.opcode.name}")
        try:
            return await handler(message.payload)
        except JobRejectedError as e:
            return nack(str(e), diagnostics=e.diagnostics)
        except LiteLabError as e:
            logger.warning("[%s] %s fallito: %s", self.agent_id, message.opcode.name, e)
            return nack(str(e))

    # elezione

    async def _probe(self, target: AgentId, message: Message) -> Optional[Message]:
        try:
            return await self.call(target, message, attempts=1, timeout=self.settings["election_timeout_s"])
        except AgentUnreachableError:
            return None

    async def start_election(self):
        if self._electing or not self.running:
            return
        self._electing = True
        try:
            while self.running:
                self._coordinator.clear()
                higher = [p for p in self.peers if p > self.agent_id]
                election = Message(Opcode.ELECTION, {"from": str(self.agent_id), "epoch": self.epoch})
                replies = await asyncio.gather(*(self._probe(p, election) for p in higher))
                for reply in replies:
                    if reply is not None:
                        self.epoch = max(self.epoch, int(reply.payload.get("epoch", 0)))
                if not any(r is not None and r.opcode is Opcode.ANSWER for r in replies):
                    await self._announce()
                    return
                try:
                    await asyncio.wait_for(self._coordinator.wait(), self.settings["election_timeout_s"])
                    return
                except asyncio.TimeoutError:
                    await asyncio.sleep(self._rng.uniform(*self.settings["election_backoff_s"]))
        finally:
            self._electing = False

    def _spawn_election(self):
        task = asyncio.create_task(self.start_election())
        self._tasks.append(task)
        task.add_done_callback(self._forget_task)

    def _forget_task(self, task: asyncio.Task):
        if task in self._tasks:
            self._tasks.remove(task)

    async def _announce(self) -> bool:
        status = Message(Opcode.STATUS, {})
        replies = await asyncio.gather(*(self._probe(p, status) for p in self.peers))
        reachable = [p for p, r in zip(self.peers, replies) if r is not None]
        for reply in replies:
            if reply is not None:
                self.epoch = max(self.epoch, int(reply.payload.get("epoch", 0)))
        if len(reachable) + 1 < self.majority:
            logger.warning("[%s] nessun leader: %d agenti raggiungibili su %d", self.agent_id,
                           len(reachable) + 1, len(self.peers) + 1)
            self.leader = None
            return False

        epoch = self.epoch + 1
        coordinator = Message(Opcode.COORDINATOR, {"leader": str(self.agent_id), "epoch": epoch})
        replies = await asyncio.gather(*(self._probe(p, coordinator) for p in reachable))
        acked = [p for p, r in zip(reachable, replies) if r is not None and r.success]
        if len(acked) + 1 < self.majority:
            self.leader = None
            return False
        self._accept(self.agent_id, epoch)
        self.control.seen(acked)
        await self._adopt_jobs(acked)
        return True

    def _accept(self, leader: AgentId, epoch: int):
        if leader != self.leader:
            logger.info("[%s] nuovo leader %s (epoca %d)", self.agent_id, leader, epoch)
        self.leader = leader
        self.epoch = max(self.epoch, epoch)
        self._missed = 0
        self._coordinator.set()

    async def _on_election(self, payload: Dict[str, Any]) -> Message:
        candidate = AgentId.parse(payload["from"])
        if candidate < self.agent_id and not self._electing:
            self._spawn_election()
        return Message(Opcode.ANSWER, {"agent": str(self.agent_id), "epoch": self.epoch})

    async def _on_coordinator(self, payload: Dict[str, Any]) -> Message:
        leader = AgentId.parse(payload["leader"])
        epoch = int(payload["epoch"])
        if leader < self.agent_id:
            # un agente con ordine maggiore e' vivo: si riprende la leadership
            if not self._electing:
                self._spawn_election()
            return nack("higher agent alive", agent=str(self.agent_id))
        self._accept(leader, epoch)
        return ack(epoch=self.epoch)

    # heartbeat e campioni

    def sample_payload(self) -> SamplePayload:
        load = self.probe.sample()
        counters = {
            job_id: {
                vid.hex(): dict(realtime.router.counters)
                for vid, realtime in sorted(hosted.host.routers.items())
            }
            for job_id, hosted in sorted(self.hosted.items())
        }
        return SamplePayload(
            agent=str(self.agent_id),
            capacity={**{r: float(getattr(self.capacity, r)) for r in RESOURCES}, "slots": self.capacity.slots},
            load={
                "avg_cpu_load": load.avg_cpu_load,
                "traffic": load.traffic,
                "memory_usage": load.memory_usage,
                "user_activities": load.user_activities
            },
            timestamp=time.time(),
            counters=counters
        )

    async def _heartbeat_loop(self):
        interval = self.settings["heartbeat_interval_s"]
        while self.running:
            await asyncio.sleep(interval)
            try:
                await self.heartbeat()
            except asyncio.CancelledError:
                raise
            except Exception:
                logger.exception("[%s] errore nel ciclo di heartbeat", self.agent_id)

    async def heartbeat(self):
        if self.leader is None:
            await self.start_election()
            return
        if self.is_leader:
            self.control.on_sample(self.agent_id, self.sample_payload())
            if len(self.control.live_agents()) < self.majority:
                logger.warning("[%s] maggioranza persa, rinuncio alla leadership", self.agent_id)
                self.leader = None
                return
            await self.control.tick()
            return
        sample = Message(Opcode.SAMPLE, self.sample_payload().to_dict())
        try:
            reply = await self.call(self.leader, sample, attempts=1, timeout=self.settings["heartbeat_interval_s"])
        except AgentUnreachableError:
            self._missed += 1
            if self._missed >= self.settings["suspect_after_missed"]:
                logger.warning("[%s] leader %s sospetto dopo %d heartbeat", self.agent_id, self.leader, self._missed)
                self.leader = None
                self._missed = 0
                await self.start_election()
            return
        self._missed = 0
        if not reply.success:
            self.leader = None
            await self.start_election()

    async def _on_sample(self, payload: Dict[str, Any]) -> Message:
        if not self.is_leader:
            return nack("not leader", leader=str(self.leader) if self.leader else None)
        sample = SamplePayload.from_dict(payload)
        self.control.on_sample(AgentId.parse(sample.agent), sample)
        return ack(epoch=self.epoch)

    # job

    async def _on_submit(self, payload: Dict[str, Any]) -> Message:
        if not self.is_leader:
            return nack("not leader", leader=str(self.leader) if self.leader else None)
        job_id = await self.control.submit(base64.b64decode(payload["archive"]))
        return ack(job_id=job_id)

    def _hosted(self, job_id: str) -> HostedJob:
        if job_id not in self.hosted:
            raise JobError(f"job {job_id} is not hosted on {self.agent_id}")
        return self.hosted[job_id]

    async def _on_assign(self, payload: Dict[str, Any]) -> Message:
        assign = AssignPayload.from_dict(payload)
        vid_map = {bytes.fromhex(k): (v[0], int(v[1])) for k, v in assign.vid_map.items()}
        hosted = self.hosted.get(assign.job_id)
        if hosted is None:
            spec = load_archive(base64.b64decode(assign.archive))
            host = OverlayHost(
                assign.job_id,
                spec.topology,
                spec.routes,
                vid_map,
                seed=spec.config.seed,
                handler_params=spec.handler_params,
                app_params=spec.app_params(),
                **spec.router_kwargs()
            )
            hosted = self.hosted[assign.job_id] = HostedJob(spec, host)
        else:
            hosted.host.vid_map.update(vid_map)

        vids = [bytes.fromhex(v) for v in assign.vids]
        if assign.checkpoint is not None:
            await hosted.host.import_router(assign.checkpoint, vid_map[vids[0]])
            return ack()
        conflicts = await hosted.host.deploy(vids)
        if conflicts:
            return nack("port conflict", conflicts=[v.hex() for v in conflicts])
        logger.info("[%s] job %s: %d router in ascolto", self.agent_id, assign.job_id, len(vids))
        return ack()

    async def _on_pause(self, payload: Dict[str, Any]) -> Message:
        hosted = self._hosted(payload["job_id"])
        vid = bytes.fromhex(payload["vid"])
        hosted.host.pause(vid)
        return ack()

    async def _on_resume(self, payload: Dict[str, Any]) -> Message:
        hosted = self._hosted(payload["job_id"])
        phase = payload.get("phase")
        if phase == "connect":
            await hosted.host.connect()
        elif phase == "start":
            await hosted.host.start()
            hosted.started_wall = time.time()
        else:
            await hosted.host.resume(bytes.fromhex(payload["vid"]))
        return ack()

    async def _on_vid_map(self, payload: Dict[str, Any]) -> Message:
        hosted = self._hosted(payload["job_id"])
        mapping = {bytes.fromhex(k): (v[0], int(v[1])) for k, v in payload["map"].items()}
        hosted.host.apply_vid_map(int(payload["version"]), mapping)
        return ack()

    async def _on_migrate(self, payload: Dict[str, Any]) -> Message:
        hosted = self._hosted(payload["job_id"])
        vid = bytes.fromhex(payload["vid"])
        checkpoint = await hosted.host.export_router(vid)
        logger.info("[%s] router %s esportato (%d byte)", self.agent_id, vid_text(vid), len(checkpoint))
        return ack(checkpoint=checkpoint)

    async def _on_collect(self, payload: Dict[str, Any]) -> Message:
        hosted = self.hosted.pop(payload["job_id"], None)
        if hosted is None:
            return nack(f"job {payload['job_id']} is not hosted on {self.agent_id}")
        await hosted.host.stop()
        result = CollectPayload(
            agent=str(self.agent_id),
            logs={vid.hex(): csv for vid, csv in hosted.host.collect_logs().items()},
            apps={
                vid.hex(): app.report()
                for vid in sorted(hosted.host.routers)
                if (app := hosted.host.app(vid)) is not None
            },
            counters={
                vid.hex(): snapshot.totals() for vid, snapshot in hosted.host.introspect().items()
            }
        )
        return ack(result=result.to_dict())

    async def _on_status(self, payload: Dict[str, Any]) -> Message:
        reply: Dict[str, Any] = {
            "agent": str(self.agent_id),
            "leader": str(self.leader) if self.leader else None,
            "epoch": self.epoch,
            "clock": time.monotonic(),
            "hosted": sorted(self.hosted)
        }
        job_id = payload.get("job_id")
        if job_id and self.is_leader:
            reply["job"] = self.control.status(job_id)
        if payload.get("adopt"):
            reply["jobs"] = {
                job_id: {
                    "archive": base64.b64encode(hosted.spec.archive).decode("ascii"),
                    "vids": [vid.hex() for vid in sorted(hosted.host.routers)],
                    "vid_map": {v.hex(): list(a) for v, a in sorted(hosted.host.vid_map.items())},
                    "version": max((r.router.vid_map_version for r in hosted.host.routers.values()), default=0),
                    "started_wall": hosted.started_wall
                }
                for job_id, hosted in sorted(self.hosted.items())
                if hosted.started_wall is not None
            }
        return ack(**reply)

    async def _adopt_jobs(self, peers: List[AgentId]):
        """Ricostruisce i job in esecuzione dai rapporti degli agenti"""
        reports: Dict[str, Dict[str, Any]] = {}
        owners: Dict[str, Dict[Vid, AgentId]] = {}
        for agent in [self.agent_id] + sorted(peers):
            reply = await self._probe(agent, Message(Opcode.STATUS, {"adopt": True}))
            if reply is None:
                continue
            for job_id, report in reply.payload.get("jobs", {}).items():
                if job_id in self.control.jobs:
                    continue
                reports.setdefault(job_id, report)
                for vid in report["vids"]:
                    owners.setdefault(job_id, {})[bytes.fromhex(vid)] = agent
                if report["version"] > reports[job_id]["version"]:
                    reports[job_id] = report
        for job_id, report in sorted(reports.items()):
            spec = load_archive(base64.b64decode(report["archive"]))
            if set(owners[job_id]) != set(spec.vids):
                logger.warning("Job %s non adottabile: router mancanti", job_id)
                continue
            vid_map = {bytes.fromhex(k): (v[0], int(v[1])) for k, v in report["vid_map"].items()}
            self.control.adopt(job_id, spec, owners[job_id], vid_map, report["version"], report["started_wall"])


class LocalCluster:
    """N agenti nello stesso processo, su porte distinte di un solo host"""

    def __init__(
        self,
        count: int,
        base_port: int = AGENT_CONFIG["default_port"],
        data_dir: Union[str, Path] = "data",
        transport: str = "local",
        host: str = AGENT_CONFIG["default_host"],
        settings: Optional[Dict[str, Any]] = None,
        capacity: Optional[NodeCapacity] = None
    ):
        if count < 1:
            raise ValueError("a cluster needs at least one agent")
        self.network = LocalNetwork() if transport == "local" else None
        ids = [AgentId(host, base_port + i) for i in range(count)]
        self.agents = [
            NodeAgent(
                agent_id,
                ids,
                self.network.transport() if self.network is not None else TcpTransport(),
                data_dir=data_dir,
                capacity=capacity,
                settings=settings
            )
            for agent_id in ids
        ]

    @property
    def running(self) -> List[NodeAgent]:
        return [a for a in self.agents if a.running]

    @property
    def leader(self) -> Optional[NodeAgent]:
        leaders = {a.leader for a in self.running}
        if len(leaders) != 1 or None in leaders:
            return None
        chosen = leaders.pop()
        return next((a for a in self.running if a.agent_id == chosen), None)

    def agent(self, agent_id: AgentId) -> NodeAgent:
        return next(a for a in self.agents if a.agent_id == agent_id)

    async def start(self, timeout: float = 10.0):
        await asyncio.gather(*(a.start() for a in self.agents))
        await self.wait_for_leader(timeout)

    async def wait_for_leader(self, timeout: float = 10.0) -> NodeAgent:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            leader = self.leader
            if leader is not None:
                return leader
            await asyncio.sleep(0.01)
        raise AgentUnreachableError("cluster", f"no agreed leader within {timeout} s")

    async def kill(self, agent: NodeAgent):
        if self.network is not None:
            self.network.crash(agent.agent_id)
        await agent.stop()
        if self.network is not None:
            self.network.recover(agent.agent_id)

    async def stop(self):
        await asyncio.gather(*(a.stop() for a in self.running))

    async def submit(self, archive: bytes) -> str:
        leader = await self.wait_for_leader()
        message = Message(Opcode.SUBMIT, {"archive": base64.b64encode(archive).decode("ascii")})
        reply = await leader.handle(message)
        if not reply.success:
            raise JobRejectedError(reply.payload.get("diagnostics") or [reply.error])
        return reply.payload["job_id"]

    async def wait_job(self, job_id: str, timeout: float = 60.0) -> Dict[str, Any]:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            leader = self.leader
            if leader is not None and job_id in leader.control.jobs:
                status = leader.control.status(job_id)
                if status["state"] in ("Done", "Failed"):
                    await leader.control.wait(job_id)
                    return leader.control.status(job_id)
            await asyncio.sleep(0.02)
        raise JobError(f"job {job_id} did not finish within {timeout} s")


class ClusterClient:
    """Client di un cluster di agenti remoti: trova il leader, invia job, ne segue lo stato"""

    def __init__(self, peers: List[AgentId], transport: Optional[Transport] = None, timeout: float = 5.0):
        if not peers:
            raise ValueError("at least one agent address is required")
        self.peers = sorted(peers)
        self.transport = transport or TcpTransport()
        self.timeout = timeout

    async def find_leader(self) -> AgentId:
        for peer in self.peers:
            try:
                reply = await self.transport.request(peer, Message(Opcode.STATUS, {}), self.timeout)
            except AgentUnreachableError:
                continue
            if reply.payload.get("leader"):
                return AgentId.parse(reply.payload["leader"])
        raise AgentUnreachableError(",".join(str(p) for p in self.peers), "no agent reports a leader")

    async def submit(self, archive: bytes) -> str:
        leader = await self.find_leader()
        message = Message(Opcode.SUBMIT, {"archive": base64.b64encode(archive).decode("ascii")})
        reply = await self.transport.request(leader, message, AGENT_CONFIG["deploy_timeout_s"])
        if not reply.success:
            raise JobRejectedError(reply.payload.get("diagnostics") or [reply.error])
        return reply.payload["job_id"]

    async def status(self, job_id: str) -> Dict[str, Any]:
        leader = await self.find_leader()
        reply = await self.transport.request(leader, Message(Opcode.STATUS, {"job_id": job_id}), self.timeout)
        if not reply.success:
            raise JobError(reply.error)
        return reply.payload["job"]

    async def wait(self, job_id: str, timeout: Optional[float] = None, poll_s: float = AGENT_CONFIG["status_poll_s"]):
        deadline = None if timeout is None else time.monotonic() + timeout
        while deadline is None or time.monotonic() < deadline:
            try:
                status = await self.status(job_id)
            except (AgentUnreachableError, JobError) as e:
                # durante un'elezione il nuovo leader puo' non conoscere ancora il job
                logger.debug("Stato del job %s non disponibile: %s", job_id, e)
            else:
                if status["state"] in ("Done", "Failed") and status.get("log_dir"):
                    return status
            await asyncio.sleep(poll_s)
        raise JobError(f"job {job_id} did not finish within {timeout} s")
