"""Backend a tempo virtuale: tutti gli SRouter di un job in un solo processo,
guidati da una coda di eventi ordinata per (istante, numero di sequenza).

A parita' di seed e di ingressi la traccia degli eventi e' identica byte per
byte, il che rende verificabili in CI le accuratezze di banda, ritardo e
perdita.
"""
import heapq
import itertools
import logging
import uuid
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Set, Tuple

from slugify import slugify

from config.settings import APP_CONFIG
from services.applications import AppContext, UserApp, resolve_app
from services.exceptions import MigrationError, RoutingError
from services.job_archive import JobSpec
from services.log_persistence import LogStore, RunManifest
from services.packet import DEFAULT_TTL
from services.routing import RouteSet
from services.srouter import TIMEOUT, EventLog, RouterCheckpoint, RouterSnapshot, SRouter
from services.topology import Topology, Vid, vid_text

logger = logging.getLogger(__name__)


class EventScheduler:
    """Coda di eventi deterministica in tempo virtuale"""

    def __init__(self):
        self.now = 0.0
        self._queue: List[Tuple[float, int, Callable[..., Any], Tuple[Any, ...]]] = []
        self._seq = itertools.count()

    def schedule_at(self, when: float, callback: Callable[..., Any], *args: Any):
        heapq.heappush(self._queue, (max(when, self.now), next(self._seq), callback, args))

    def schedule_in(self, delay: float, callback: Callable[..., Any], *args: Any):
        self.schedule_at(self.now + max(0.0, delay), callback, *args)

    def run(self, until: Optional[float] = None, max_events: Optional[int] = None) -> int:
        processed = 0
        while self._queue:
            if until is not None and self._queue[0][0] > until:
                break
            if max_events is not None and processed >= max_events:
                return processed
            when, _, callback, args = heapq.heappop(self._queue)
            self.now = when
            callback(*args)
            processed += 1
        if until is not None:
            self.now = max(self.now, until)
        return processed

    def __len__(self) -> int:
        return len(self._queue)


class SimAppContext(AppContext):
    def __init__(self, simulator: "Simulator", vid: Vid):
        self.simulator = simulator
        self.vid = vid

    def now(self) -> float:
        return self.simulator.scheduler.now

    def send(self, dst: Vid, payload: bytes, ttl: int = DEFAULT_TTL):
        if self.vid in self.simulator.migrating:
            self.simulator.migration_loss += 1
            return
        self.simulator.routers[self.vid].app_send(dst, payload, ttl)

    def call_later(self, delay: float, callback: Callable[[], None]):
        self.simulator.scheduler.schedule_in(delay, callback)

    def backlog(self) -> int:
        return self.simulator.routers[self.vid].egress_backlog()

    def introspect(self) -> RouterSnapshot:
        return self.simulator.routers[self.vid].app_introspect()


@dataclass
class MigrationRecord:
    vid: Vid
    started_at: float
    finished_at: Optional[float] = None
    lost_in_flight: int = 0


class Simulator:
    """Esegue un job completo in tempo virtuale"""

    def __init__(
        self,
        topology: Topology,
        routes: RouteSet,
        seed: int = 0,
        apps: Optional[Dict[Vid, UserApp]] = None,
        app_params: Optional[Dict[Vid, Dict[str, Any]]] = None,
        handler_params: Optional[Dict[str, Dict[str, Any]]] = None,
        processing_delay_s: Optional[float] = None,
        **router_kwargs: Any
    ):
        if routes.topology_hash != topology.content_hash():
            raise RoutingError("route set was built for a different topology")
        self.topology = topology
        self.route_set = routes
        self.seed = seed
        self.handler_params = handler_params or {}
        self.router_kwargs = router_kwargs
        self.processing_delay = (
            APP_CONFIG["srouter"]["processing_delay_s"] if processing_delay_s is None else processing_delay_s
        )
        self.scheduler = EventScheduler()
        self.logs: Dict[Vid, EventLog] = {
            vid: EventLog(clock=self._clock) for vid in topology.vids
        }
        self.routers: Dict[Vid, SRouter] = {vid: self._make_router(vid) for vid in topology.vids}

        self.apps: Dict[Vid, UserApp] = {}
        app_params = app_params or {}
        for router in topology.routers:
            if router.app:
                self.apps[router.vid] = resolve_app(router.app, app_params.get(router.vid))
        self.apps.update(apps or {})
        self.contexts = {vid: SimAppContext(self, vid) for vid in self.apps}

        self.migrating: Set[Vid] = set()
        self.migration_loss = 0
        self.vid_map_version = 0
        self.migrations: List[MigrationRecord] = []
        self._transmitting: Set[Tuple[Vid, Vid]] = set()
        self._processing: Set[Vid] = set()
        self._started = False

    def _clock(self) -> float:
        return self.scheduler.now

    def _make_router(self, vid: Vid, checkpoint: Optional[RouterCheckpoint] = None) -> SRouter:
        kwargs = dict(
            seed=self.seed,
            clock=self._clock,
            event_log=self.logs[vid],
            handler_params=self.handler_params,
            **self.router_kwargs
        )
        routes = self.route_set.table(vid)
        if checkpoint is not None:
            router = SRouter.from_checkpoint(checkpoint, self.topology, routes, **kwargs)
        else:
            router = SRouter(vid, self.topology, routes, **kwargs)
        router.on_egress = lambda hop, owner=vid: self._kick(owner, hop)
        router.on_deliver = lambda owner=vid: self._dispatch_app(owner)
        return router

    # ciclo degli eventi

    def start(self):
        if self._started:
            return
        self._started = True
        for vid, app in sorted(self.apps.items()):
            self.scheduler.schedule_at(self.scheduler.now, app.start, self.contexts[vid])

    def run(self, until: Optional[float] = None, max_events: Optional[int] = None) -> int:
        self.start()
        return self.scheduler.run(until=until, max_events=max_events)

    def stop_apps(self):
        for vid, app in sorted(self.apps.items()):
            app.stop(self.contexts[vid])

    def _kick(self, vid: Vid, hop: Vid):
        if vid in self.migrating or (vid, hop) in self._transmitting:
            return
        self._transmit(vid, hop)

    def _transmit(self, vid: Vid, hop: Vid):
        router = self.routers[vid]
        while True:
            item = router.transmit_next(hop, self.scheduler.now)
            if item is None:
                self._transmitting.discard((vid, hop))
                return
            packet, decision = item
            if not decision.dropped:
                break
        self._transmitting.add((vid, hop))
        self.scheduler.schedule_at(decision.transmit_end, self._transmit_done, vid, hop)
        self.scheduler.schedule_at(decision.deliver_at, self._deliver, vid, hop, packet.encode())

    def _transmit_done(self, vid: Vid, hop: Vid):
        self._transmitting.discard((vid, hop))
        if vid not in self.migrating:
            self._transmit(vid, hop)

    def _deliver(self, src: Vid, dst: Vid, raw: bytes):
        if dst in self.migrating:
            self.migration_loss += 1
            self.routers[src].links[dst].counters.migration_loss += 1
            if self.migrations:
                self.migrations[-1].lost_in_flight += 1
            return
        self.routers[dst].ingress(src, raw)
        self._schedule_processing(dst)

    def _schedule_processing(self, vid: Vid):
        if vid in self._processing or vid in self.migrating:
            return
        router = self.routers[vid]
        if not router.pending_ingress():
            return
        self._processing.add(vid)
        wait = router.ingress_wait(self.scheduler.now)
        self.scheduler.schedule_in(max(self.processing_delay, wait), self._process, vid)

    def _process(self, vid: Vid):
        self._processing.discard(vid)
        if vid in self.migrating:
            return
        router = self.routers[vid]
        packet = router.next_ingress(self.scheduler.now)
        if packet is not None:
            router.process_one(packet)
        self._schedule_processing(vid)

    def _dispatch_app(self, vid: Vid):
        if vid in self.apps:
            self.scheduler.schedule_in(0.0, self._app_receive, vid)

    def _app_receive(self, vid: Vid):
        if vid in self.migrating:
            return
        packet = self.routers[vid].app_recv(timeout=0)
        if packet is not TIMEOUT:
            self.apps[vid].on_packet(self.contexts[vid], packet)

    # migrazione simulata

    def migrate(self, vid: Vid, duration_s: float = 0.05) -> MigrationRecord:
        """Congela il router, ne trasferisce il checkpoint e lo riattiva dopo duration_s"""
        if vid not in self.routers:
            raise MigrationError(f"unknown router {vid_text(vid)}")
        if vid in self.migrating:
            raise MigrationError(f"router {vid_text(vid)} is already migrating")
        record = MigrationRecord(vid=vid, started_at=self.scheduler.now)
        self.migrations.append(record)
        self.migrating.add(vid)
        router = self.routers[vid]
        for neighbor in router.links:
            self.routers[neighbor].set_paused(vid, True)
        payload = router.checkpoint().to_json()
        logger.info("Migrazione di %s avviata (%d byte di stato)", vid_text(vid), len(payload))
        self.scheduler.schedule_in(duration_s, self._finish_migration, vid, payload, record)
        return record

    def _finish_migration(self, vid: Vid, payload: str, record: MigrationRecord):
        checkpoint = RouterCheckpoint.from_json(payload)
        router = self._make_router(vid, checkpoint)
        self.routers[vid] = router
        self.migrating.discard(vid)
        self.vid_map_version += 1
        for other in self.routers.values():
            other.apply_vid_map(self.vid_map_version, {vid: ("virtual", self.vid_map_version)})
        for neighbor in router.links:
            self.routers[neighbor].set_paused(vid, False)
        for hop in router.links:
            self._kick(vid, hop)
        self._schedule_processing(vid)
        if vid in self.apps:
            for _ in range(len(router.cqueue)):
                self._dispatch_app(vid)
        record.finished_at = self.scheduler.now
        logger.info("Migrazione di %s completata, %d pacchetti persi in volo", vid_text(vid), record.lost_in_flight)

    # risultati

    def trace(self) -> str:
        """Traccia completa degli eventi, router in ordine di VID"""
        return "".join(
            f"# router {vid_text(vid)}\n{self.logs[vid].to_csv()}" for vid in sorted(self.logs)
        )

    def counters(self, src: Vid, dst: Vid):
        return self.routers[src].links[dst].counters


def run_archive(spec: JobSpec, store: LogStore, job_id: Optional[str] = None) -> RunManifest:
    """Esegue un job con backend virtuale e ne archivia log e manifest"""
    job_id = job_id or f"{slugify(spec.config.name) or 'job'}-virtual-{uuid.uuid4().hex[:6]}"
    created_at = store.timestamp()
    simulator = Simulator(
        spec.topology,
        spec.routes,
        seed=spec.config.seed,
        app_params=spec.app_params(),
        handler_params=spec.handler_params,
        **spec.router_kwargs()
    )
    simulator.run(until=spec.config.duration_s)
    simulator.stop_apps()
    for vid, log in sorted(simulator.logs.items()):
        store.write_router_log(job_id, vid, log.to_csv())
    manifest = RunManifest(
        job_id=job_id,
        name=spec.config.name,
        state="Done",
        config_hash=spec.config_hash,
        routing_mode=spec.config.routing_mode,
        seed=spec.config.seed,
        created_at=created_at,
        agents=["virtual"],
        deployment=[[1] * len(spec.vids)],
        vid_owner={vid.hex(): "virtual" for vid in spec.vids},
        apps={vid.hex(): app.report() for vid, app in sorted(simulator.apps.items())},
        log_files=[store.log_name(vid) for vid in sorted(simulator.logs)]
    )
    store.write_manifest(manifest)
    logger.info("Job virtuale %s completato a t=%.3f s", job_id, simulator.scheduler.now)
    return manifest
