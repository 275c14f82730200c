"""SRouter: router software con code iqueue/equeue/cqueue, emulazione per link,
catena di ihandler, tabella VID -> indirizzo e interfaccia send/recv per le app.

Il nucleo non conosce il tempo ne' il trasporto: i backend (simulatore a tempo
virtuale, overlay asyncio in tempo reale) passano l'istante corrente e
ricevono notifiche tramite le callback `on_egress` e `on_deliver`.
"""
import csv
import enum
import io
import json
import logging
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Deque, Dict, List, Optional, Sequence, Tuple, Union

from dataclasses_json import dataclass_json

from config.settings import APP_CONFIG, ERROR_MESSAGES
from services.exceptions import (
    ChainError,
    MalformedPacketError,
    NoRouteError,
    PacketError,
    PayloadTooLargeError,
    ProtocolError
)
from services.ihandlers import BypassHandler, Continue, Drop, IHandler, resolve_handler
from services.link_emulator import (
    LinkCounters,
    LinkEndpoint,
    ScheduleDecision,
    TokenBucket,
    kbps_bucket
)
from services.packet import DEFAULT_TTL, MAX_PAYLOAD, ControlSubtype, Packet, PacketType, decode
from services.routing import RoutingTable
from services.topology import Topology, Vid, vid_text

logger = logging.getLogger(__name__)

SROUTER_CONFIG = APP_CONFIG["srouter"]

EVENT_LOG_HEADER = ("timestamp_us", "event", "link", "src", "dst", "size", "reason")

Address = Tuple[str, int]


class RecvStatus(enum.Enum):
    TIMEOUT = "timeout"


TIMEOUT = RecvStatus.TIMEOUT


class Disposition(str, enum.Enum):
    CONSUMED = "consumed"
    FORWARDED = "forwarded"
    DROPPED = "dropped"


@dataclass(frozen=True)
class ProcessResult:
    disposition: Disposition
    next_hop: Optional[Vid] = None
    reason: Optional[str] = None


class EventLog:
    """Registro CSV degli eventi del piano dati di un router"""

    def __init__(self, clock: Callable[[], float] = time.monotonic):
        self.clock = clock
        self.rows: List[Tuple[Any, ...]] = []
        self._lock = threading.Lock()

    def record(self, event: str, link: Optional[Vid], packet: Packet, reason: str = ""):
        row = (
            int(round(self.clock() * 1_000_000)),
            event,
            vid_text(link) if link is not None else "",
            vid_text(packet.src),
            vid_text(packet.dst),
            packet.wire_size,
            reason
        )
        with self._lock:
            self.rows.append(row)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(EVENT_LOG_HEADER)
        with self._lock:
            writer.writerows(self.rows)
        return buffer.getvalue()

    def __len__(self) -> int:
        return len(self.rows)


class ConsumeQueue:
    """cqueue: FIFO limitata su cui l'applicazione puo' bloccarsi"""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: Deque[Packet] = deque()
        self._ready = threading.Condition()

    def put(self, packet: Packet) -> bool:
        with self._ready:
            if len(self._items) >= self.capacity:
                return False
            self._items.append(packet)
            self._ready.notify()
            return True

    def get(self, timeout: Optional[float] = None) -> Union[Packet, RecvStatus]:
        with self._ready:
            if timeout is None:
                self._ready.wait_for(lambda: self._items)
            elif timeout <= 0:
                if not self._items:
                    return TIMEOUT
            elif not self._ready.wait_for(lambda: self._items, timeout=timeout):
                return TIMEOUT
            return self._items.popleft()

    def snapshot(self) -> List[Packet]:
        with self._ready:
            return list(self._items)

    def drain(self) -> List[Packet]:
        with self._ready:
            items = list(self._items)
            self._items.clear()
            return items

    def restore(self, packets: Sequence[Packet]):
        with self._ready:
            self._items.extend(packets)
            self._ready.notify_all()

    def __len__(self) -> int:
        return len(self._items)


@dataclass(frozen=True)
class RouterSnapshot:
    vid: Vid
    routes: Dict[Vid, Vid]
    links: Dict[Vid, LinkCounters]
    chain: Tuple[str, ...]
    cqueue_len: int
    counters: Dict[str, int]
    vid_map: Dict[Vid, Address]
    vid_map_version: int

    def totals(self) -> Dict[str, int]:
        """Contatori del router piu' i totali dei suoi link"""
        return {
            **self.counters,
            "link_dropped": sum(c.dropped for c in self.links.values()),
            "migration_loss": sum(c.migration_loss for c in self.links.values())
        }


@dataclass_json
@dataclass
class LinkCheckpoint:
    neighbor: str
    counters: Dict[str, Any]
    ingress: List[Dict[str, Optional[str]]]
    egress: List[Dict[str, Optional[str]]]
    loss_rng: List[Any]
    ingress_red_avg: float = 0.0
    egress_red_avg: float = 0.0
    paused: bool = False


@dataclass_json
@dataclass
class RouterCheckpoint:
    """Stato trasferito durante la migrazione di un SRouter"""
    vid: str
    links: List[LinkCheckpoint]
    cqueue: List[Dict[str, Optional[str]]]
    chain: List[Dict[str, Any]]
    counters: Dict[str, int]
    vid_map: Dict[str, List[Any]] = field(default_factory=dict)
    vid_map_version: int = 0
    log_rows: List[List[Any]] = field(default_factory=list)


def _packet_record(packet: Packet) -> Dict[str, Optional[str]]:
    return {
        "raw": packet.encode().hex(),
        "ingress": packet.ingress_link.hex() if packet.ingress_link is not None else None
    }


def _packet_from_record(record: Dict[str, Optional[str]]) -> Packet:
    packet = decode(bytes.fromhex(record["raw"] or ""))
    if record.get("ingress"):
        packet = packet.arriving_from(bytes.fromhex(record["ingress"]))
    return packet


def _rng_state(state: Sequence[Any]) -> Tuple[Any, ...]:
    version, internal, gauss = state
    return (version, tuple(internal), gauss)


def emulate_link(
    ep: LinkEndpoint, p: Packet, now: float, aggregate: Optional[TokenBucket] = None
) -> ScheduleDecision:
    return ep.emulate(p, now, aggregate)


class SRouter:
    """Router software di un singolo VID"""

    def __init__(
        self,
        vid: Vid,
        topology: Topology,
        routes: RoutingTable,
        seed: int = 0,
        clock: Callable[[], float] = time.monotonic,
        event_log: Optional[EventLog] = None,
        vid_map: Optional[Dict[Vid, Address]] = None,
        handler_params: Optional[Dict[str, Dict[str, Any]]] = None,
        burst: Optional[int] = None,
        cqueue_len: Optional[int] = None,
        aggregate_ingress_kbps: Optional[float] = None,
        aggregate_egress_kbps: Optional[float] = None
    ):
        if not topology.has_router(vid):
            raise ProtocolError(f"{ERROR_MESSAGES['unknown_vid']}: {vid_text(vid)}")
        self.vid = vid
        self.topology = topology
        self.routes = routes
        self.seed = seed
        self.clock = clock
        self.event_log = event_log if event_log is not None else EventLog(clock)
        self.burst = burst or SROUTER_CONFIG["mtu"]
        self.links: Dict[Vid, LinkEndpoint] = {
            neighbor: LinkEndpoint(
                vid, neighbor,
                topology.link_spec(vid, neighbor),
                topology.link_spec(neighbor, vid),
                seed=seed, burst=self.burst
            )
            for neighbor in topology.neighbors(vid)
        }
        self._order: List[Vid] = sorted(self.links)
        self._rr = 0
        self.cqueue = ConsumeQueue(cqueue_len or SROUTER_CONFIG["cqueue_len"])
        self.aggregate_ingress = kbps_bucket(
            aggregate_ingress_kbps or SROUTER_CONFIG["aggregate_ingress_kbps"], self.burst
        )
        self.aggregate_egress = kbps_bucket(
            aggregate_egress_kbps or SROUTER_CONFIG["aggregate_egress_kbps"], self.burst
        )
        self.counters: Dict[str, int] = {
            "originated": 0,
            "delivered": 0,
            "forwarded": 0,
            "malformed": 0,
            "no_route": 0,
            "ttl_expired": 0,
            "handler_drops": 0,
            "handler_errors": 0,
            "cqueue_full": 0,
            "unencodable": 0
        }
        self.vid_map: Dict[Vid, Address] = dict(vid_map) if vid_map else {
            v: ("virtual", 0) for v in (vid, *self._order)
        }
        self.vid_map_version = 0
        self.on_egress: Optional[Callable[[Vid], None]] = None
        self.on_deliver: Optional[Callable[[], None]] = None
        self.on_vid_map: Optional[Callable[[Dict[Vid, Address]], None]] = None
        self._lock = threading.RLock()

        self._chain: List[IHandler] = []
        self._bypass = BypassHandler()
        handler_params = handler_params or {}
        for name in topology.router(vid).handlers:
            self.register_ihandler(name, params=handler_params.get(name))

    # catena di ihandler

    @property
    def chain(self) -> Tuple[str, ...]:
        return tuple(h.name for h in self._chain) + (self._bypass.name,)

    def handler(self, name: str) -> IHandler:
        for handler in self._chain:
            if handler.name == name:
                return handler
        raise ChainError(f"{ERROR_MESSAGES['unknown_handler']}: {name}")

    def register_ihandler(
        self,
        plugin: Union[str, IHandler],
        position: Optional[int] = None,
        params: Optional[Dict[str, Any]] = None
    ) -> None:
        """Inserisce un handler nella catena, sempre prima del bypass"""
        if isinstance(plugin, BypassHandler) or plugin == BypassHandler.name:
            raise ChainError(ERROR_MESSAGES["bypass_protected"])
        handler = resolve_handler(plugin, params) if isinstance(plugin, str) else plugin
        with self._lock:
            if position is None:
                position = len(self._chain)
            if not 0 <= position <= len(self._chain):
                raise ChainError(
                    f"{ERROR_MESSAGES['bypass_protected']}: position {position} "
                    f"outside 0..{len(self._chain)}"
                )
            self._chain.insert(position, handler)
        logger.debug("[%s] handler %s registrato in posizione %d", vid_text(self.vid), handler.name, position)

    def remove_ihandler(self, name: str) -> IHandler:
        if name == BypassHandler.name:
            raise ChainError(ERROR_MESSAGES["bypass_protected"])
        with self._lock:
            handler = self.handler(name)
            self._chain.remove(handler)
            return handler

    # piano dati

    def _drop(self, packet: Packet, reason: str, link: Optional[Vid] = None) -> ProcessResult:
        endpoint = self.links.get(link) if link is not None else None
        if endpoint is not None:
            endpoint.counters.count_drop(reason)
        self.event_log.record("drop", link, packet, reason)
        return ProcessResult(Disposition.DROPPED, reason=reason)

    def ingress(self, from_vid: Vid, raw: bytes) -> Optional[str]:
        """Accoda un pacchetto ricevuto da un vicino; restituisce il motivo dello scarto"""
        endpoint = self.links.get(from_vid)
        if endpoint is None:
            raise ProtocolError(f"packet from non-neighbor {vid_text(from_vid)} at {vid_text(self.vid)}")
        with self._lock:
            try:
                packet = decode(raw).arriving_from(from_vid)
            except MalformedPacketError as e:
                self.counters["malformed"] += 1
                endpoint.counters.count_drop("malformed")
                logger.warning("[%s] pacchetto malformato da %s: %s", vid_text(self.vid), vid_text(from_vid), e)
                return "malformed"

            endpoint.counters.received += 1
            endpoint.counters.bytes_received += len(raw)
            if packet.type == PacketType.CONTROL:
                self.handle_control(packet)
                return None

            reason = endpoint.ingress_queue.offer(packet)
            if reason is not None:
                self._drop(packet, reason, from_vid)
                return reason
            self.event_log.record("recv", from_vid, packet)
            return None

    def pending_ingress(self) -> int:
        return sum(len(ep.ingress_queue) for ep in self.links.values())

    def egress_backlog(self) -> int:
        return sum(len(ep.egress_queue) for ep in self.links.values())

    def _next_ingress_link(self) -> Optional[LinkEndpoint]:
        for step in range(len(self._order)):
            endpoint = self.links[self._order[(self._rr + step) % len(self._order)]]
            if endpoint.ingress_queue:
                self._rr = (self._rr + step + 1) % len(self._order)
                return endpoint
        return None

    def ingress_wait(self, now: float) -> float:
        """Secondi da attendere prima di poter elaborare il prossimo pacchetto"""
        if self.aggregate_ingress is None:
            return 0.0
        with self._lock:
            heads = [ep.ingress_queue.peek() for ep in self.links.values() if ep.ingress_queue]
            if not heads:
                return 0.0
            size = min(p.wire_size for p in heads)
            return max(0.0, self.aggregate_ingress.ready_at(size, now) - now)

    def next_ingress(self, now: Optional[float] = None) -> Optional[Packet]:
        """Preleva il prossimo pacchetto dalle code di ingresso (round robin sui link)"""
        with self._lock:
            endpoint = self._next_ingress_link()
            if endpoint is None:
                return None
            packet = endpoint.ingress_queue.pop()
            if self.aggregate_ingress is not None:
                self.aggregate_ingress.consume(packet.wire_size, self.clock() if now is None else now)
            return packet

    def process_one(self, packet: Packet) -> ProcessResult:
        """Applica la catena di handler e infine il bypass"""
        with self._lock:
            for handler in list(self._chain):
                try:
                    outcome = handler.handle(self, packet)
                except Exception as e:
                    self.counters["handler_errors"] += 1
                    logger.warning("[%s] errore nell'handler %s: %s", vid_text(self.vid), handler.name, e)
                    return self._drop(packet, "handler-error", packet.ingress_link)
                if isinstance(outcome, Drop):
                    self.counters["handler_drops"] += 1
                    return self._drop(packet, outcome.reason, packet.ingress_link)
                if not isinstance(outcome, Continue):
                    self.counters["handler_errors"] += 1
                    return self._drop(packet, "handler-error", packet.ingress_link)
                packet = outcome.packet
            if len(packet.payload) > MAX_PAYLOAD:
                self.counters["handler_errors"] += 1
                logger.warning(
                    "[%s] payload di %d byte oltre il limite dopo la catena", vid_text(self.vid), len(packet.payload)
                )
                return self._drop(packet, "handler-error", packet.ingress_link)
            return self._bypass_route(packet)

    def _bypass_route(self, packet: Packet) -> ProcessResult:
        if packet.dst == self.vid:
            if not self.cqueue.put(packet):
                self.counters["cqueue_full"] += 1
                return self._drop(packet, "cqueue-full", packet.ingress_link)
            self.counters["delivered"] += 1
            self.event_log.record("deliver", packet.ingress_link, packet)
            if self.on_deliver is not None:
                self.on_deliver()
            return ProcessResult(Disposition.CONSUMED)

        if packet.ttl <= 0:
            self.counters["ttl_expired"] += 1
            return self._drop(packet, "ttl-expired", packet.ingress_link)
        hop = self.routes.lookup(packet.dst)
        if hop is None or hop not in self.links:
            self.counters["no_route"] += 1
            return self._drop(packet, "no-route", packet.ingress_link)

        outgoing = packet.with_ttl(packet.ttl - 1)
        reason = self.links[hop].egress_queue.offer(outgoing)
        if reason is not None:
            return self._drop(outgoing, reason, hop)
        local = packet.ingress_link is None
        if not local:
            self.counters["forwarded"] += 1
        self.event_log.record("originate" if local else "forward", hop, outgoing)
        if self.on_egress is not None:
            self.on_egress(hop)
        return ProcessResult(Disposition.FORWARDED, next_hop=hop)

    def transmit_next(self, neighbor: Vid, now: float) -> Optional[Tuple[Packet, ScheduleDecision]]:
        """Preleva la testa della equeue verso neighbor e ne emula il link"""
        with self._lock:
            endpoint = self.links[neighbor]
            while True:
                if endpoint.paused or not endpoint.egress_queue:
                    return None
                packet = endpoint.egress_queue.pop()
                try:
                    packet.encode()
                except PacketError as e:
                    self.counters["unencodable"] += 1
                    logger.warning("[%s] pacchetto non codificabile verso %s: %s", vid_text(self.vid), vid_text(neighbor), e)
                    self._drop(packet, "unencodable", neighbor)
                    continue
                break
            decision = emulate_link(endpoint, packet, now, self.aggregate_egress)
            if decision.dropped:
                self.event_log.record("drop", neighbor, packet, decision.reason or "loss")
            else:
                self.event_log.record("send", neighbor, packet)
            return packet, decision

    # interfaccia per le applicazioni

    def app_send(self, dst: Vid, payload: bytes, ttl: int = DEFAULT_TTL) -> ProcessResult:
        if len(payload) > MAX_PAYLOAD:
            raise PayloadTooLargeError(
                f"{ERROR_MESSAGES['payload_too_large']}: {len(payload)} > {MAX_PAYLOAD}"
            )
        if dst != self.vid and self.routes.lookup(dst) is None:
            raise NoRouteError(self.vid, dst)
        packet = Packet.data(self.vid, dst, payload, ttl)
        with self._lock:
            self.counters["originated"] += 1
            return self._bypass_route(packet)

    def app_recv(self, timeout: Optional[float] = None) -> Union[Packet, RecvStatus]:
        return self.cqueue.get(timeout)

    def app_introspect(self) -> RouterSnapshot:
        with self._lock:
            return RouterSnapshot(
                vid=self.vid,
                routes=dict(self.routes.entries),
                links={
                    n: LinkCounters(**{**asdict(ep.counters), "drop_reasons": dict(ep.counters.drop_reasons)})
                    for n, ep in self.links.items()
                },
                chain=self.chain,
                cqueue_len=len(self.cqueue),
                counters=dict(self.counters),
                vid_map=dict(self.vid_map),
                vid_map_version=self.vid_map_version
            )

    # controllo

    def control_packets(self, subtype: ControlSubtype, body: bytes = b"") -> List[Tuple[Vid, bytes]]:
        """Pacchetti di controllo link-local verso ogni vicino"""
        return [
            (neighbor, Packet.control(self.vid, neighbor, subtype, body).encode())
            for neighbor in self._order
        ]

    def handle_control(self, packet: Packet):
        subtype = packet.control_subtype
        neighbor = packet.ingress_link
        if subtype is ControlSubtype.PAUSE and neighbor in self.links:
            self.links[neighbor].paused = True
        elif subtype is ControlSubtype.RESUME and neighbor in self.links:
            self.links[neighbor].paused = False
            if self.on_egress is not None:
                self.on_egress(neighbor)
        elif subtype is ControlSubtype.VIDMAP:
            body = json.loads(packet.payload[1:].decode("utf-8"))
            self.apply_vid_map(
                int(body["version"]),
                {bytes.fromhex(k): (v[0], int(v[1])) for k, v in body["map"].items()}
            )
        else:
            logger.warning("[%s] pacchetto di controllo ignorato: %r", vid_text(self.vid), packet.payload[:1])

    def apply_vid_map(self, version: int, mapping: Dict[Vid, Address]) -> bool:
        """Aggiorna la tabella VID -> indirizzo; versioni non piu' recenti sono ignorate"""
        with self._lock:
            if version <= self.vid_map_version:
                return False
            self.vid_map.update(mapping)
            self.vid_map_version = version
        if self.on_vid_map is not None:
            self.on_vid_map(dict(mapping))
        return True

    def set_paused(self, neighbor: Vid, paused: bool):
        with self._lock:
            self.links[neighbor].paused = paused
        if not paused and self.on_egress is not None:
            self.on_egress(neighbor)

    # migrazione

    def checkpoint(self) -> RouterCheckpoint:
        with self._lock:
            links = [
                LinkCheckpoint(
                    neighbor=n.hex(),
                    counters=asdict(ep.counters),
                    ingress=[_packet_record(p) for p in ep.ingress_queue.snapshot()],
                    egress=[_packet_record(p) for p in ep.egress_queue.snapshot()],
                    loss_rng=list(ep.loss_rng.getstate()),
                    ingress_red_avg=ep.ingress_queue.avg,
                    egress_red_avg=ep.egress_queue.avg,
                    paused=ep.paused
                )
                for n, ep in sorted(self.links.items())
            ]
            cqueue = [_packet_record(p) for p in self.cqueue.snapshot()]
            return RouterCheckpoint(
                vid=self.vid.hex(),
                links=links,
                cqueue=cqueue,
                chain=[h.describe() for h in self._chain],
                counters=dict(self.counters),
                vid_map={k.hex(): list(v) for k, v in self.vid_map.items()},
                vid_map_version=self.vid_map_version,
                log_rows=[list(row) for row in self.event_log.rows]
            )

    def load_checkpoint(self, cp: RouterCheckpoint):
        if bytes.fromhex(cp.vid) != self.vid:
            raise ProtocolError(f"checkpoint for {cp.vid} loaded into {self.vid.hex()}")
        with self._lock:
            for link in cp.links:
                endpoint = self.links[bytes.fromhex(link.neighbor)]
                counters = dict(link.counters)
                endpoint.counters = LinkCounters(
                    **{**counters, "drop_reasons": dict(counters.get("drop_reasons", {}))}
                )
                endpoint.ingress_queue.drain()
                endpoint.egress_queue.drain()
                endpoint.ingress_queue.restore(_packet_from_record(r) for r in link.ingress)
                endpoint.egress_queue.restore(_packet_from_record(r) for r in link.egress)
                endpoint.ingress_queue.avg = link.ingress_red_avg
                endpoint.egress_queue.avg = link.egress_red_avg
                endpoint.loss_rng.setstate(_rng_state(link.loss_rng))
                endpoint.paused = link.paused
            self.cqueue.drain()
            self.cqueue.restore([_packet_from_record(r) for r in cp.cqueue])
            self._chain = []
            for entry in cp.chain:
                handler = resolve_handler(entry["name"], entry.get("params"))
                handler.restore_state(entry.get("state") or {})
                self._chain.append(handler)
            self.counters.update(cp.counters)
            self.vid_map = {bytes.fromhex(k): (v[0], int(v[1])) for k, v in cp.vid_map.items()}
            self.vid_map_version = cp.vid_map_version
            # un log condiviso con il router di origine contiene gia' le righe
            if not self.event_log.rows:
                self.event_log.rows.extend(tuple(row) for row in cp.log_rows)

    @classmethod
    def from_checkpoint(
        cls, cp: RouterCheckpoint, topology: Topology, routes: RoutingTable, **kwargs: Any
    ) -> "SRouter":
        router = cls(bytes.fromhex(cp.vid), topology, routes, **kwargs)
        router.load_checkpoint(cp)
        return router
