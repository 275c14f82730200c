"""Backend in tempo reale: SRouter su asyncio con una connessione TCP per link.

Ogni link e' servito da una sola connessione: la apre il router con il VID
minore, l'altro la accetta. Il primo frame e' un handshake con job_id e VID
del chiamante; i frame successivi sono pacchetti SRouter, ciascuno preceduto
dalla lunghezza su 4 byte. L'emulazione (perdita, banda, ritardo) avviene
prima della scrittura sullo stream, quindi non dipende dalle dinamiche TCP.
"""
import asyncio
import errno
import heapq
import itertools
import logging
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Deque, Dict, List, Optional, Tuple

from dataclasses_json import dataclass_json
from tenacity import AsyncRetrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from config.settings import APP_CONFIG
from services.applications import AppContext, UserApp, resolve_app
from services.exceptions import AgentUnreachableError, PortConflictError, ProtocolError
from services.packet import DEFAULT_TTL, MAX_PAYLOAD, ControlSubtype
from services.routing import RouteSet
from services.srouter import TIMEOUT, Address, RouterCheckpoint, RouterSnapshot, SRouter
from services.topology import Topology, Vid, vid_text

logger = logging.getLogger(__name__)

SROUTER_CONFIG = APP_CONFIG["srouter"]

_FRAME = struct.Struct(">I")
MAX_FRAME = MAX_PAYLOAD + 1024


async def read_frame(reader: asyncio.StreamReader) -> bytes:
    header = await reader.readexactly(_FRAME.size)
    (length,) = _FRAME.unpack(header)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame too large: {length} bytes")
    return await reader.readexactly(length)


def write_frame(writer: asyncio.StreamWriter, data: bytes):
    writer.write(_FRAME.pack(len(data)) + data)


@dataclass_json
@dataclass
class Handshake:
    job_id: str
    vid: str


class ThreadAppContext(AppContext):
    def __init__(self, runner: "AppRunner"):
        self.runner = runner
        self.vid = runner.router.vid

    def now(self) -> float:
        return self.runner.router.clock()

    def send(self, dst: Vid, payload: bytes, ttl: int = DEFAULT_TTL):
        self.runner.router.app_send(dst, payload, ttl)

    def call_later(self, delay: float, callback: Callable[[], None]):
        self.runner.add_timer(delay, callback)

    def backlog(self) -> int:
        return self.runner.router.egress_backlog()

    def introspect(self) -> RouterSnapshot:
        return self.runner.router.app_introspect()


class AppRunner(threading.Thread):
    """Esegue un'applicazione utente nel proprio thread sopra send/recv bloccanti"""

    def __init__(self, router: SRouter, app: UserApp, poll_s: float = 0.05):
        super().__init__(name=f"app-{vid_text(router.vid)}", daemon=True)
        self.router = router
        self.app = app
        self.poll_s = poll_s
        self.context = ThreadAppContext(self)
        self._timers: List[Tuple[float, int, Callable[[], None]]] = []
        self._seq = itertools.count()
        self._timers_lock = threading.Lock()
        self._stopping = threading.Event()

    def add_timer(self, delay: float, callback: Callable[[], None]):
        with self._timers_lock:
            heapq.heappush(self._timers, (time.monotonic() + delay, next(self._seq), callback))

    def _due_timers(self) -> List[Callable[[], None]]:
        now = time.monotonic()
        due = []
        with self._timers_lock:
            while self._timers and self._timers[0][0] <= now:
                due.append(heapq.heappop(self._timers)[2])
        return due

    def _next_wait(self) -> float:
        with self._timers_lock:
            if not self._timers:
                return self.poll_s
            return max(0.0, min(self.poll_s, self._timers[0][0] - time.monotonic()))

    def run(self):
        try:
            self.app.start(self.context)
            while not self._stopping.is_set():
                packet = self.router.app_recv(timeout=self._next_wait())
                if packet is not TIMEOUT:
                    self.app.on_packet(self.context, packet)
                for callback in self._due_timers():
                    callback()
        except Exception:
            logger.exception("Applicazione %s su %s terminata con errore", self.app.name, vid_text(self.router.vid))

    def stop(self, timeout: float = 2.0):
        self._stopping.set()
        self.app.stop(self.context)
        if self.is_alive():
            self.join(timeout)


class RealtimeRouter:
    """Lega un SRouter al ciclo asyncio e ai suoi stream TCP"""

    def __init__(self, router: SRouter, job_id: str, app: Optional[UserApp] = None):
        self.router = router
        self.job_id = job_id
        self.app = app
        self.loop = asyncio.get_running_loop()
        self._loop_thread = threading.get_ident()
        self.server: Optional[asyncio.AbstractServer] = None
        self.streams: Dict[Vid, asyncio.StreamWriter] = {}
        self._wake: Dict[Vid, asyncio.Event] = {n: asyncio.Event() for n in router.links}
        self._ingress = asyncio.Event()
        self._delay_lines: Dict[Vid, Deque[Tuple[float, bytes]]] = {n: deque() for n in router.links}
        self._release_handles: Dict[Vid, Optional[asyncio.TimerHandle]] = {n: None for n in router.links}
        self._tasks: List[asyncio.Task] = []
        self._readers: List[Tuple[asyncio.StreamReader, asyncio.StreamWriter, asyncio.Task]] = []
        self._draining = False
        self._runner: Optional[AppRunner] = None
        self.started = False
        router.on_egress = self._notify_egress
        router.on_vid_map = self._on_vid_map

    @property
    def vid(self) -> Vid:
        return self.router.vid

    def settle_s(self) -> float:
        delays = [ep.inbound_spec.delay_ms for ep in self.router.links.values()]
        return max(delays, default=0.0) / 1000 + SROUTER_CONFIG["migration_settle_s"]

    def _notify_egress(self, neighbor: Vid):
        event = self._wake.get(neighbor)
        if event is None:
            return
        if threading.get_ident() == self._loop_thread:
            event.set()
        else:
            self.loop.call_soon_threadsafe(event.set)

    # connessioni

    async def listen(self, host: str, port: int):
        try:
            self.server = await asyncio.start_server(self._accept, host, port)
        except OSError as e:
            if e.errno == errno.EADDRINUSE:
                raise PortConflictError(port, {"vid": vid_text(self.vid)}) from e
            raise

    async def _accept(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        try:
            hello = Handshake.from_json(await read_frame(reader))
        except (asyncio.IncompleteReadError, ProtocolError, ValueError, KeyError) as e:
            logger.warning("[%s] handshake non valido: %s", vid_text(self.vid), e)
            writer.close()
            return
        neighbor = bytes.fromhex(hello.vid)
        if hello.job_id != self.job_id or neighbor not in self.router.links:
            logger.warning("[%s] connessione rifiutata da %s (job %s)", vid_text(self.vid), hello.vid, hello.job_id)
            writer.close()
            return
        self._attach(neighbor, reader, writer)

    async def dial(self, neighbor: Vid):
        host, port = self.router.vid_map[neighbor]
        try:
            async for attempt in AsyncRetrying(
                stop=stop_after_attempt(SROUTER_CONFIG["connect_retries"]),
                wait=wait_exponential(multiplier=0.05, max=1.0),
                retry=retry_if_exception_type(OSError),
                reraise=True
            ):
                with attempt:
                    reader, writer = await asyncio.wait_for(
                        asyncio.open_connection(host, port), SROUTER_CONFIG["connect_timeout_s"]
                    )
        except (OSError, asyncio.TimeoutError) as e:
            raise AgentUnreachableError(f"{host}:{port}", f"link to {vid_text(neighbor)}: {e}") from e
        write_frame(writer, Handshake(job_id=self.job_id, vid=self.vid.hex()).to_json().encode("utf-8"))
        await writer.drain()
        self._attach(neighbor, reader, writer)

    async def connect_links(self):
        for neighbor in sorted(self.router.links):
            if self.vid < neighbor and neighbor not in self.streams:
                await self.dial(neighbor)

    def _attach(self, neighbor: Vid, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        previous = self.streams.get(neighbor)
        if previous is not None and previous is not writer:
            previous.close()
        self.streams[neighbor] = writer
        task = asyncio.create_task(self._read_loop(neighbor, reader, writer))
        self._tasks.append(task)
        self._readers.append((reader, writer, task))
        self._wake[neighbor].set()
        if self.started:
            self.send_control(ControlSubtype.RESUME, only=neighbor)

    def _on_vid_map(self, mapping: Dict[Vid, Address]):
        if not self.started:
            return
        for vid in mapping:
            if vid not in self.router.links:
                continue
            writer = self.streams.pop(vid, None)
            if writer is not None:
                writer.close()
            if self.vid < vid:
                self.loop.call_soon_threadsafe(self._spawn_dial, vid)

    def _spawn_dial(self, neighbor: Vid):
        self._tasks.append(asyncio.create_task(self.dial(neighbor)))

    # piano dati

    async def _read_loop(self, neighbor: Vid, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        try:
            while True:
                raw = await read_frame(reader)
                self.router.ingress(neighbor, raw)
                self._ingress.set()
        except asyncio.IncompleteReadError as e:
            if self._draining and (e.partial or e.expected != _FRAME.size):
                # frame troncato dalla chiusura dello stream
                self.router.links[neighbor].counters.migration_loss += 1
            logger.debug("[%s] stream verso %s chiuso", vid_text(self.vid), vid_text(neighbor))
        except ConnectionError:
            logger.debug("[%s] stream verso %s chiuso", vid_text(self.vid), vid_text(neighbor))
        except ProtocolError as e:
            logger.warning("[%s] errore di protocollo da %s: %s", vid_text(self.vid), vid_text(neighbor), e)
        finally:
            if self.streams.get(neighbor) is writer:
                del self.streams[neighbor]
            writer.close()

    async def _process_loop(self):
        while True:
            await self._ingress.wait()
            self._ingress.clear()
            handled = 0
            while self.router.pending_ingress():
                wait = self.router.ingress_wait(self.loop.time())
                if wait > 0:
                    await asyncio.sleep(wait)
                packet = self.router.next_ingress(self.loop.time())
                if packet is not None:
                    self.router.process_one(packet)
                handled += 1
                if handled % 64 == 0:
                    await asyncio.sleep(0)

    async def _egress_pump(self, neighbor: Vid):
        wake = self._wake[neighbor]
        while True:
            await wake.wait()
            wake.clear()
            while True:
                item = self.router.transmit_next(neighbor, self.loop.time())
                if item is None:
                    break
                packet, decision = item
                if decision.dropped:
                    continue
                self._enqueue_release(neighbor, decision.deliver_at, packet.encode())
                busy = decision.transmit_end - self.loop.time()
                await asyncio.sleep(busy if busy > 0 else 0)

    def _enqueue_release(self, neighbor: Vid, deliver_at: float, raw: bytes):
        line = self._delay_lines[neighbor]
        line.append((deliver_at, raw))
        if self._release_handles[neighbor] is None:
            self._arm(neighbor)

    def _arm(self, neighbor: Vid):
        deliver_at = self._delay_lines[neighbor][0][0]
        self._release_handles[neighbor] = self.loop.call_at(deliver_at, self._release, neighbor)

    def _release(self, neighbor: Vid):
        """Scrive in ordine FIFO tutti i pacchetti il cui ritardo e' trascorso"""
        self._release_handles[neighbor] = None
        line = self._delay_lines[neighbor]
        now = self.loop.time()
        while line and line[0][0] <= now:
            _, raw = line.popleft()
            writer = self.streams.get(neighbor)
            if writer is None or writer.is_closing():
                self.router.links[neighbor].counters.migration_loss += 1
                continue
            write_frame(writer, raw)
        if line:
            self._arm(neighbor)

    def send_control(self, subtype: ControlSubtype, body: bytes = b"", only: Optional[Vid] = None):
        for neighbor, raw in self.router.control_packets(subtype, body):
            if only is not None and neighbor != only:
                continue
            writer = self.streams.get(neighbor)
            if writer is not None and not writer.is_closing():
                write_frame(writer, raw)

    # ciclo di vita

    async def start(self):
        self.started = True
        self._draining = False
        for neighbor in sorted(self.router.links):
            self._tasks.append(asyncio.create_task(self._egress_pump(neighbor)))
        self._tasks.append(asyncio.create_task(self._process_loop()))
        if self.router.pending_ingress():
            self._ingress.set()
        if self.app is not None:
            self._runner = AppRunner(self.router, self.app)
            self._runner.start()

    async def stop(self):
        self.started = False
        if self._runner is not None:
            await asyncio.to_thread(self._runner.stop)
            self._runner = None
        await self._drain_streams()
        for neighbor, handle in self._release_handles.items():
            if handle is not None:
                handle.cancel()
            self._release_handles[neighbor] = None
            # pacchetti gia' emulati ma non ancora scritti: persi in volo
            self.router.links[neighbor].counters.migration_loss += len(self._delay_lines[neighbor])
            self._delay_lines[neighbor].clear()
        for task in self._tasks:
            task.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self._tasks.clear()
        self._readers.clear()
        for writer in list(self.streams.values()):
            writer.close()
        self.streams.clear()
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()
            self.server = None

    async def _drain_streams(self):
        """Chiude gli stream: i frame gia' ricevuti e non letti finiscono nella coda di ingresso"""
        self._draining = True
        pending = [(reader, writer, task) for reader, writer, task in self._readers if not task.done()]
        for reader, writer, _ in pending:
            writer.close()
            reader.feed_eof()
        await asyncio.gather(*(task for _, _, task in pending), return_exceptions=True)


class OverlayHost:
    """Gli SRouter di un job ospitati da un agente, in tempo reale"""

    def __init__(
        self,
        job_id: str,
        topology: Topology,
        routes: RouteSet,
        vid_map: Dict[Vid, Address],
        seed: int = 0,
        handler_params: Optional[Dict[str, Dict[str, Any]]] = None,
        app_params: Optional[Dict[Vid, Dict[str, Any]]] = None,
        **router_kwargs: Any
    ):
        self.job_id = job_id
        self.topology = topology
        self.route_set = routes
        self.vid_map = dict(vid_map)
        self.seed = seed
        self.handler_params = handler_params or {}
        self.app_params = app_params or {}
        self.router_kwargs = router_kwargs
        self.routers: Dict[Vid, RealtimeRouter] = {}

    def _router_kwargs(self) -> Dict[str, Any]:
        return dict(
            seed=self.seed,
            clock=asyncio.get_running_loop().time,
            vid_map=self.vid_map,
            handler_params=self.handler_params,
            **self.router_kwargs
        )

    def _app_for(self, vid: Vid) -> Optional[UserApp]:
        name = self.topology.router(vid).app
        return resolve_app(name, self.app_params.get(vid)) if name else None

    async def _bind(self, router: SRouter) -> RealtimeRouter:
        realtime = RealtimeRouter(router, self.job_id, self._app_for(router.vid))
        host, port = self.vid_map[router.vid]
        await realtime.listen(host, port)
        self.routers[router.vid] = realtime
        return realtime

    async def deploy(self, vids: List[Vid]) -> List[Vid]:
        """Crea e mette in ascolto i router; restituisce i VID con porta gia' occupata"""
        conflicts: List[Vid] = []
        for vid in sorted(vids):
            router = SRouter(vid, self.topology, self.route_set.table(vid), **self._router_kwargs())
            try:
                await self._bind(router)
            except PortConflictError:
                conflicts.append(vid)
        return conflicts

    async def connect(self):
        for vid in sorted(self.routers):
            await self.routers[vid].connect_links()

    async def start(self):
        for vid in sorted(self.routers):
            await self.routers[vid].start()

    async def stop(self):
        for vid in sorted(self.routers):
            await self.routers[vid].stop()

    def apply_vid_map(self, version: int, mapping: Dict[Vid, Address]):
        self.vid_map.update(mapping)
        for realtime in self.routers.values():
            realtime.router.apply_vid_map(version, mapping)

    async def export_router(self, vid: Vid) -> str:
        """Sospende il router, lo ferma e ne restituisce il checkpoint JSON"""
        realtime = self.routers.pop(vid)
        realtime.send_control(ControlSubtype.PAUSE)
        for writer in list(realtime.streams.values()):
            await writer.drain()
        # i vicini svuotano le linee di ritardo verso questo router
        await asyncio.sleep(realtime.settle_s())
        await realtime.stop()
        return realtime.router.checkpoint().to_json()

    async def import_router(self, checkpoint_json: str, address: Address) -> RealtimeRouter:
        """Ripristina un router migrato e lo mette in ascolto; il traffico riparte con resume()"""
        checkpoint = RouterCheckpoint.from_json(checkpoint_json)
        vid = bytes.fromhex(checkpoint.vid)
        self.vid_map[vid] = address
        router = SRouter.from_checkpoint(
            checkpoint, self.topology, self.route_set.table(vid), **self._router_kwargs()
        )
        router.vid_map[vid] = address
        return await self._bind(router)

    def pause(self, vid: Vid):
        self.routers[vid].send_control(ControlSubtype.PAUSE)

    async def resume(self, vid: Vid):
        realtime = self.routers[vid]
        if not realtime.started:
            await realtime.connect_links()
            await realtime.start()
        realtime.send_control(ControlSubtype.RESUME)

    def collect_logs(self) -> Dict[Vid, str]:
        return {vid: realtime.router.event_log.to_csv() for vid, realtime in sorted(self.routers.items())}

    def introspect(self) -> Dict[Vid, RouterSnapshot]:
        return {vid: realtime.router.app_introspect() for vid, realtime in sorted(self.routers.items())}

    def app(self, vid: Vid) -> Optional[UserApp]:
        return self.routers[vid].app
