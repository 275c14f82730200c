"""Applicazioni utente collegate a un SRouter tramite send/recv.

Le applicazioni sono scritte a callback (`start`, `on_packet`, timer) sopra
l'API sincrona del router, cosi' la stessa classe gira sia nel simulatore a
tempo virtuale sia nel backend in tempo reale.
"""
import logging
import struct
from abc import ABC, abstractmethod
from typing import Any, Callable, Dict, List, Optional, Type

from config.settings import ERROR_MESSAGES
from services.exceptions import LiteLabError, UnknownHandlerError
from services.packet import DEFAULT_TTL, Packet
from services.topology import Vid, to_vid

logger = logging.getLogger(__name__)

_SEQ = struct.Struct(">Q")
_PING = struct.Struct(">Qd")


class AppContext(ABC):
    """Cio' che un'applicazione vede del proprio router"""

    vid: Vid

    @abstractmethod
    def now(self) -> float:
        pass

    @abstractmethod
    def send(self, dst: Vid, payload: bytes, ttl: int = DEFAULT_TTL):
        pass

    @abstractmethod
    def call_later(self, delay: float, callback: Callable[[], None]):
        pass

    @abstractmethod
    def backlog(self) -> int:
        """Pacchetti in attesa nelle code di uscita del router"""

    @abstractmethod
    def introspect(self) -> Any:
        pass

    def header_size(self, dst: Vid) -> int:
        return Packet.data(self.vid, dst, b"").wire_size


class UserApp(ABC):
    name = "abstract"

    def __init__(self, **params: Any):
        self.params = dict(params)
        self.stopped = False

    def start(self, ctx: AppContext):
        pass

    @abstractmethod
    def on_packet(self, ctx: AppContext, packet: Packet):
        pass

    def stop(self, ctx: AppContext):
        self.stopped = True

    def report(self) -> Dict[str, Any]:
        return {"app": self.name}

    def _dst(self) -> Vid:
        if "dst" not in self.params:
            raise LiteLabError(f"application {self.name} requires a 'dst' parameter")
        return to_vid(self.params["dst"])


APP_REGISTRY: Dict[str, Type[UserApp]] = {}


def register_app(name: str) -> Callable[[Type[UserApp]], Type[UserApp]]:
    def decorator(cls: Type[UserApp]) -> Type[UserApp]:
        cls.name = name
        APP_REGISTRY[name] = cls
        return cls
    return decorator


def resolve_app(name: str, params: Optional[Dict[str, Any]] = None) -> UserApp:
    if name not in APP_REGISTRY:
        raise UnknownHandlerError(f"{ERROR_MESSAGES['unknown_handler']}: application {name}")
    return APP_REGISTRY[name](**(params or {}))


@register_app("echo")
class EchoApp(UserApp):
    """Rimanda ogni pacchetto al mittente con lo stesso payload"""

    def __init__(self, **params: Any):
        super().__init__(**params)
        self.echoed = 0

    def on_packet(self, ctx: AppContext, packet: Packet):
        ctx.send(packet.src, packet.payload)
        self.echoed += 1

    def report(self) -> Dict[str, Any]:
        return {"app": self.name, "echoed": self.echoed}


@register_app("sink")
class SinkApp(UserApp):
    """Conta pacchetti e byte ricevuti; i primi 8 byte del payload sono il numero di sequenza"""

    def __init__(self, **params: Any):
        super().__init__(**params)
        self.received = 0
        self.bytes_received = 0
        self.first_at: Optional[float] = None
        self.first_size = 0
        self.last_at: Optional[float] = None
        self.sequences: List[int] = []
        self.payloads: List[bytes] = []
        self.buckets: Dict[int, int] = {}

    def on_packet(self, ctx: AppContext, packet: Packet):
        now = ctx.now()
        if self.first_at is None:
            self.first_at = now
            self.first_size = packet.wire_size
        self.last_at = now
        self.received += 1
        self.bytes_received += packet.wire_size
        bucket_s = float(self.params.get("bucket_s", 0.0))
        if bucket_s > 0:
            index = int((now - self.first_at) // bucket_s)
            self.buckets[index] = self.buckets.get(index, 0) + packet.wire_size
        if len(packet.payload) >= _SEQ.size:
            self.sequences.append(_SEQ.unpack_from(packet.payload)[0])
        if self.params.get("keep_payloads"):
            self.payloads.append(packet.payload)

    def goodput_kbps(self) -> float:
        """Throughput misurato tra il primo e l'ultimo arrivo"""
        if self.first_at is None or self.last_at is None or self.last_at <= self.first_at:
            return 0.0
        bits = (self.bytes_received - self.first_size) * 8
        return bits / (self.last_at - self.first_at) / 1000.0

    def bucket_rates_kbps(self) -> List[float]:
        """Throughput per finestra di bucket_s secondi, escluse prima e ultima finestra"""
        bucket_s = float(self.params.get("bucket_s", 0.0))
        if bucket_s <= 0 or len(self.buckets) < 3:
            return []
        last = max(self.buckets)
        return [self.buckets.get(i, 0) * 8 / bucket_s / 1000.0 for i in range(1, last)]

    def report(self) -> Dict[str, Any]:
        return {
            "app": self.name,
            "received": self.received,
            "bytes_received": self.bytes_received,
            "goodput_kbps": self.goodput_kbps()
        }


@register_app("counted_stream")
class CountedStreamApp(UserApp):
    """Invia `count` pacchetti numerati mantenendo al piu' `window` pacchetti in coda"""

    def __init__(self, **params: Any):
        super().__init__(**params)
        self.sent = 0

    def start(self, ctx: AppContext):
        self._pump(ctx)

    def _pump(self, ctx: AppContext):
        if self.stopped:
            return
        dst = self._dst()
        count = int(self.params.get("count", 1000))
        size = int(self.params.get("size", 64))
        window = int(self.params.get("window", 32))
        interval = float(self.params.get("interval_s", 0.0))
        padding = max(0, size - ctx.header_size(dst) - _SEQ.size)

        while self.sent < count and ctx.backlog() < window:
            ctx.send(dst, _SEQ.pack(self.sent) + bytes(padding))
            self.sent += 1
            if interval > 0:
                break
        if self.sent < count:
            ctx.call_later(interval or float(self.params.get("poll_s", 0.001)), lambda: self._pump(ctx))

    def on_packet(self, ctx: AppContext, packet: Packet):
        pass

    def report(self) -> Dict[str, Any]:
        return {"app": self.name, "sent": self.sent}


@register_app("saturating_sender")
class SaturatingSenderApp(UserApp):
    """Tiene piena la coda d'uscita verso dst per duration_s secondi"""

    def __init__(self, **params: Any):
        super().__init__(**params)
        self.sent = 0
        self.started_at: Optional[float] = None

    def start(self, ctx: AppContext):
        self.started_at = ctx.now()
        self._pump(ctx)

    def _pump(self, ctx: AppContext):
        if self.stopped:
            return
        duration = float(self.params.get("duration_s", 30.0))
        if ctx.now() - (self.started_at or 0.0) >= duration:
            return
        dst = self._dst()
        wire_size = int(self.params.get("wire_size", 1518))
        window = int(self.params.get("window", 16))
        payload_size = max(_SEQ.size, wire_size - ctx.header_size(dst))
        while ctx.backlog() < window:
            ctx.send(dst, _SEQ.pack(self.sent) + bytes(payload_size - _SEQ.size))
            self.sent += 1
        ctx.call_later(float(self.params.get("poll_s", 0.002)), lambda: self._pump(ctx))

    def on_packet(self, ctx: AppContext, packet: Packet):
        pass

    def report(self) -> Dict[str, Any]:
        return {"app": self.name, "sent": self.sent}


@register_app("pinger")
class PingerApp(UserApp):
    """Ping sequenziale: il prossimo parte alla risposta o allo scadere del timeout"""

    def __init__(self, **params: Any):
        super().__init__(**params)
        self.rtts: List[float] = []
        self.lost = 0
        self.seq = 0
        self._outstanding: Optional[int] = None

    def start(self, ctx: AppContext):
        self._ping(ctx)

    def _ping(self, ctx: AppContext):
        if self.stopped or self.seq >= int(self.params.get("count", 100)):
            self._outstanding = None
            return
        dst = self._dst()
        size = int(self.params.get("size", 64))
        padding = max(0, size - ctx.header_size(dst) - _PING.size)
        seq = self.seq
        self.seq += 1
        self._outstanding = seq
        ctx.send(dst, _PING.pack(seq, ctx.now()) + bytes(padding))
        ctx.call_later(float(self.params.get("timeout_s", 1.0)), lambda: self._expire(ctx, seq))

    def _expire(self, ctx: AppContext, seq: int):
        if self._outstanding == seq:
            self.lost += 1
            self._ping(ctx)

    def on_packet(self, ctx: AppContext, packet: Packet):
        if len(packet.payload) < _PING.size:
            return
        seq, sent_at = _PING.unpack_from(packet.payload)
        if seq != self._outstanding:
            return
        self.rtts.append(ctx.now() - sent_at)
        self._outstanding = None
        interval = float(self.params.get("interval_s", 0.0))
        if interval > 0:
            ctx.call_later(interval, lambda: self._ping(ctx))
        else:
            self._ping(ctx)

    @property
    def done(self) -> bool:
        return self.seq >= int(self.params.get("count", 100)) and self._outstanding is None

    def report(self) -> Dict[str, Any]:
        mean = sum(self.rtts) / len(self.rtts) if self.rtts else 0.0
        return {"app": self.name, "replies": len(self.rtts), "lost": self.lost, "mean_rtt_s": mean}
