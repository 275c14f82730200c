"""Emulazione per-link di perdita, banda e ritardo all'interno dell'SRouter.

Ordine applicato in uscita: perdita (un pacchetto perso non consuma banda),
shaping a token bucket con tempo di serializzazione size/banda, poi ritardo
di propagazione a partire dalla fine della trasmissione.
"""
import hashlib
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, Optional

from config.settings import APP_CONFIG
from services.packet import Packet
from services.topology import DROPTAIL, LinkSpec, QueuePolicy, Vid

logger = logging.getLogger(__name__)


def derive_seed(*parts: object) -> int:
    """Seed stabile tra processi (hash() di Python e' randomizzato)"""
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


class TokenBucket:
    """Token bucket in byte: rate in byte/s, capacity = burst massimo"""

    def __init__(self, rate: float, capacity: float, now: float = 0.0):
        if rate <= 0 or capacity <= 0:
            raise ValueError("token bucket requires positive rate and capacity")
        self.rate = rate
        self.capacity = capacity
        self.tokens = capacity
        self.last_update = now

    def _update_tokens(self, now: float):
        if now > self.last_update:
            self.tokens = min(self.capacity, self.tokens + (now - self.last_update) * self.rate)
            self.last_update = now

    def ready_at(self, size: int, now: float) -> float:
        """Primo istante >= now in cui un pacchetto di size byte puo' partire"""
        self._update_tokens(now)
        needed = min(size, self.capacity)
        if self.tokens >= needed:
            return now
        return max(now, self.last_update) + (needed - self.tokens) / self.rate

    def consume(self, size: int, now: float):
        self._update_tokens(now)
        # pacchetti piu' grandi del burst lasciano il bucket in debito
        self.tokens -= size


def kbps_bucket(kbps: Optional[float], burst: Optional[int] = None) -> Optional[TokenBucket]:
    if kbps is None:
        return None
    return TokenBucket(rate=kbps * 1000.0 / 8.0, capacity=burst or APP_CONFIG["srouter"]["mtu"])


class PacketQueue:
    """FIFO limitata con politica droptail o RED"""

    def __init__(self, capacity: int, policy: QueuePolicy = DROPTAIL, seed: int = 0):
        self.capacity = capacity
        self.policy = policy
        self.avg = 0.0
        self._rng = random.Random(seed)
        self._items: Deque[Packet] = deque()

    def red_probability(self) -> float:
        policy = self.policy
        if self.avg < policy.min_th:
            return 0.0
        if self.avg >= policy.max_th:
            return 1.0
        return policy.max_p * (self.avg - policy.min_th) / (policy.max_th - policy.min_th)

    def offer(self, packet: Packet) -> Optional[str]:
        """Accoda il pacchetto; restituisce il motivo dello scarto oppure None"""
        if self.policy.is_red:
            self.avg = (1.0 - self.policy.w_q) * self.avg + self.policy.w_q * len(self._items)
            probability = self.red_probability()
            if probability >= 1.0 or (probability > 0.0 and self._rng.random() < probability):
                return "red"
        if len(self._items) >= self.capacity:
            return "queue-full"
        self._items.append(packet)
        return None

    def push_front(self, packet: Packet):
        self._items.appendleft(packet)

    def pop(self) -> Packet:
        return self._items.popleft()

    def peek(self) -> Optional[Packet]:
        return self._items[0] if self._items else None

    def snapshot(self) -> List[Packet]:
        return list(self._items)

    def drain(self) -> List[Packet]:
        items = list(self._items)
        self._items.clear()
        return items

    def restore(self, packets: Iterable[Packet]):
        self._items.extend(packets)

    def __len__(self) -> int:
        return len(self._items)

    def __bool__(self) -> bool:
        return bool(self._items)


@dataclass
class LinkCounters:
    sent: int = 0
    received: int = 0
    dropped: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    migration_loss: int = 0
    drop_reasons: Dict[str, int] = field(default_factory=dict)

    def count_drop(self, reason: str):
        self.dropped += 1
        self.drop_reasons[reason] = self.drop_reasons.get(reason, 0) + 1


@dataclass(frozen=True)
class ScheduleDecision:
    dropped: bool
    reason: Optional[str] = None
    transmit_start: float = 0.0
    transmit_end: float = 0.0
    deliver_at: float = 0.0


class LinkEndpoint:
    """Stato di un link visto da un router: code, shaper, linea di ritardo, PRNG"""

    def __init__(
        self,
        owner: Vid,
        neighbor: Vid,
        spec: LinkSpec,
        inbound_spec: Optional[LinkSpec] = None,
        seed: int = 0,
        burst: Optional[int] = None
    ):
        inbound_spec = inbound_spec or spec.oriented(neighbor)
        self.owner = owner
        self.neighbor = neighbor
        self.spec = spec
        self.inbound_spec = inbound_spec
        self.ingress_queue = PacketQueue(
            inbound_spec.queue_len, inbound_spec.queue_policy, derive_seed(seed, owner, neighbor, "iq")
        )
        self.egress_queue = PacketQueue(
            spec.queue_len, spec.queue_policy, derive_seed(seed, owner, neighbor, "eq")
        )
        self.shaper = kbps_bucket(spec.bandwidth_kbps, burst)
        self.loss_rng = random.Random(derive_seed(seed, owner, neighbor, "loss"))
        self.counters = LinkCounters()
        self.busy_until = 0.0
        self.last_release = 0.0
        self.paused = False

    def serialization_time(self, size: int) -> float:
        if self.spec.bandwidth_kbps is None:
            return 0.0
        return size * 8.0 / (self.spec.bandwidth_kbps * 1000.0)

    def emulate(self, packet: Packet, now: float, aggregate: Optional[TokenBucket] = None) -> ScheduleDecision:
        """Decide perdita, inizio/fine trasmissione e istante di consegna"""
        if self.spec.loss_rate > 0 and self.loss_rng.random() < self.spec.loss_rate:
            self.counters.count_drop("loss")
            return ScheduleDecision(dropped=True, reason="loss")

        size = packet.wire_size
        start = max(now, self.busy_until)
        if self.shaper is not None:
            start = self.shaper.ready_at(size, start)
        if aggregate is not None:
            start = aggregate.ready_at(size, start)
            aggregate.consume(size, start)
        if self.shaper is not None:
            self.shaper.consume(size, start)

        end = start + self.serialization_time(size)
        self.busy_until = end
        deliver_at = max(end + self.spec.delay_ms / 1000.0, self.last_release)
        self.last_release = deliver_at
        self.counters.sent += 1
        self.counters.bytes_sent += size
        return ScheduleDecision(
            dropped=False, transmit_start=start, transmit_end=end, deliver_at=deliver_at
        )
