"""Protocollo di controllo tra agenti.

Ogni messaggio e' un frame: lunghezza su 4 byte big-endian, un byte di
opcode, poi il payload in JSON canonico (chiavi ordinate, separatori
compatti, UTF-8). Le risposte usano l'opcode ACK e la convenzione
`{"success": bool, "error": str}`.

Il trasporto e' intercambiabile: TCP su asyncio per i deployment reali,
in-process con iniezione di guasti per i test.
"""
import asyncio
import enum
import errno
import json
import logging
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Awaitable, Callable, Dict, List, Optional, Set, Tuple

from dataclasses_json import dataclass_json

from config.settings import ERROR_MESSAGES
from services.exceptions import AgentUnreachableError, PortConflictError, ProtocolError

logger = logging.getLogger(__name__)

_FRAME = struct.Struct(">I")
MAX_MESSAGE = 256 * 1024 * 1024


class Opcode(enum.IntEnum):
    ELECTION = 1
    ANSWER = 2
    COORDINATOR = 3
    SUBMIT = 4
    ASSIGN = 5
    ACK = 6
    SAMPLE = 7
    MIGRATE = 8
    PAUSE = 9
    RESUME = 10
    VIDMAP = 11
    COLLECT = 12
    STATUS = 13


@dataclass(frozen=True, order=True)
class AgentId:
    """Identita' di un agente; l'ordine totale (host, port) decide le elezioni"""
    host: str
    port: int

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "AgentId":
        host, sep, port = text.strip().rpartition(":")
        if not sep or not host or not port.isdigit() or not 0 < int(port) < 65536:
            raise ValueError(f"{ERROR_MESSAGES['invalid_peers']}: {text!r}")
        return cls(host, int(port))


def canonical_json(payload: Dict[str, Any]) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


@dataclass(frozen=True)
class Message:
    opcode: Opcode
    payload: Dict[str, Any] = field(default_factory=dict)

    def encode(self) -> bytes:
        body = bytes([self.opcode]) + canonical_json(self.payload)
        return _FRAME.pack(len(body)) + body

    @classmethod
    def decode(cls, body: bytes) -> "Message":
        """Decodifica un frame senza il prefisso di lunghezza"""
        if not body:
            raise ProtocolError("empty control frame")
        try:
            opcode = Opcode(body[0])
        except ValueError as e:
            raise ProtocolError(f"unknown opcode {body[0]}") from e
        try:
            payload = json.loads(body[1:].decode("utf-8")) if len(body) > 1 else {}
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ProtocolError(f"invalid payload for {opcode.name}: {e}") from e
        if not isinstance(payload, dict):
            raise ProtocolError(f"payload for {opcode.name} is not an object")
        return cls(opcode, payload)

    @property
    def success(self) -> bool:
        return bool(self.payload.get("success", True))

    @property
    def error(self) -> str:
        return str(self.payload.get("error", ""))


def ack(**payload: Any) -> Message:
    return Message(Opcode.ACK, {"success": True, **payload})


def nack(error: str, **payload: Any) -> Message:
    return Message(Opcode.ACK, {"success": False, "error": error, **payload})


async def read_message(reader: asyncio.StreamReader) -> Message:
    (length,) = _FRAME.unpack(await reader.readexactly(_FRAME.size))
    if length > MAX_MESSAGE:
        raise ProtocolError(f"control frame too large: {length} bytes")
    return Message.decode(await reader.readexactly(length))


async def write_message(writer: asyncio.StreamWriter, message: Message):
    writer.write(message.encode())
    await writer.drain()


# Payload strutturati

@dataclass_json
@dataclass
class SamplePayload:
    agent: str
    capacity: Dict[str, float]
    load: Dict[str, float]
    timestamp: float
    # job_id -> VID esadecimale -> contatori del router
    counters: Dict[str, Dict[str, Dict[str, int]]] = field(default_factory=dict)


@dataclass_json
@dataclass
class AssignPayload:
    job_id: str
    archive: str  # base64
    vids: List[str]  # esadecimali
    vid_map: Dict[str, List[Any]]  # esadecimale -> [host, porta]
    version: int = 0
    checkpoint: Optional[str] = None


@dataclass_json
@dataclass
class CollectPayload:
    agent: str
    logs: Dict[str, str] = field(default_factory=dict)
    apps: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    counters: Dict[str, Dict[str, int]] = field(default_factory=dict)


Handler = Callable[[Message], Awaitable[Message]]


class Transport(ABC):
    """Canale richiesta/risposta tra agenti"""

    @abstractmethod
    async def serve(self, agent: AgentId, handler: Handler):
        pass

    @abstractmethod
    async def request(self, target: AgentId, message: Message, timeout: float) -> Message:
        """Invia un messaggio e attende la risposta; AgentUnreachableError se non arriva"""

    @abstractmethod
    async def close(self):
        pass


async def _answer(handler: Handler, message: Message) -> Message:
    try:
        return await handler(message)
    except Exception as e:
        logger.exception("Errore nella gestione di %s", message.opcode.name)
        return nack(f"{type(e).__name__}: {e}")


class TcpTransport(Transport):
    """Una connessione per richiesta, frame a lunghezza su TCP"""

    def __init__(self):
        self.server: Optional[asyncio.AbstractServer] = None
        self.agent: Optional[AgentId] = None

    async def serve(self, agent: AgentId, handler: Handler):
        async def on_client(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
            try:
                while True:
                    message = await read_message(reader)
                    await write_message(writer, await _answer(handler, message))
            except (asyncio.IncompleteReadError, ConnectionError):
                pass
            except ProtocolError as e:
                logger.warning("[%s] frame di controllo non valido: %s", agent, e)
            finally:
                writer.close()

        try:
            self.server = await asyncio.start_server(on_client, agent.host, agent.port)
        except OSError as e:
            if e.errno == errno.EADDRINUSE:
                raise PortConflictError(agent.port, {"agent": str(agent)}) from e
            raise
        self.agent = agent

    async def _exchange(self, target: AgentId, message: Message) -> Message:
        reader, writer = await asyncio.open_connection(target.host, target.port)
        try:
            await write_message(writer, message)
            return await read_message(reader)
        finally:
            writer.close()

    async def request(self, target: AgentId, message: Message, timeout: float) -> Message:
        try:
            return await asyncio.wait_for(self._exchange(target, message), timeout)
        except (OSError, asyncio.TimeoutError, asyncio.IncompleteReadError, ProtocolError) as e:
            raise AgentUnreachableError(str(target), f"{message.opcode.name}: {e or type(e).__name__}") from e

    async def close(self):
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()
            self.server = None


class LocalNetwork:
    """Rete in-process tra agenti, con crash e partizioni su comando"""

    def __init__(self):
        self.endpoints: Dict[AgentId, Handler] = {}
        self.down: Set[AgentId] = set()
        self._cuts: Set[frozenset] = set()
        # (mittente, destinatario, opcode, payload) di ogni messaggio consegnato
        self.trace: List[Tuple[str, str, Opcode, Dict[str, Any]]] = []

    def transport(self) -> "LocalTransport":
        return LocalTransport(self)

    def crash(self, agent: AgentId):
        self.down.add(agent)

    def recover(self, agent: AgentId):
        self.down.discard(agent)

    def partition(self, *groups: List[AgentId]):
        for i, group in enumerate(groups):
            for other in groups[i + 1:]:
                for a in group:
                    for b in other:
                        self._cuts.add(frozenset((a, b)))

    def heal(self):
        self._cuts.clear()

    def reachable(self, src: Optional[AgentId], dst: AgentId) -> bool:
        if dst not in self.endpoints or dst in self.down:
            return False
        if src is None:
            return True
        return src not in self.down and frozenset((src, dst)) not in self._cuts


class LocalTransport(Transport):
    def __init__(self, network: LocalNetwork):
        self.network = network
        self.agent: Optional[AgentId] = None

    async def serve(self, agent: AgentId, handler: Handler):
        if agent in self.network.endpoints:
            raise PortConflictError(agent.port, {"agent": str(agent)})
        self.network.endpoints[agent] = handler
        self.agent = agent

    async def request(self, target: AgentId, message: Message, timeout: float) -> Message:
        await asyncio.sleep(0)
        if not self.network.reachable(self.agent, target):
            raise AgentUnreachableError(str(target), f"{message.opcode.name}: unreachable")
        # passa dalla codifica per esercitare il formato dei frame
        delivered = Message.decode(message.encode()[_FRAME.size:])
        self.network.trace.append((str(self.agent), str(target), delivered.opcode, delivered.payload))
        try:
            reply = await asyncio.wait_for(_answer(self.network.endpoints[target], delivered), timeout)
        except asyncio.TimeoutError as e:
            raise AgentUnreachableError(str(target), f"{message.opcode.name}: timeout") from e
        if not self.network.reachable(self.agent, target):
            raise AgentUnreachableError(str(target), f"{message.opcode.name}: lost reply")
        return Message.decode(reply.encode()[_FRAME.size:])

    async def close(self):
        if self.agent is not None and self.network.endpoints.get(self.agent) is not None:
            del self.network.endpoints[self.agent]
        self.agent = None
