"""ihandler: funzioni per-pacchetto applicate in catena all'ingresso dell'SRouter.

Gli handler sono registrati per nome e selezionati dall'archivio del job
(directory `handlers/` con un file di parametri per nome). Il bypass handler
chiude sempre la catena e non e' registrabile.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Type, Union

from config.settings import ERROR_MESSAGES
from services.exceptions import UnknownHandlerError
from services.packet import Packet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Continue:
    packet: Packet


@dataclass(frozen=True)
class Drop:
    reason: str


IHandlerOutcome = Union[Continue, Drop]


class IHandler(ABC):
    """Interfaccia base degli handler della catena di ingresso"""

    name = "abstract"

    def __init__(self, **params: Any):
        self.params = dict(params)

    @abstractmethod
    def handle(self, router: Any, packet: Packet) -> IHandlerOutcome:
        """Elabora il pacchetto; router e' l'SRouter che lo ospita"""

    def state(self) -> Dict[str, Any]:
        """Stato da preservare nella migrazione"""
        return {}

    def restore_state(self, state: Dict[str, Any]):
        pass

    def describe(self) -> Dict[str, Any]:
        return {"name": self.name, "params": self.params, "state": self.state()}


class BypassHandler(IHandler):
    """Ultimo anello della catena: inserisce il pacchetto in cqueue o equeue"""

    name = "bypass"

    def handle(self, router: Any, packet: Packet) -> IHandlerOutcome:
        return Continue(packet)


HANDLER_REGISTRY: Dict[str, Type[IHandler]] = {}


def register_handler(name: str) -> Callable[[Type[IHandler]], Type[IHandler]]:
    def decorator(cls: Type[IHandler]) -> Type[IHandler]:
        cls.name = name
        HANDLER_REGISTRY[name] = cls
        return cls
    return decorator


def resolve_handler(name: str, params: Optional[Dict[str, Any]] = None) -> IHandler:
    if name == BypassHandler.name or name not in HANDLER_REGISTRY:
        raise UnknownHandlerError(f"{ERROR_MESSAGES['unknown_handler']}: {name}")
    return HANDLER_REGISTRY[name](**(params or {}))


@register_handler("drop_all")
class DropAllHandler(IHandler):
    def handle(self, router: Any, packet: Packet) -> IHandlerOutcome:
        return Drop(self.params.get("reason", "drop_all"))


@register_handler("counter")
class CounterHandler(IHandler):
    """Conta i pacchetti che lo attraversano"""

    def __init__(self, **params: Any):
        super().__init__(**params)
        self.count = 0

    def handle(self, router: Any, packet: Packet) -> IHandlerOutcome:
        self.count += 1
        return Continue(packet)

    def state(self) -> Dict[str, Any]:
        return {"count": self.count}

    def restore_state(self, state: Dict[str, Any]):
        self.count = int(state.get("count", 0))


@register_handler("append_byte")
class AppendByteHandler(IHandler):
    """Marca il pacchetto aggiungendo un byte al payload a ogni hop"""

    def handle(self, router: Any, packet: Packet) -> IHandlerOutcome:
        if packet.dst == router.vid:
            return Continue(packet)
        marker = int(self.params.get("byte", 0x2A)) & 0xFF
        return Continue(packet.with_payload(packet.payload + bytes([marker])))


@register_handler("log_packets")
class LogPacketsHandler(IHandler):
    def handle(self, router: Any, packet: Packet) -> IHandlerOutcome:
        logger.debug(
            "[%r] pacchetto %r -> %r ttl=%d size=%d",
            router.vid, packet.src, packet.dst, packet.ttl, packet.wire_size
        )
        return Continue(packet)


@register_handler("drop_from")
class DropFromHandler(IHandler):
    """Scarta i pacchetti provenienti da una sorgente data"""

    def handle(self, router: Any, packet: Packet) -> IHandlerOutcome:
        source = str(self.params.get("src", "")).encode("utf-8")
        if packet.src == source:
            return Drop("filtered")
        return Continue(packet)
