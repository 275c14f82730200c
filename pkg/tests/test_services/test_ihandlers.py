import pytest

from services.exceptions import UnknownHandlerError
from services.ihandlers import (
    HANDLER_REGISTRY,
    BypassHandler,
    Continue,
    Drop,
    IHandler,
    register_handler,
    resolve_handler
)
from services.packet import Packet


class _Router:
    vid = b"r"


def test_builtin_handlers_registered():
    for name in ("drop_all", "counter", "append_byte", "log_packets", "drop_from"):
        assert name in HANDLER_REGISTRY
    assert "bypass" not in HANDLER_REGISTRY


def test_resolve_unknown_or_bypass():
    with pytest.raises(UnknownHandlerError):
        resolve_handler("nope")
    with pytest.raises(UnknownHandlerError):
        resolve_handler("bypass")


def test_counter_state_survives_restore():
    counter = resolve_handler("counter")
    packet = Packet.data(b"a", b"b", b"")
    for _ in range(3):
        assert isinstance(counter.handle(_Router(), packet), Continue)
    clone = resolve_handler("counter")
    clone.restore_state(counter.state())
    assert clone.count == 3
    assert counter.describe() == {"name": "counter", "params": {}, "state": {"count": 3}}


def test_append_byte_skips_final_hop():
    handler = resolve_handler("append_byte", {"byte": 7})
    passing = handler.handle(_Router(), Packet.data(b"a", b"z", b"x"))
    assert passing.packet.payload == b"x\x07"
    arrived = handler.handle(_Router(), Packet.data(b"a", b"r", b"x"))
    assert arrived.packet.payload == b"x"


def test_drop_handlers():
    assert resolve_handler("drop_all").handle(_Router(), Packet.data(b"a", b"b", b"")) == Drop("drop_all")
    drop_from = resolve_handler("drop_from", {"src": "a"})
    assert isinstance(drop_from.handle(_Router(), Packet.data(b"a", b"b", b"")), Drop)
    assert isinstance(drop_from.handle(_Router(), Packet.data(b"c", b"b", b"")), Continue)


def test_custom_handler_registration():
    @register_handler("tag_test")
    class TagHandler(IHandler):
        def handle(self, router, packet):
            return Continue(packet.with_payload(b"tag"))

    try:
        handler = resolve_handler("tag_test")
        assert handler.name == "tag_test"
        assert handler.handle(_Router(), Packet.data(b"a", b"b", b"")).packet.payload == b"tag"
    finally:
        HANDLER_REGISTRY.pop("tag_test", None)


def test_bypass_passes_through():
    packet = Packet.data(b"a", b"b", b"p")
    assert BypassHandler().handle(_Router(), packet) == Continue(packet)
