import pytest

from services.exceptions import MalformedPacketError, PayloadTooLargeError
from services.packet import MAX_PAYLOAD, ControlSubtype, Packet, PacketType, decode


def test_encode_layout():
    raw = Packet.data(b"a", b"bc", b"xyz", ttl=9).encode()
    assert raw[:2] == b"\x4c\x4c"
    assert raw[2] == 1
    assert raw[3] == PacketType.DATA
    assert raw[4] == 9
    assert raw[5:7] == b"\x01a"
    assert raw[7:10] == b"\x02bc"
    assert raw[10:14] == b"\x00\x00\x00\x03"
    assert raw[14:] == b"xyz"
    assert len(raw) == Packet.data(b"a", b"bc", b"xyz").wire_size


def test_decode_restores_fields():
    packet = Packet.control(b"src", b"dst", ControlSubtype.VIDMAP, b"\x00\x07")
    decoded = decode(packet.encode())
    assert decoded == packet
    assert decoded.control_subtype is ControlSubtype.VIDMAP


def test_binary_vids():
    packet = Packet.data(b"\x00\xff", b"\x01", b"")
    assert decode(packet.encode()).src == b"\x00\xff"


@pytest.mark.parametrize("raw", [
    b"",
    b"\x4c\x4c\x01",
    b"\x00\x00\x01\x00\x40\x01a\x01b\x00\x00\x00\x00",
    b"\x4c\x4c\x02\x00\x40\x01a\x01b\x00\x00\x00\x00",
    b"\x4c\x4c\x01\x07\x40\x01a\x01b\x00\x00\x00\x00",
    b"\x4c\x4c\x01\x00\x40\x00\x01b\x00\x00\x00\x00",
    b"\x4c\x4c\x01\x00\x40\x01a\x01b\x00\x00\x00\x05ab",
    b"\x4c\x4c\x01\x00\x40\x01a\x01b\x00\x00\x00\x00extra",
])
def test_malformed_input_rejected(raw):
    with pytest.raises(MalformedPacketError):
        decode(raw)


def test_oversized_length_field_rejected():
    raw = b"\x4c\x4c\x01\x00\x40\x01a\x01b" + (MAX_PAYLOAD + 1).to_bytes(4, "big")
    with pytest.raises(MalformedPacketError):
        decode(raw)


def test_payload_too_large():
    with pytest.raises(PayloadTooLargeError):
        Packet.data(b"a", b"b", bytes(MAX_PAYLOAD + 1)).encode()
    assert len(decode(Packet.data(b"a", b"b", bytes(MAX_PAYLOAD)).encode()).payload) == MAX_PAYLOAD


def test_invalid_ttl_and_vid():
    with pytest.raises(MalformedPacketError):
        Packet.data(b"a", b"b", b"", ttl=256).encode()
    with pytest.raises(MalformedPacketError):
        Packet.data(b"", b"b", b"").encode()


def test_ingress_link_not_on_wire():
    packet = Packet.data(b"a", b"b", b"p").arriving_from(b"n")
    assert packet.ingress_link == b"n"
    assert decode(packet.encode()).ingress_link is None
