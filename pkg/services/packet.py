"""Formato di linea dei pacchetti SRouter (big-endian):

    magic 0x4C4C (2 B) | version 0x01 (1 B) | type (1 B) | ttl (1 B)
    | len(src) (1 B) + src | len(dst) (1 B) + dst | len(payload) (4 B) + payload
"""
import enum
import struct
from dataclasses import dataclass, replace
from typing import Optional, Tuple

from config.settings import APP_CONFIG, ERROR_MESSAGES
from services.exceptions import MalformedPacketError, PayloadTooLargeError
from services.topology import Vid

MAGIC = 0x4C4C
VERSION = 0x01
MAX_PAYLOAD = APP_CONFIG["srouter"]["max_payload"]
DEFAULT_TTL = APP_CONFIG["srouter"]["default_ttl"]

_HEAD = struct.Struct(">HBBB")
_LEN32 = struct.Struct(">I")


class PacketType(enum.IntEnum):
    DATA = 0
    CONTROL = 1


class ControlSubtype(enum.IntEnum):
    """Primo byte del payload dei pacchetti di controllo"""
    PAUSE = 1
    RESUME = 2
    VIDMAP = 3


@dataclass(frozen=True)
class Packet:
    type: PacketType
    src: Vid
    dst: Vid
    ttl: int
    payload: bytes = b""
    ingress_link: Optional[Vid] = None

    @classmethod
    def data(cls, src: Vid, dst: Vid, payload: bytes, ttl: int = DEFAULT_TTL) -> "Packet":
        return cls(PacketType.DATA, src, dst, ttl, payload)

    @classmethod
    def control(cls, src: Vid, dst: Vid, subtype: ControlSubtype, body: bytes = b"") -> "Packet":
        return cls(PacketType.CONTROL, src, dst, 0, bytes([subtype]) + body)

    @property
    def wire_size(self) -> int:
        return _HEAD.size + 2 + len(self.src) + len(self.dst) + _LEN32.size + len(self.payload)

    @property
    def control_subtype(self) -> Optional[ControlSubtype]:
        if self.type != PacketType.CONTROL or not self.payload:
            return None
        return ControlSubtype(self.payload[0])

    def with_ttl(self, ttl: int) -> "Packet":
        return replace(self, ttl=ttl)

    def with_payload(self, payload: bytes) -> "Packet":
        return replace(self, payload=payload)

    def arriving_from(self, neighbor: Vid) -> "Packet":
        return replace(self, ingress_link=neighbor)

    def encode(self) -> bytes:
        if len(self.payload) > MAX_PAYLOAD:
            raise PayloadTooLargeError(
                f"{ERROR_MESSAGES['payload_too_large']}: {len(self.payload)} > {MAX_PAYLOAD}"
            )
        if not 0 <= self.ttl <= 255:
            raise MalformedPacketError(f"ttl out of range: {self.ttl}")
        for vid in (self.src, self.dst):
            if not 0 < len(vid) <= 255:
                raise MalformedPacketError(f"invalid VID length: {len(vid)}")
        return b"".join((
            _HEAD.pack(MAGIC, VERSION, int(self.type), self.ttl),
            bytes([len(self.src)]), self.src,
            bytes([len(self.dst)]), self.dst,
            _LEN32.pack(len(self.payload)), self.payload
        ))


def _take(raw: bytes, offset: int, size: int) -> Tuple[bytes, int]:
    end = offset + size
    if end > len(raw):
        raise MalformedPacketError(f"{ERROR_MESSAGES['malformed_packet']}: truncated at byte {offset}")
    return raw[offset:end], end


def decode(raw: bytes) -> Packet:
    """Decodifica un pacchetto; qualunque difetto produce MalformedPacketError"""
    head, offset = _take(raw, 0, _HEAD.size)
    magic, version, ptype, ttl = _HEAD.unpack(head)
    if magic != MAGIC:
        raise MalformedPacketError(f"{ERROR_MESSAGES['malformed_packet']}: bad magic 0x{magic:04X}")
    if version != VERSION:
        raise MalformedPacketError(f"{ERROR_MESSAGES['malformed_packet']}: unsupported version {version}")
    try:
        packet_type = PacketType(ptype)
    except ValueError:
        raise MalformedPacketError(f"{ERROR_MESSAGES['malformed_packet']}: unknown type {ptype}")

    length, offset = _take(raw, offset, 1)
    src, offset = _take(raw, offset, length[0])
    length, offset = _take(raw, offset, 1)
    dst, offset = _take(raw, offset, length[0])
    if not src or not dst:
        raise MalformedPacketError(f"{ERROR_MESSAGES['malformed_packet']}: empty VID")
    size_field, offset = _take(raw, offset, _LEN32.size)
    (payload_len,) = _LEN32.unpack(size_field)
    if payload_len > MAX_PAYLOAD:
        raise MalformedPacketError(f"{ERROR_MESSAGES['malformed_packet']}: payload length {payload_len}")
    payload, offset = _take(raw, offset, payload_len)
    if offset != len(raw):
        raise MalformedPacketError(
            f"{ERROR_MESSAGES['malformed_packet']}: {len(raw) - offset} trailing bytes"
        )
    return Packet(packet_type, src, dst, ttl, payload)
