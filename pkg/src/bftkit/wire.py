"""TLV wire encoding shared by every module that touches the network or disk.

Every record is type(1 byte) || length(4 bytes, big endian) || value. Composite
structures are fixed-order sequences of records inside a parent value. The
byte-exact layouts live in docs/wire.md; this module only provides the
primitives plus a couple of integer helpers.
"""

from __future__ import annotations

import struct


class WireError(Exception):
    """Raised when bytes do not parse as the expected TLV structure."""


MAX_LEN = 0xFFFFFFFF


def encode_tlv(tag: int, value: bytes) -> bytes:
    if not 0 <= tag <= 0xFF:
        raise WireError(f"tag out of range: {tag}")
    if len(value) > MAX_LEN:
        raise WireError("value too long")
    return struct.pack(">BI", tag, len(value)) + value


def decode_tlv(data: bytes, offset: int = 0) -> tuple[int, bytes, int]:
    """Decode one record at offset; returns (tag, value, next_offset)."""
    if len(data) - offset < 5:
        raise WireError("truncated TLV header")
    tag, length = struct.unpack_from(">BI", data, offset)
    end = offset + 5 + length
    if end > len(data):
        raise WireError("truncated TLV value")
    return tag, data[offset + 5 : end], end


def decode_all(data: bytes) -> list[tuple[int, bytes]]:
    """Decode back-to-back records until the buffer is exhausted."""
    out = []
    offset = 0
    while offset < len(data):
        tag, value, offset = decode_tlv(data, offset)
        out.append((tag, value))
    return out


def decode_fields(data: bytes, tags: list[int]) -> list[bytes]:
    """Decode a fixed-order sequence, enforcing the expected tag at each slot."""
    values = []
    offset = 0
    for want in tags:
        if offset >= len(data):
            raise WireError(f"missing field 0x{want:02x}")
        tag, value, offset = decode_tlv(data, offset)
        if tag != want:
            raise WireError(f"expected tag 0x{want:02x}, got 0x{tag:02x}")
        values.append(value)
    if offset != len(data):
        raise WireError("trailing bytes after last field")
    return values


def u64(value: int) -> bytes:
    return struct.pack(">Q", value)


def read_u64(data: bytes) -> int:
    if len(data) != 8:
        raise WireError("u64 field must be 8 bytes")
    return struct.unpack(">Q", data)[0]


def u32(value: int) -> bytes:
    return struct.pack(">I", value)


def read_u32(data: bytes) -> int:
    if len(data) != 4:
        raise WireError("u32 field must be 4 bytes")
    return struct.unpack(">I", data)[0]


def u8(value: int) -> bytes:
    return struct.pack(">B", value)


def read_u8(data: bytes) -> int:
    if len(data) != 1:
        raise WireError("u8 field must be 1 byte")
    return data[0]


# Top-level frame tags. Handshake and record tags are fixed by the channel
# protocol; trust-center tags by its request protocol.
FRAME_TC_SUBMIT_CSR = 0x01
FRAME_TC_FETCH_CRL = 0x02
FRAME_TC_FETCH_ROOT = 0x03
FRAME_TC_PUSH_CRL = 0x04
FRAME_TC_RESPONSE = 0x05

FRAME_HELLO1 = 0x10
FRAME_COOKIE = 0x11
FRAME_HELLO2 = 0x12
FRAME_SERVER_HELLO = 0x13
FRAME_FINISH = 0x14
FRAME_RECORD = 0x20

FRAME_ENVELOPE = 0x30

FRAME_STATUS_REQ = 0x40
FRAME_STATUS_RESP = 0x41
