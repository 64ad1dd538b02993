"""A small key-value store used as the replicated application.

Operations are deliberately idempotent so the replication layer's
at-least-once delivery folds into exactly-once effects, and the whole
state can be hashed or serialized for snapshot comparison between nodes.
"""

from __future__ import annotations

import hashlib

from . import wire

OP_PUT = 1
OP_GET = 2
OP_DEL = 3

STATUS_OK = 0
STATUS_MISSING = 1
STATUS_BAD_OP = 2


def encode_op(op: int, key: bytes, value: bytes = b"") -> bytes:
    return (
        wire.encode_tlv(0x01, wire.u8(op))
        + wire.encode_tlv(0x02, key)
        + wire.encode_tlv(0x03, value)
    )


def decode_op(data: bytes) -> tuple[int, bytes, bytes]:
    op, key, value = wire.decode_fields(data, [0x01, 0x02, 0x03])
    return wire.read_u8(op), key, value


def encode_result(status: int, value: bytes = b"") -> bytes:
    return wire.encode_tlv(0x01, wire.u8(status)) + wire.encode_tlv(0x02, value)


def decode_result(data: bytes) -> tuple[int, bytes]:
    status, value = wire.decode_fields(data, [0x01, 0x02])
    return wire.read_u8(status), value


class KvApp:
    def __init__(self):
        self.state: dict[bytes, bytes] = {}

    def execute(self, op_bytes: bytes) -> bytes:
        try:
            op, key, value = decode_op(op_bytes)
        except wire.WireError:
            return encode_result(STATUS_BAD_OP)
        if op == OP_PUT:
            self.state[key] = value
            return encode_result(STATUS_OK)
        if op == OP_GET:
            if key in self.state:
                return encode_result(STATUS_OK, self.state[key])
            return encode_result(STATUS_MISSING)
        if op == OP_DEL:
            if key in self.state:
                del self.state[key]
                return encode_result(STATUS_OK)
            return encode_result(STATUS_MISSING)
        return encode_result(STATUS_BAD_OP)

    def digest(self) -> bytes:
        h = hashlib.sha256()
        for key in sorted(self.state):
            h.update(wire.encode_tlv(0x01, key))
            h.update(wire.encode_tlv(0x02, self.state[key]))
        return h.digest()

    def encode_state(self) -> bytes:
        out = []
        for key in sorted(self.state):
            out.append(wire.encode_tlv(0x01, key))
            out.append(wire.encode_tlv(0x02, self.state[key]))
        return b"".join(out)

    def load_state(self, data: bytes) -> None:
        self.state.clear()
        items = wire.decode_all(data)
        for i in range(0, len(items) - 1, 2):
            tag_k, key = items[i]
            tag_v, value = items[i + 1]
            if tag_k != 0x01 or tag_v != 0x02:
                raise wire.WireError("malformed state blob")
            self.state[key] = value
