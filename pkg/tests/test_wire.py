"""TLV primitive tests."""

import pytest
from hypothesis import given, strategies as st

from bftkit import wire


class TestTlv:
    def test_layout(self):
        """1-byte tag, 4-byte big-endian length, then the value."""
        assert wire.encode_tlv(0x30, b"abc") == b"\x30\x00\x00\x00\x03abc"

    @given(tag=st.integers(min_value=0, max_value=255), value=st.binary(max_size=64))
    def test_roundtrip(self, tag, value):
        tag2, value2, end = wire.decode_tlv(wire.encode_tlv(tag, value))
        assert (tag2, value2) == (tag, value)
        assert end == 5 + len(value)

    def test_truncated_header(self):
        with pytest.raises(wire.WireError, match="truncated"):
            wire.decode_tlv(b"\x01\x00")

    def test_truncated_value(self):
        with pytest.raises(wire.WireError, match="truncated"):
            wire.decode_tlv(b"\x01\x00\x00\x00\x05abc")

    def test_decode_all(self):
        data = wire.encode_tlv(1, b"a") + wire.encode_tlv(2, b"bb")
        assert wire.decode_all(data) == [(1, b"a"), (2, b"bb")]

    def test_decode_fields_enforces_order(self):
        data = wire.encode_tlv(1, b"a") + wire.encode_tlv(2, b"bb")
        assert wire.decode_fields(data, [1, 2]) == [b"a", b"bb"]
        with pytest.raises(wire.WireError, match="expected tag"):
            wire.decode_fields(data, [2, 1])

    def test_decode_fields_rejects_trailing(self):
        data = wire.encode_tlv(1, b"a") + wire.encode_tlv(2, b"bb")
        with pytest.raises(wire.WireError, match="trailing"):
            wire.decode_fields(data, [1])

    def test_int_helpers(self):
        assert wire.read_u64(wire.u64(2**40)) == 2**40
        assert wire.read_u32(wire.u32(7)) == 7
        assert wire.read_u8(wire.u8(255)) == 255
        with pytest.raises(wire.WireError):
            wire.read_u64(b"\x00" * 7)
