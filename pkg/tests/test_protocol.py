"""Wire envelopes and update package encoding."""

from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from iotguard import protocol as proto
from iotguard.protocol import Reason, UpdatePackage

K1, K2 = b"1" * 32, b"2" * 32


@given(st.integers(min_value=0, max_value=2**63), st.text(min_size=1, max_size=12), st.binary(max_size=64))
def test_command_round_trip(counter, name, payload):
    assert proto.open_command(K1, proto.seal_command(K1, counter, name, payload)) == (counter, name, payload)


def test_command_wrong_key_and_direction_rejected():
    body = proto.seal_command(K1, 3, "status")
    assert proto.open_command(K2, body) is None
    # a reply tag cannot be replayed as a command and vice versa
    reply = proto.seal_reply(K1, 3, "status", "ok")
    assert proto.open_command(K1, reply) is None
    assert proto.open_reply(K1, body) is None
    assert proto.open_reply(K1, reply) == (3, "status", "ok", b"")


def test_every_bit_flip_of_a_command_is_rejected():
    body = proto.seal_command(K1, 9, "update", b"\xaa" * 64)
    for i in range(len(body) * 8):
        flipped = bytearray(body)
        flipped[i // 8] ^= 1 << (i % 8)
        assert proto.open_command(K1, bytes(flipped)) is None, i


def test_short_bodies_rejected():
    assert proto.open_command(K1, b"short") is None
    assert proto.open_reply(K1, b"") is None


def test_package_file_round_trip():
    pkg = UpdatePackage("DL-7", "1.1", b"payload", Reason.SECURITY, b"s" * 64, "acme")
    again = UpdatePackage.from_file_bytes(pkg.to_file_bytes())
    assert again == pkg
    assert again.canonical() == proto.encode_package(pkg)
    with pytest.raises(ValueError):
        UpdatePackage.from_file_bytes(proto.message("nope", "", b"", b""))


def test_canonical_encoding_excludes_signature():
    a = UpdatePackage("M", "1", b"p", Reason.STABILITY, b"sig-a", "v")
    b = UpdatePackage("M", "1", b"p", Reason.STABILITY, b"sig-b", "w")
    assert proto.encode_package(a) == proto.encode_package(b)


@pytest.mark.parametrize("a,b,expected", [
    ("1.0", "1.0.0", 0), ("1.2", "1.10", -1), ("2", "1.9.9", 1), ("0.9", "1.0", -1),
])
def test_version_ordering(a, b, expected):
    ka, kb = proto.version_key(a), proto.version_key(b)
    assert (ka > kb) - (ka < kb) == expected


def test_version_rejects_garbage():
    with pytest.raises(ValueError):
        proto.version_key("1.x")


def test_parse_message():
    name, fields = proto.parse(proto.message("counter", "SN1", 4))
    assert name == "counter" and fields[0] == b"SN1"
    with pytest.raises(ValueError):
        proto.parse(b"")


def test_pake_ids_bind_transfer_context():
    assert proto.pake_ids("SN1") != proto.pake_ids("SN1", b"bind")
