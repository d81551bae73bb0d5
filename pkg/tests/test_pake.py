"""SPAKE2 sessions: agreement, confirmation failure and mutation resistance."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iotguard.crypto import Drbg
from iotguard.pake import (
    ABORT,
    CONFIRM,
    SHARE,
    SHARE_CONFIRM,
    Phase,
    Role,
    decode_blob,
    pake_start,
    pake_step,
    run_pake,
)


def test_same_password_agrees():
    a, b = run_pake(b"correct horse", b"correct horse", Drbg.from_int(1))
    assert a.phase is Phase.DONE and b.phase is Phase.DONE
    assert a.session_key == b.session_key and len(a.session_key) == 32


def test_session_key_never_in_transcript():
    a, b = run_pake(b"pw", b"pw", Drbg.from_int(2))
    for blob in a.transcript + b.transcript:
        assert a.session_key not in blob


@settings(max_examples=20, deadline=None)
@given(st.binary(min_size=1, max_size=16), st.binary(min_size=1, max_size=16))
def test_agreement_iff_same_password(pw_a, pw_b):
    a, b = run_pake(pw_a, pw_b, Drbg(pw_a + b"|" + pw_b))
    if pw_a == pw_b:
        assert a.session_key == b.session_key is not None
    else:
        assert a.phase is Phase.ABORTED
        assert b.phase is Phase.ABORTED
        assert a.session_key is None and b.session_key is None


def test_wrong_password_aborts_both_sides():
    a, b = run_pake(b"right", b"wrong", Drbg.from_int(3))
    assert a.abort_reason == "responder confirmation failed"
    assert b.abort_reason == "peer aborted"


def test_identities_are_bound():
    rng = Drbg.from_int(4)
    a, blob = pake_start(Role.INITIATOR, b"pw", b"guardian", b"SN1", rng.fork("a"))
    b, _ = pake_start(Role.RESPONDER, b"pw", b"SN2", b"guardian", rng.fork("b"))
    _, reply = pake_step(b, blob)
    a, out = pake_step(a, reply)
    assert a.phase is Phase.ABORTED and out == bytes([ABORT])


def _honest_blobs(seed: int):
    """Record the three honest blobs for one session pair."""
    rng = Drbg.from_int(seed)
    a, s1 = pake_start(Role.INITIATOR, b"pw", b"g", b"d", rng.fork("a"))
    b, _ = pake_start(Role.RESPONDER, b"pw", b"d", b"g", rng.fork("b"))
    _, s2 = pake_step(b, s1)
    _, s3 = pake_step(a, s2)
    return s1, s2, s3


def _run_with_mutation(seed: int, which: int, pos: int, mask: int):
    rng = Drbg.from_int(seed)
    a, blob = pake_start(Role.INITIATOR, b"pw", b"g", b"d", rng.fork("a"))
    b, _ = pake_start(Role.RESPONDER, b"pw", b"d", b"g", rng.fork("b"))
    sender, receiver, index = a, b, 0
    while blob is not None:
        if index == which:
            blob = blob[:pos] + bytes([blob[pos] ^ mask]) + blob[pos + 1:]
        _, blob = pake_step(receiver, blob)
        sender, receiver, index = receiver, sender, index + 1
    return a, b


def test_every_single_bit_mutation_prevents_agreement():
    blobs = _honest_blobs(9)
    assert [blob[0] for blob in blobs] == [SHARE, SHARE_CONFIRM, CONFIRM]
    for which, blob in enumerate(blobs):
        for pos in range(len(blob)):
            for bit in range(8):
                a, b = _run_with_mutation(9, which, pos, 1 << bit)
                agreed = (a.phase is Phase.DONE and b.phase is Phase.DONE
                          and a.session_key == b.session_key)
                assert not agreed, (which, pos, bit)
                assert b.phase is not Phase.DONE, (which, pos, bit)


def test_out_of_phase_and_empty_blobs_abort():
    rng = Drbg.from_int(5)
    b, _ = pake_start(Role.RESPONDER, b"pw", b"d", b"g", rng)
    b, out = pake_step(b, bytes([CONFIRM]) + b"\0" * 32)
    assert b.phase is Phase.ABORTED and out == bytes([ABORT])
    c, _ = pake_start(Role.RESPONDER, b"pw", b"d", b"g", rng)
    c, out = pake_step(c, b"")
    assert c.abort_reason == "empty blob"
    assert pake_step(c, bytes([SHARE]) + b"\0" * 32) == (c, None)  # ignored once aborted


def test_invalid_point_aborts():
    b, _ = pake_start(Role.RESPONDER, b"pw", b"d", b"g", Drbg.from_int(6))
    b, out = pake_step(b, bytes([SHARE]) + b"\xff" * 32)
    assert b.phase is Phase.ABORTED and b.abort_reason.startswith("malformed")


def test_empty_password_refused():
    with pytest.raises(ValueError):
        pake_start(Role.INITIATOR, b"", b"g", b"d", Drbg.from_int(0))


def test_decode_blob_parts():
    s1, s2, s3 = _honest_blobs(1)
    kind, parts = decode_blob(s2)
    assert kind == SHARE_CONFIRM and [len(p) for p in parts] == [32, 32]
    assert decode_blob(s1)[1][0] == s1[1:]
