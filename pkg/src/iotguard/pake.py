"""Round-based balanced PAKE: SPAKE2 over edwards25519 with explicit key confirmation.

Message flow (blobs are opaque to the transport)::

    initiator                                responder
      SHARE      pA = x*G + w*M        ->
                                       <-    SHARE_CONFIRM  pB = y*G + w*N, cB
      CONFIRM    cA                    ->
    (either side)  ABORT               ->    peer aborts too

``w`` is a scalar derived from the password, ``M`` and ``N`` are fixed points
with unknown discrete logarithms.  Both confirmation tags are HMACs over the
public transcript under keys derived from the full transcript, so a party
holding a different password cannot produce them.  The session key never
appears in any blob.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
from dataclasses import dataclass, field

from nacl import bindings as sodium
from nacl.exceptions import RuntimeError as SodiumError

from .crypto import Drbg, digest, encode_fields, kdf, mac_compute

POINT_SIZE = sodium.crypto_core_ed25519_BYTES
SCALAR_SIZE = sodium.crypto_core_ed25519_SCALARBYTES

SHARE = 0x01
SHARE_CONFIRM = 0x02
CONFIRM = 0x03
ABORT = 0x7F

_PROTOCOL = b"iotguard-spake2-ed25519-v1"


def _fixed_point(label: bytes) -> bytes:
    return sodium.crypto_core_ed25519_from_uniform(hashlib.sha256(_PROTOCOL + label).digest())


POINT_M = _fixed_point(b"/M")
POINT_N = _fixed_point(b"/N")


class Role(enum.Enum):
    INITIATOR = "initiator"
    RESPONDER = "responder"


class Phase(enum.Enum):
    START = "Start"
    AWAIT_PEER = "AwaitPeer"
    CONFIRM = "Confirm"
    DONE = "Done"
    ABORTED = "Aborted"


@dataclass(repr=False)
class PakeSession:
    role: Role
    password: bytes
    my_id: bytes
    peer_id: bytes
    transcript: list[bytes] = field(default_factory=list)
    phase: Phase = Phase.START
    session_key: bytes | None = None
    abort_reason: str | None = None
    _scalar: bytes | None = None
    _share: bytes | None = None
    _peer_confirm_key: bytes | None = None
    _confirm_data: bytes | None = None
    _pending_key: bytes | None = None

    def __repr__(self) -> str:
        return f"PakeSession(role={self.role.value}, phase={self.phase.value}, blobs={len(self.transcript)})"

    @property
    def finished(self) -> bool:
        return self.phase in (Phase.DONE, Phase.ABORTED)


def password_scalar(password: bytes) -> bytes:
    wide = hashlib.sha512(encode_fields(_PROTOCOL, b"password", password)).digest()
    return sodium.crypto_core_ed25519_scalar_reduce(wide)


def _random_scalar(rng: Drbg) -> bytes:
    while True:
        s = sodium.crypto_core_ed25519_scalar_reduce(rng.bytes(64))
        if any(s):
            return s


def _mul(scalar: bytes, point: bytes) -> bytes:
    return sodium.crypto_scalarmult_ed25519_noclamp(scalar, point)


def _share(scalar: bytes, w: bytes, blind: bytes) -> bytes:
    return sodium.crypto_core_ed25519_add(
        sodium.crypto_scalarmult_ed25519_base_noclamp(scalar), _mul(w, blind)
    )


def _unblind(scalar: bytes, w: bytes, peer_share: bytes, blind: bytes) -> bytes:
    if not sodium.crypto_core_ed25519_is_valid_point(peer_share):
        raise ValueError("peer share is not a valid group element")
    base = sodium.crypto_core_ed25519_sub(peer_share, _mul(w, blind))
    return _mul(scalar, base)


def _derive(session: PakeSession, p_a: bytes, p_b: bytes, k: bytes, w: bytes):
    if session.role is Role.INITIATOR:
        id_a, id_b = session.my_id, session.peer_id
    else:
        id_a, id_b = session.peer_id, session.my_id
    public = encode_fields(_PROTOCOL, id_a, id_b, p_a, p_b)
    prk = digest(public + encode_fields(k, w))
    return (
        public,
        kdf(prk, "pake-session-key"),
        kdf(prk, "pake-confirm-initiator"),
        kdf(prk, "pake-confirm-responder"),
    )


def _abort(session: PakeSession, reason: str) -> tuple[PakeSession, bytes]:
    session.phase = Phase.ABORTED
    session.abort_reason = reason
    session.session_key = None
    session._scalar = session._pending_key = None
    blob = bytes([ABORT])
    session.transcript.append(blob)
    return session, blob


def pake_start(
    role: Role, password: bytes, my_id: bytes, peer_id: bytes, rng: Drbg
) -> tuple[PakeSession, bytes | None]:
    """Create a session; the initiator also returns its first blob."""
    if not password:
        raise ValueError("PAKE password must be non-empty")
    session = PakeSession(role, bytes(password), bytes(my_id), bytes(peer_id))
    session._scalar = _random_scalar(rng)
    if role is Role.RESPONDER:
        return session, None
    w = password_scalar(session.password)
    session._share = _share(session._scalar, w, POINT_M)
    blob = bytes([SHARE]) + session._share
    session.transcript.append(blob)
    session.phase = Phase.AWAIT_PEER
    return session, blob


def pake_step(session: PakeSession, blob: bytes) -> tuple[PakeSession, bytes | None]:
    """Feed one incoming blob; returns the (mutated) session and the reply, if any.

    Any malformed or out-of-phase blob aborts the session, and the returned
    reply is then an ABORT notification for the peer.  Blobs arriving after
    the session is already Aborted are ignored.
    """
    if session.phase is Phase.ABORTED:
        return session, None
    if not blob:
        return _abort(session, "empty blob")
    session.transcript.append(bytes(blob))
    kind, body = blob[0], bytes(blob[1:])

    if kind == ABORT:
        session.phase = Phase.ABORTED
        session.abort_reason = "peer aborted"
        session.session_key = None
        return session, None

    w = password_scalar(session.password)
    try:
        if session.role is Role.RESPONDER and session.phase is Phase.START and kind == SHARE:
            if len(body) != POINT_SIZE:
                raise ValueError("bad share length")
            k = _unblind(session._scalar, w, body, POINT_M)
            session._share = _share(session._scalar, w, POINT_N)
            public, key, kc_a, kc_b = _derive(session, body, session._share, k, w)
            session._pending_key, session._peer_confirm_key = key, kc_a
            session._confirm_data = public
            out = bytes([SHARE_CONFIRM]) + session._share + mac_compute(kc_b, b"responder" + public)
            session.transcript.append(out)
            session.phase = Phase.CONFIRM
            return session, out

        if session.role is Role.INITIATOR and session.phase is Phase.AWAIT_PEER and kind == SHARE_CONFIRM:
            if len(body) != POINT_SIZE + 32:
                raise ValueError("bad share/confirm length")
            p_b, c_b = body[:POINT_SIZE], body[POINT_SIZE:]
            k = _unblind(session._scalar, w, p_b, POINT_N)
            public, key, kc_a, kc_b = _derive(session, session._share, p_b, k, w)
            if not hmac.compare_digest(mac_compute(kc_b, b"responder" + public), c_b):
                return _abort(session, "responder confirmation failed")
            out = bytes([CONFIRM]) + mac_compute(kc_a, b"initiator" + public)
            session.transcript.append(out)
            session.session_key = key
            session._scalar = None
            session.phase = Phase.DONE
            return session, out

        if session.role is Role.RESPONDER and session.phase is Phase.CONFIRM and kind == CONFIRM:
            expected = mac_compute(session._peer_confirm_key, b"initiator" + session._confirm_data)
            if len(body) != 32 or not hmac.compare_digest(expected, body):
                return _abort(session, "initiator confirmation failed")
            session.session_key = session._pending_key
            session._pending_key = session._scalar = None
            session.phase = Phase.DONE
            return session, None
    except (ValueError, SodiumError) as exc:
        return _abort(session, f"malformed blob: {exc}")

    return _abort(session, f"out-of-phase blob 0x{kind:02x} in {session.phase.value}")


def run_pake(pw_initiator: bytes, pw_responder: bytes, rng: Drbg,
             ids: tuple[bytes, bytes] = (b"initiator", b"responder")):
    """Run both sides in-process with in-order delivery; returns ``(initiator, responder)``."""
    a, blob = pake_start(Role.INITIATOR, pw_initiator, ids[0], ids[1], rng.fork("a"))
    b, _ = pake_start(Role.RESPONDER, pw_responder, ids[1], ids[0], rng.fork("b"))
    sender, receiver = a, b
    while blob is not None:
        _, blob = pake_step(receiver, blob)
        sender, receiver = receiver, sender
    return a, b


def decode_blob(blob: bytes) -> tuple[int, list[bytes]]:
    """Split a blob into its type and raw parts (for transcript inspection)."""
    if not blob:
        raise ValueError("empty blob")
    kind = blob[0]
    if kind == SHARE_CONFIRM:
        return kind, [blob[1 : 1 + POINT_SIZE], blob[1 + POINT_SIZE :]]
    return kind, [blob[1:]]


__all__ = [
    "ABORT",
    "CONFIRM",
    "Phase",
    "PakeSession",
    "Role",
    "SHARE",
    "SHARE_CONFIRM",
    "decode_blob",
    "pake_start",
    "pake_step",
    "run_pake",
]
