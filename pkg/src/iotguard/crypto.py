"""Cryptographic primitives used by the Guardian, the devices and the vendor.

Everything here is either a pure function or operates on caller-owned state.
Algorithm identities are pinned in :data:`ALGORITHMS` so that transcripts are
reproducible across runs.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

ALGORITHMS = {
    "hash": "SHA-256",
    "kdf": "HKDF-SHA256",
    "mac": "HMAC-SHA256",
    "aead": "ChaCha20-Poly1305",
    "signature": "Ed25519",
    "key-exchange": "X25519",
    "pake": "SPAKE2-edwards25519 + HMAC key confirmation",
}

DIGEST_SIZE = 32
KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 32


class CryptoError(Exception):
    """Base class for primitive-level failures."""


class AeadError(CryptoError):
    """Authenticated decryption failed or a nonce was reused."""


# --------------------------------------------------------------------------
# hashing and Lamport chains


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def iterate_hash(data: bytes, n: int) -> bytes:
    """Apply :func:`digest` ``n`` times (``n == 0`` returns ``data`` unchanged)."""
    if n < 0:
        raise ValueError("iteration count must be non-negative")
    for _ in range(n):
        data = digest(data)
    return data


@dataclass
class ChainState:
    """A Lamport one-time password chain.

    ``verifier`` always equals ``h^(t - index)(seed_w)``, i.e. the most recently
    accepted password ``w_index``.  ``seed_w`` is ``None`` for verifier-only views
    (devices never hold the seed).
    """

    seed_w: bytes | None
    t: int
    index: int
    verifier: bytes

    def password_at(self, i: int) -> bytes:
        if self.seed_w is None:
            raise ValueError("verifier-only chain view cannot produce passwords")
        if not 0 <= i <= self.t:
            raise IndexError(f"chain index {i} outside [0, {self.t}]")
        return iterate_hash(self.seed_w, self.t - i)

    def advance(self, candidate: bytes) -> bool:
        """Accept ``candidate`` as ``w_{index+1}`` and move the verifier forward."""
        if self.index >= self.t or not chain_verify(candidate, self.verifier):
            return False
        self.verifier = candidate
        self.index += 1
        return True

    def verifier_view(self) -> "ChainState":
        return ChainState(None, self.t, self.index, self.verifier)


def chain_init(seed_w: bytes, t: int) -> ChainState:
    if t < 1:
        raise ValueError("chain length must be at least 1")
    return ChainState(seed_w, t, 0, iterate_hash(seed_w, t))


def chain_password(seed_w: bytes, t: int, i: int) -> bytes:
    """The i-th one-time password ``w_i = h^(t-i)(seed_w)`` for ``1 <= i <= t``."""
    if t < 1:
        raise ValueError("chain length must be at least 1")
    if not 1 <= i <= t:
        raise IndexError(f"chain index {i} outside [1, {t}]")
    return iterate_hash(seed_w, t - i)


def chain_verify(candidate: bytes, stored_verifier: bytes) -> bool:
    return hmac.compare_digest(digest(candidate), stored_verifier)


# --------------------------------------------------------------------------
# framing helpers


def encode_fields(*fields: bytes | str | int) -> bytes:
    """Length-prefixed concatenation; ints become 8-byte big-endian, str UTF-8."""
    out = bytearray()
    for f in fields:
        if isinstance(f, bool):
            f = int(f)
        if isinstance(f, int):
            f = f.to_bytes(8, "big", signed=False)
        elif isinstance(f, str):
            f = f.encode("utf-8")
        out += struct.pack(">I", len(f))
        out += f
    return bytes(out)


def decode_fields(data: bytes, count: int | None = None) -> list[bytes]:
    """Inverse of :func:`encode_fields`; raises ``ValueError`` on any malformation."""
    fields = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ValueError("truncated length prefix")
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise ValueError("truncated field")
        fields.append(data[pos : pos + n])
        pos += n
    if count is not None and len(fields) != count:
        raise ValueError(f"expected {count} fields, got {len(fields)}")
    return fields


def field_int(raw: bytes) -> int:
    if len(raw) != 8:
        raise ValueError("integer field must be 8 bytes")
    return int.from_bytes(raw, "big")


# --------------------------------------------------------------------------
# key derivation and MAC


def kdf(master: bytes, label: str, context: bytes = b"") -> bytes:
    if not master:
        raise ValueError("kdf master secret must be non-empty")
    if not label:
        raise ValueError("kdf label must be non-empty")
    info = encode_fields(b"iotguard-kdf-v1", label, context)
    return HKDF(algorithm=hashes.SHA256(), length=KEY_SIZE, salt=None, info=info).derive(master)


def mac_compute(key: bytes, data: bytes) -> bytes:
    if len(key) != KEY_SIZE:
        raise ValueError("MAC key must be 32 bytes")
    return hmac.new(key, data, hashlib.sha256).digest()


def mac_verify(key: bytes, data: bytes, tag: bytes) -> bool:
    if len(key) != KEY_SIZE or len(tag) != TAG_SIZE:
        return False
    return hmac.compare_digest(mac_compute(key, data), tag)


# --------------------------------------------------------------------------
# authenticated encryption


def aead_seal(key: bytes, nonce: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    if len(nonce) != NONCE_SIZE:
        raise ValueError("nonce must be 12 bytes")
    return ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)


def aead_open(key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes = b"") -> bytes:
    if len(nonce) != NONCE_SIZE:
        raise AeadError("nonce must be 12 bytes")
    try:
        return ChaCha20Poly1305(key).decrypt(nonce, ciphertext, aad)
    except InvalidTag:
        raise AeadError("authentication failed") from None


def counter_nonce(direction: int, counter: int) -> bytes:
    """96-bit nonce: 4-byte direction id followed by a 64-bit counter."""
    return direction.to_bytes(4, "big") + counter.to_bytes(8, "big")


@dataclass
class SealingChannel:
    """One direction-aware AEAD channel with counter nonces and replay rejection.

    Sealed blobs carry their nonce in front.  ``open`` refuses any counter that
    is not strictly greater than the last one accepted from the peer.
    """

    key: bytes
    send_direction: int
    recv_direction: int
    sent: int = 0
    last_received: int = -1

    def seal(self, plaintext: bytes, aad: bytes = b"") -> bytes:
        nonce = counter_nonce(self.send_direction, self.sent)
        self.sent += 1
        return nonce + aead_seal(self.key, nonce, plaintext, aad)

    def open(self, blob: bytes, aad: bytes = b"") -> bytes:
        if len(blob) < NONCE_SIZE:
            raise AeadError("sealed blob too short")
        nonce, ct = blob[:NONCE_SIZE], blob[NONCE_SIZE:]
        direction = int.from_bytes(nonce[:4], "big")
        counter = int.from_bytes(nonce[4:], "big")
        if direction != self.recv_direction:
            raise AeadError("wrong nonce direction")
        if counter <= self.last_received:
            raise AeadError("nonce reuse detected")
        pt = aead_open(self.key, nonce, ct, aad)
        self.last_received = counter
        return pt


# --------------------------------------------------------------------------
# signatures and key agreement


def sig_keypair(seed: bytes) -> tuple[bytes, bytes]:
    """Deterministic Ed25519 key pair ``(private_seed, public_key)`` from a 32-byte seed."""
    sk = Ed25519PrivateKey.from_private_bytes(seed)
    return seed, sk.public_key().public_bytes_raw()


def sig_sign(private_seed: bytes, message: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(private_seed).sign(message)


def sig_verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def dh_keypair(seed: bytes) -> tuple[bytes, bytes]:
    sk = X25519PrivateKey.from_private_bytes(seed)
    return seed, sk.public_key().public_bytes_raw()


def dh_shared(private_seed: bytes, peer_public: bytes) -> bytes:
    """X25519 shared secret; raises ``CryptoError`` for malformed or low-order peers."""
    try:
        return X25519PrivateKey.from_private_bytes(private_seed).exchange(
            X25519PublicKey.from_public_bytes(peer_public)
        )
    except ValueError as exc:
        raise CryptoError(f"key agreement failed: {exc}") from None


# --------------------------------------------------------------------------
# deterministic randomness


@dataclass
class Drbg:
    """HMAC-SHA256 counter-mode generator.

    The simulation is deterministic by construction, so every random secret
    (ephemerals, K_WiFi, chain seeds) is drawn from a seeded instance of this.
    ``fork`` yields an independent stream per label.
    """

    seed: bytes
    counter: int = field(default=0)

    @classmethod
    def from_int(cls, seed: int) -> "Drbg":
        return cls(seed.to_bytes(8, "big", signed=False))

    def bytes(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            out += hmac.new(self.seed, b"drbg" + self.counter.to_bytes(8, "big"), hashlib.sha256).digest()
            self.counter += 1
        return bytes(out[:n])

    def fork(self, label: str) -> "Drbg":
        return Drbg(hmac.new(self.seed, b"fork:" + label.encode(), hashlib.sha256).digest())

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("bound must be positive")
        nbytes = (n.bit_length() + 7) // 8 + 8
        return int.from_bytes(self.bytes(nbytes), "big") % n


# --------------------------------------------------------------------------
# per-device key material


@dataclass
class KeySet:
    """Master secret K_{G,d}, its working keys, and the device's AP secret."""

    master: bytes
    k_enc: bytes
    k_mac: bytes
    k_wifi: bytes
    epoch: int = 0

    def secrets(self) -> list[bytes]:
        return [self.master, self.k_enc, self.k_mac, self.k_wifi]

    def to_bytes(self) -> bytes:
        return encode_fields(self.master, self.k_enc, self.k_mac, self.k_wifi, self.epoch)

    @classmethod
    def from_bytes(cls, data: bytes) -> "KeySet":
        master, k_enc, k_mac, k_wifi, epoch = decode_fields(data, 5)
        return cls(master, k_enc, k_mac, k_wifi, field_int(epoch))


def working_keys(master: bytes, device_id: str, epoch: int) -> tuple[bytes, bytes]:
    """``(k_enc, k_mac)`` for one device and key epoch."""
    context = encode_fields(device_id, epoch)
    return kdf(master, "enc", context), kdf(master, "mac", context)


def derive_keyset(master: bytes, device_id: str, k_wifi: bytes, epoch: int = 0) -> KeySet:
    k_enc, k_mac = working_keys(master, device_id, epoch)
    return KeySet(master, k_enc, k_mac, k_wifi, epoch)
