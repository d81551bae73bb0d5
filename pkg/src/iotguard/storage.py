"""Sealed-at-rest JSON documents.

Registry and vendor state files are plain JSON for inspectability; only
secret fields are stored, hex-encoded, as AEAD blobs under an externally
supplied storage key.  Nonces are synthetic (an HMAC of label and plaintext),
so saving the same state twice produces the same bytes.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path

from .crypto import KEY_SIZE, NONCE_SIZE, AeadError, aead_open, aead_seal, encode_fields, mac_compute

log = logging.getLogger(__name__)

DEFAULT_KEY_ENV = "IOTGUARD_STORAGE_KEY"
CHECK_PLAINTEXT = b"iotguard storage key check"


class StorageError(Exception):
    """Persisted state could not be written or read."""


class WrongStorageKey(StorageError):
    pass


class CorruptState(StorageError):
    pass


def storage_key_from_env(var: str = DEFAULT_KEY_ENV) -> bytes | None:
    """The 32-byte key in ``$var`` (64 hex digits), or ``None`` when unset."""
    raw = os.environ.get(var)
    if not raw:
        return None
    try:
        key = bytes.fromhex(raw.strip())
    except ValueError:
        raise StorageError(f"${var} is not hex") from None
    if len(key) != KEY_SIZE:
        raise StorageError(f"${var} must hold {KEY_SIZE} bytes")
    return key


def seal_secret(storage_key: bytes, label: str, plaintext: bytes) -> str:
    aad = encode_fields(b"sealed-at-rest", label)
    nonce = mac_compute(storage_key, aad + plaintext)[:NONCE_SIZE]
    return (nonce + aead_seal(storage_key, nonce, plaintext, aad)).hex()


def open_secret(storage_key: bytes, label: str, sealed_hex: str) -> bytes:
    try:
        blob = bytes.fromhex(sealed_hex)
    except (TypeError, ValueError):
        raise CorruptState(f"sealed field {label!r} is not hex") from None
    if len(blob) < NONCE_SIZE:
        raise CorruptState(f"sealed field {label!r} too short")
    aad = encode_fields(b"sealed-at-rest", label)
    try:
        return aead_open(storage_key, blob[:NONCE_SIZE], blob[NONCE_SIZE:], aad)
    except AeadError:
        raise WrongStorageKey(f"cannot open sealed field {label!r}") from None


def key_check(storage_key: bytes) -> str:
    return seal_secret(storage_key, "key-check", CHECK_PLAINTEXT)


def verify_key_check(storage_key: bytes, sealed_hex: str) -> None:
    if open_secret(storage_key, "key-check", sealed_hex) != CHECK_PLAINTEXT:
        raise WrongStorageKey("storage key check mismatch")


def write_document(path: str | Path, doc: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def read_document(path: str | Path, expected_format: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CorruptState(f"{path}: parse error: {exc}") from None
    except OSError as exc:
        raise StorageError(f"{path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != expected_format:
        raise CorruptState(f"{path}: not a {expected_format} document")
    return doc
