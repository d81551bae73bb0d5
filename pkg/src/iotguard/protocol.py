"""Wire messages exchanged between the Guardian, devices and vendors.

Every frame body is an :func:`~iotguard.crypto.encode_fields` record whose
first field names the message.  Post-onboarding commands and replies are
wrapped in a MAC envelope under the device's working MAC key, carrying a
monotone counter that the receiver enforces.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .crypto import (
    TAG_SIZE,
    counter_nonce,
    decode_fields,
    encode_fields,
    field_int,
    mac_compute,
    mac_verify,
)

# AEAD nonce direction identifiers
DIR_GUARDIAN_TO_DEVICE = 1
DIR_DEVICE_TO_GUARDIAN = 2
DIR_TRANSFER = 3
DIR_VENDOR_REQUEST = 4
DIR_VENDOR_RESPONSE = 5

GUARDIAN_PAKE_ID = b"guardian"


class Reason(enum.Enum):
    STABILITY = "Stability"
    SECURITY = "Security"
    FUNCTIONALITY = "Functionality"


@dataclass
class UpdatePackage:
    model: str
    version: str
    payload: bytes
    reason: Reason
    vendor_sig: bytes = b""
    vendor_id: str = ""

    def canonical(self) -> bytes:
        return encode_package(self)

    def to_file_bytes(self) -> bytes:
        return encode_fields(b"iotguard-package-v1", self.vendor_id, self.canonical(), self.vendor_sig)

    @classmethod
    def from_file_bytes(cls, data: bytes) -> "UpdatePackage":
        magic, vendor_id, canonical, sig = decode_fields(data, 4)
        if magic != b"iotguard-package-v1":
            raise ValueError("not an update package")
        pkg = decode_package(canonical)
        pkg.vendor_sig = sig
        pkg.vendor_id = vendor_id.decode()
        return pkg


def encode_package(pkg: UpdatePackage) -> bytes:
    """Canonical bit-exact encoding used for both vendor signatures and Guardian MACs."""
    return encode_fields(pkg.model, pkg.version, pkg.reason.value, pkg.payload)


def decode_package(data: bytes) -> UpdatePackage:
    model, version, reason, payload = decode_fields(data, 4)
    return UpdatePackage(model.decode(), version.decode(), payload, Reason(reason.decode()))


def version_key(version: str) -> tuple[int, ...]:
    """Dotted-numeric ordering key; trailing zero components are insignificant."""
    parts = [int(p) for p in version.split(".")]
    if any(p < 0 for p in parts):
        raise ValueError(f"bad version {version!r}")
    while len(parts) > 1 and parts[-1] == 0:
        parts.pop()
    return tuple(parts)


# --------------------------------------------------------------------------
# MAC envelopes


def seal_command(k_mac: bytes, counter: int, name: str, payload: bytes = b"") -> bytes:
    fields = encode_fields(b"cmd", counter, name, payload)
    return fields + mac_compute(k_mac, b"G->d" + fields)


def open_command(k_mac: bytes, body: bytes) -> tuple[int, str, bytes] | None:
    if len(body) < TAG_SIZE:
        return None
    fields, tag = body[:-TAG_SIZE], body[-TAG_SIZE:]
    if not mac_verify(k_mac, b"G->d" + fields, tag):
        return None
    try:
        magic, counter, name, payload = decode_fields(fields, 4)
        if magic != b"cmd":
            return None
        return field_int(counter), name.decode(), payload
    except (ValueError, UnicodeDecodeError):
        return None


def seal_reply(k_mac: bytes, counter: int, name: str, result: str, data: bytes = b"") -> bytes:
    fields = encode_fields(b"reply", counter, name, result, data)
    return fields + mac_compute(k_mac, b"d->G" + fields)


def open_reply(k_mac: bytes, body: bytes) -> tuple[int, str, str, bytes] | None:
    if len(body) < TAG_SIZE:
        return None
    fields, tag = body[:-TAG_SIZE], body[-TAG_SIZE:]
    if not mac_verify(k_mac, b"d->G" + fields, tag):
        return None
    try:
        magic, counter, name, result, data = decode_fields(fields, 5)
        if magic != b"reply":
            return None
        return field_int(counter), name.decode(), result.decode(), data
    except (ValueError, UnicodeDecodeError):
        return None


def command_nonce(counter: int) -> bytes:
    """AEAD nonce for data sealed inside a command; the counter is already MAC-bound."""
    return counter_nonce(DIR_GUARDIAN_TO_DEVICE, counter)


def message(*fields: bytes | str | int) -> bytes:
    return encode_fields(*fields)


def parse(body: bytes) -> tuple[str, list[bytes]]:
    """Split an unauthenticated message into its name and raw fields."""
    fields = decode_fields(body)
    if not fields:
        raise ValueError("empty message")
    return fields[0].decode("ascii"), fields[1:]


def wifi_key_aad(serial: str, domain: str, epoch: int) -> bytes:
    return encode_fields(b"wifi-key", serial, domain, epoch)


def pake_ids(serial: str, binding: bytes = b"") -> tuple[bytes, bytes]:
    """(guardian id, device id) used inside the PAKE transcript."""
    return GUARDIAN_PAKE_ID + binding, serial.encode() + binding
