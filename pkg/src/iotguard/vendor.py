"""Simulated manufacturer back-end.

Handles sticker passwords, device manufacture, the per-serial reset-count
database with Lamport next-password issuance, and signed update publication.
"""

from __future__ import annotations

import base64
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import feed as feedmod
from . import protocol as proto
from . import storage
from .crypto import (
    AeadError,
    CryptoError,
    Drbg,
    SealingChannel,
    chain_init,
    chain_password,
    decode_fields,
    dh_keypair,
    dh_shared,
    encode_fields,
    field_int,
    kdf,
    sig_keypair,
    sig_sign,
)
from .device import DeviceClass, DeviceSim
from .netsim import Frame, Kind

log = logging.getLogger(__name__)

DEFAULT_CHAIN_LENGTH = 200
STICKER_PASSWORD_CHARS = 20
VENDOR_FORMAT = "iotguard-vendor-v1"


class VendorRefusal(Exception):
    """The vendor declined a request; ``reason`` is a stable short code."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass
class VendorRecord:
    serial: str
    mac: str
    model: str
    reset_count_c: int = 0
    t: int = DEFAULT_CHAIN_LENGTH
    request_log: list[tuple[str, int, int, str]] = field(default_factory=list)
    chain_seed_w: bytes = b""


@dataclass(frozen=True)
class TrustAnchor:
    """What a vendor publishes out of band: signing key, channel key, models."""

    vendor_id: str
    public_key: bytes
    channel_public_key: bytes
    models: tuple[str, ...]
    mac: str = ""


def derive_default_password(vendor_secret: bytes, serial: str, mac: str) -> str:
    """Sticker password: 20 base32 characters (100 bits) of a keyed derivation."""
    if not vendor_secret or not serial or not mac:
        raise ValueError("vendor secret, serial and MAC are all required")
    raw = kdf(vendor_secret, "sticker-password", encode_fields(serial, mac.lower()))
    return base64.b32encode(raw).decode("ascii")[:STICKER_PASSWORD_CHARS]


def qr_payload(serial: str, d_pw: str, vendor_id: str = "", model: str = "") -> str:
    parts = [serial, d_pw]
    if vendor_id or model:
        parts += [vendor_id, model]
    return "|".join(parts)


def vendor_channel_key(shared: bytes, requester_pub: bytes, vendor_pub: bytes) -> bytes:
    return kdf(shared, "vendor-channel", encode_fields(requester_pub, vendor_pub))


class Vendor:
    def __init__(self, vendor_id: str, secret: bytes, rng: Drbg | None = None,
                 mac: str = "02:76:00:00:00:01", t: int = DEFAULT_CHAIN_LENGTH,
                 models: tuple[str, ...] = ()):
        if not secret:
            raise ValueError("vendor secret must be non-empty")
        self.vendor_id = vendor_id
        self.secret = secret
        self.rng = rng or Drbg(kdf(secret, "vendor-rng"))
        self.mac = mac
        self.t = t
        self.models: list[str] = list(models)
        self.records: dict[str, VendorRecord] = {}
        self.world = None
        self._signing_seed, self.public_key = sig_keypair(kdf(secret, "signing-key", vendor_id.encode()))
        self._channel_seed, self.channel_public_key = dh_keypair(kdf(secret, "channel-key", vendor_id.encode()))

    @property
    def name(self) -> str:
        return f"vendor:{self.vendor_id}"

    def _now(self) -> int:
        return self.world.tick if self.world is not None else 0

    def trust_anchor(self) -> TrustAnchor:
        return TrustAnchor(self.vendor_id, self.public_key, self.channel_public_key,
                           tuple(self.models), self.mac)

    def chain_seed(self, serial: str) -> bytes:
        return kdf(self.secret, "chain-seed", serial.encode())

    def default_password(self, serial: str, mac: str) -> str:
        return derive_default_password(self.secret, serial, mac)

    # --------------------------------------------------------- manufacture

    def provision_device(self, serial: str, mac: str, model: str,
                         device_class: DeviceClass = DeviceClass.MID_LEVEL,
                         firmware_version: str = "1.0") -> tuple[DeviceSim, str, VendorRecord]:
        if serial in self.records:
            raise ValueError(f"serial {serial!r} already provisioned")
        d_pw = self.default_password(serial, mac)
        seed = self.chain_seed(serial)
        chain = chain_init(seed, self.t)
        device = DeviceSim(serial, mac, self.vendor_id, model, device_class, d_pw.encode(),
                           chain.verifier_view(), self.rng.fork(f"device:{serial}"),
                           firmware_version=firmware_version)
        record = VendorRecord(serial, mac.lower(), model, 0, self.t, chain_seed_w=seed)
        self.records[serial] = record
        if model not in self.models:
            self.models.append(model)
        return device, qr_payload(serial, d_pw, self.vendor_id, model), record

    # ------------------------------------------------------ next passwords

    def next_password(self, serial: str, mac: str, c: int, asserted_owner: str) -> bytes:
        record = self.records.get(serial)
        if record is None:
            raise VendorRefusal("unknown-serial", serial)
        if mac.lower() != record.mac:
            record.request_log.append((asserted_owner, c, self._now(), "refused:mac-mismatch"))
            log.warning("next-password for %s refused: MAC mismatch", serial)
            raise VendorRefusal("mac-mismatch", serial)
        if c > record.t:
            record.request_log.append((asserted_owner, c, self._now(), "refused:chain-exhausted"))
            raise VendorRefusal("chain-exhausted", f"c={c} > t={record.t}")
        if c <= record.reset_count_c:
            record.request_log.append((asserted_owner, c, self._now(), "refused:already-issued"))
            raise VendorRefusal("already-issued", f"c={c} <= {record.reset_count_c}")
        w_c = chain_password(self.chain_seed(serial), record.t, c)
        record.reset_count_c = c
        record.request_log.append((asserted_owner, c, self._now(), "issued"))
        return w_c

    # ------------------------------------------------------------- updates

    def sign_package(self, pkg: proto.UpdatePackage) -> proto.UpdatePackage:
        pkg.vendor_id = self.vendor_id
        pkg.vendor_sig = sig_sign(self._signing_seed, proto.encode_package(pkg))
        return pkg

    def publish_update(self, model: str, version: str, payload: bytes,
                       reason: proto.Reason | str, feed_dir: str | Path | None = None,
                       update_id: str | None = None) -> tuple[proto.UpdatePackage, feedmod.FeedEntry | None]:
        pkg = self.sign_package(proto.UpdatePackage(model, version, payload, proto.Reason(reason)))
        if model not in self.models:
            self.models.append(model)
        entry = None
        if feed_dir is not None:
            entry = feedmod.append_package(feed_dir, pkg, update_id or f"{model}-{version}")
        return pkg, entry

    # ------------------------------------------------------------- network

    def receive(self, frame: Frame) -> list[Frame]:
        if frame.kind is not Kind.VENDOR:
            return []
        try:
            name, fields = proto.parse(frame.body)
            if name != "next-pw-req" or len(fields) != 2:
                return []
            requester_pub, sealed = fields
            key = vendor_channel_key(dh_shared(self._channel_seed, requester_pub),
                                     requester_pub, self.channel_public_key)
            channel = SealingChannel(key, proto.DIR_VENDOR_RESPONSE, proto.DIR_VENDOR_REQUEST)
            serial, mac, c, owner = decode_fields(channel.open(sealed, requester_pub), 4)
            serial, mac, owner, c = serial.decode(), mac.decode(), owner.decode(), field_int(c)
        except (ValueError, CryptoError, AeadError, UnicodeDecodeError):
            return []
        try:
            w_c = self.next_password(serial, mac, c, owner)
            answer = encode_fields(b"issued", w_c)
            if self.world is not None:
                self.world.log(self.name, f"next-password issued {serial} c={c} owner={owner}")
        except VendorRefusal as refusal:
            answer = encode_fields(b"refused", refusal.reason)
            if self.world is not None:
                self.world.log(self.name, f"next-password refused {serial} c={c} {refusal.reason}")
        body = proto.message("next-pw-resp", channel.seal(answer, requester_pub))
        return [Frame(self.mac, frame.src_mac, frame.link, Kind.VENDOR, body)]

    # --------------------------------------------------------- persistence

    def save(self, path: str | Path, storage_key: bytes) -> None:
        doc = {
            "format": VENDOR_FORMAT,
            "key_check": storage.key_check(storage_key),
            "vendor_id": self.vendor_id,
            "vendor_secret": storage.seal_secret(storage_key, "vendor_secret", self.secret),
            "mac": self.mac,
            "t": self.t,
            "models": list(self.models),
            "rng_counter": self.rng.counter,
            "records": {
                r.serial: {
                    "serial": r.serial,
                    "mac": r.mac,
                    "model": r.model,
                    "reset_count_c": r.reset_count_c,
                    "t": r.t,
                    "request_log": [list(e) for e in r.request_log],
                }
                for r in self.records.values()
            },
        }
        storage.write_document(path, doc)

    @classmethod
    def load(cls, path: str | Path, storage_key: bytes) -> "Vendor":
        doc = storage.read_document(path, VENDOR_FORMAT)
        storage.verify_key_check(storage_key, doc["key_check"])
        try:
            secret = storage.open_secret(storage_key, "vendor_secret", doc["vendor_secret"])
            vendor = cls(doc["vendor_id"], secret, mac=doc["mac"], t=int(doc["t"]),
                         models=tuple(doc["models"]))
            vendor.rng.counter = int(doc.get("rng_counter", 0))
            for serial, r in doc["records"].items():
                vendor.records[serial] = VendorRecord(
                    r["serial"], r["mac"], r["model"], int(r["reset_count_c"]), int(r["t"]),
                    [tuple(e) for e in r["request_log"]], vendor.chain_seed(serial))
        except (KeyError, TypeError, ValueError) as exc:
            raise storage.CorruptState(f"{path}: {exc}") from None
        return vendor
