"""The trust domain's Guardian: registry, on-boarding, update mediation,
key rotation, decommissioning and registry persistence.

Protocol exchanges with devices and vendors are written as generators that
yield frames to send and receive the next frame addressed to them; the
Guardian drives them through the :class:`~iotguard.netsim.World` event loop
with a tick deadline per exchange.
"""

from __future__ import annotations

import enum
import hmac
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Generator

from . import feed as feedmod
from . import protocol as proto
from . import storage
from .crypto import (
    AeadError,
    CryptoError,
    Drbg,
    KeySet,
    SealingChannel,
    aead_seal,
    counter_nonce,
    decode_fields,
    derive_keyset,
    dh_keypair,
    dh_shared,
    digest,
    encode_fields,
    field_int,
    kdf,
    mac_compute,
    sig_verify,
)
from .device import DeviceClass
from .netsim import Frame, Kind, Link, LinkKind, World
from .pake import Phase, Role, pake_start, pake_step
from .vendor import TrustAnchor, vendor_channel_key

log = logging.getLogger(__name__)

REGISTRY_FORMAT = "iotguard-registry-v1"
MAC_RE = re.compile(r"^[0-9a-f]{2}(:[0-9a-f]{2}){5}$")

# model -> (vendor, description, class); stands in for the online lookup that
# auto-populates registry fields from a scanned serial
MODEL_CATALOG: dict[str, tuple[str, str, DeviceClass]] = {
    "SP-100": ("acme", "smart plug", DeviceClass.LOW_END),
    "LB-20": ("lumen", "lightbulb type 20", DeviceClass.LOW_END),
    "DL-7": ("acme", "door-lock", DeviceClass.MID_LEVEL),
    "CAM-3": ("optix", "IP camera", DeviceClass.HIGH_END),
}
SERIAL_PREFIXES = {"SP1": "SP-100", "LB2": "LB-20", "DL7": "DL-7", "CM3": "CAM-3"}


class Lifecycle(enum.Enum):
    ROSTERED = "Rostered"
    ONBOARDED = "Onboarded"
    DECOMMISSIONED = "Decommissioned"


class DecommissionMode(enum.Enum):
    RECYCLE = "Recycle"
    TRANSFER = "Transfer"


class VerifyResult(enum.Enum):
    VERIFIED = "verified"
    BAD_SIGNATURE = "rejected-bad-signature"
    UNKNOWN_ANCHOR = "rejected-unknown-anchor"


class UpdateOutcome(enum.Enum):
    INSTALLED = "installed"
    POLICY_DENIED = "policy-denied"
    NOT_VERIFIED = "not-verified"
    DEVICE_REJECTED = "device-rejected"
    TIMEOUT = "timeout"
    UNKNOWN_UPDATE = "unknown-update"


class GuardianError(Exception):
    """Base Guardian failure; ``outbound`` frames are still sent (e.g. a PAKE abort)."""

    def __init__(self, message: str = "", outbound: list[Frame] | None = None):
        super().__init__(message)
        self.outbound = outbound or []


class RosterError(GuardianError):
    pass


class OnboardingRefused(GuardianError):
    """Device absent from the registry, or not in a state that allows on-boarding."""


class OnboardingFailed(GuardianError):
    pass


class PriorBoardingAlarm(OnboardingFailed):
    """The device reports it has already been on-boarded by someone else."""


class ExchangeTimeout(GuardianError):
    pass


class DeviceUnreachable(GuardianError):
    pass


class TransferRefused(GuardianError):
    pass


# --------------------------------------------------------------------------
# registry types


@dataclass
class DeviceRecord:
    device_id: str
    mac: str | None = None
    vendor_id: str = ""
    model: str = ""
    description: str = ""
    device_class: DeviceClass = DeviceClass.MID_LEVEL
    installed_version: str | None = None
    available_updates: list[tuple[str, str, str]] = field(default_factory=list)
    keyset: KeySet | None = None
    d_pw: bytes | None = None
    lifecycle: Lifecycle = Lifecycle.ROSTERED
    # (version, logical timestamp, source) with source "observed" or "push:<update_id>"
    version_history: list[tuple[str, int, str]] = field(default_factory=list)
    approved_updates: list[str] = field(default_factory=list)
    via_transfer: bool = False
    rotation_pending: bool = False
    wipe_unconfirmed: bool = False
    command_counter: int = 0

    def secret_fields(self) -> list[bytes]:
        out = [self.d_pw] if self.d_pw else []
        if self.keyset:
            out += self.keyset.secrets()
        return out


class ApPasswordTable:
    """Per-MAC verification data for K_WiFi: a salted hash, never the key itself."""

    def __init__(self):
        self.entries: dict[str, tuple[bytes, bytes]] = {}

    @staticmethod
    def _verifier(salt: bytes, secret: bytes) -> bytes:
        return digest(encode_fields(b"ap-verifier", salt, secret))

    def install(self, mac: str, secret: bytes, salt: bytes) -> None:
        self.entries[mac.lower()] = (salt, self._verifier(salt, secret))

    def remove(self, mac: str) -> None:
        self.entries.pop(mac.lower(), None)

    def verify(self, mac: str, secret: bytes) -> bool:
        entry = self.entries.get(mac.lower())
        if entry is None:
            return False
        salt, verifier = entry
        return hmac.compare_digest(self._verifier(salt, secret), verifier)

    def __contains__(self, mac: str) -> bool:
        return mac.lower() in self.entries

    def __len__(self) -> int:
        return len(self.entries)


class Registry:
    def __init__(self):
        self.devices: dict[str, DeviceRecord] = {}
        self.ap_table = ApPasswordTable()

    def add(self, record: DeviceRecord) -> DeviceRecord:
        if record.device_id in self.devices:
            raise RosterError(f"duplicate device id {record.device_id!r}")
        if record.mac and self.by_mac(record.mac) is not None:
            raise RosterError(f"duplicate MAC {record.mac}")
        self.devices[record.device_id] = record
        return record

    def get(self, device_id: str) -> DeviceRecord:
        try:
            return self.devices[device_id]
        except KeyError:
            raise OnboardingRefused(f"{device_id!r} is not in the registry") from None

    def by_mac(self, mac: str) -> DeviceRecord | None:
        for record in self.devices.values():
            if record.mac and record.mac == mac.lower():
                return record
        return None

    def __contains__(self, device_id: str) -> bool:
        return device_id in self.devices

    def __iter__(self):
        return iter(self.devices.values())

    def __len__(self) -> int:
        return len(self.devices)

    # ------------------------------------------------------------ persistence

    def to_document(self, storage_key: bytes) -> dict:
        def seal(label: str, value: bytes | None):
            return None if value is None else storage.seal_secret(storage_key, label, value)

        devices = {}
        for r in self.devices.values():
            devices[r.device_id] = {
                "device_id": r.device_id,
                "mac": r.mac,
                "vendor_id": r.vendor_id,
                "model": r.model,
                "description": r.description,
                "device_class": r.device_class.value,
                "installed_version": r.installed_version,
                "available_updates": [list(u) for u in r.available_updates],
                "keyset": seal(f"{r.device_id}/keyset", r.keyset.to_bytes() if r.keyset else None),
                "d_pw": seal(f"{r.device_id}/d_pw", r.d_pw),
                "lifecycle": r.lifecycle.value,
                "version_history": [list(v) for v in r.version_history],
                "approved_updates": list(r.approved_updates),
                "via_transfer": r.via_transfer,
                "rotation_pending": r.rotation_pending,
                "wipe_unconfirmed": r.wipe_unconfirmed,
                "command_counter": r.command_counter,
            }
        return {
            "format": REGISTRY_FORMAT,
            "key_check": storage.key_check(storage_key),
            "devices": devices,
            "ap_table": {
                mac: {"salt": salt.hex(), "verifier": ver.hex()}
                for mac, (salt, ver) in sorted(self.ap_table.entries.items())
            },
        }

    @classmethod
    def from_document(cls, doc: dict, storage_key: bytes) -> "Registry":
        storage.verify_key_check(storage_key, doc["key_check"])
        registry = cls()
        try:
            for device_id, d in doc["devices"].items():
                keyset = d["keyset"] and KeySet.from_bytes(
                    storage.open_secret(storage_key, f"{device_id}/keyset", d["keyset"]))
                d_pw = d["d_pw"] and storage.open_secret(storage_key, f"{device_id}/d_pw", d["d_pw"])
                registry.devices[device_id] = DeviceRecord(
                    device_id=d["device_id"],
                    mac=d["mac"],
                    vendor_id=d["vendor_id"],
                    model=d["model"],
                    description=d["description"],
                    device_class=DeviceClass(d["device_class"]),
                    installed_version=d["installed_version"],
                    available_updates=[tuple(u) for u in d["available_updates"]],
                    keyset=keyset or None,
                    d_pw=d_pw or None,
                    lifecycle=Lifecycle(d["lifecycle"]),
                    version_history=[(v[0], int(v[1]), v[2]) for v in d["version_history"]],
                    approved_updates=list(d.get("approved_updates", [])),
                    via_transfer=bool(d.get("via_transfer", False)),
                    rotation_pending=bool(d.get("rotation_pending", False)),
                    wipe_unconfirmed=bool(d.get("wipe_unconfirmed", False)),
                    command_counter=int(d.get("command_counter", 0)),
                )
            for mac, e in doc["ap_table"].items():
                registry.ap_table.entries[mac] = (bytes.fromhex(e["salt"]), bytes.fromhex(e["verifier"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise storage.CorruptState(f"registry document: {exc}") from None
        return registry


def registry_save(registry: Registry, path: str | Path, storage_key: bytes) -> None:
    storage.write_document(path, registry.to_document(storage_key))


def registry_load(path: str | Path, storage_key: bytes) -> Registry:
    return Registry.from_document(storage.read_document(path, REGISTRY_FORMAT), storage_key)


# --------------------------------------------------------------------------
# trust anchors and update policy


class TrustStore:
    def __init__(self, anchors: list[TrustAnchor] | None = None):
        self.anchors: dict[str, TrustAnchor] = {}
        for a in anchors or []:
            self.add(a)

    def add(self, anchor: TrustAnchor) -> None:
        self.anchors[anchor.vendor_id] = anchor

    def for_model(self, model: str) -> TrustAnchor | None:
        for anchor in self.anchors.values():
            if model in anchor.models:
                return anchor
        return None


def verify_update(package: proto.UpdatePackage, trust: TrustStore) -> VerifyResult:
    anchor = trust.for_model(package.model)
    if anchor is None or (package.vendor_id and package.vendor_id != anchor.vendor_id):
        return VerifyResult.UNKNOWN_ANCHOR
    if sig_verify(anchor.public_key, proto.encode_package(package), package.vendor_sig):
        return VerifyResult.VERIFIED
    return VerifyResult.BAD_SIGNATURE


@dataclass
class UpdatePolicy:
    """Default mediation policy.

    Security updates are approved automatically; anything else needs an explicit
    approval for that device.  Versions not strictly newer than the installed
    one (dotted-numeric order) are denied unless ``allow_downgrade`` is set.
    """

    auto_approve_security: bool = True
    allow_downgrade: bool = False

    def decide(self, record: DeviceRecord, pkg: proto.UpdatePackage, approved: bool) -> tuple[bool, str]:
        if not self.allow_downgrade and record.installed_version is not None:
            if proto.version_key(pkg.version) <= proto.version_key(record.installed_version):
                return False, f"not newer than installed {record.installed_version}"
        if approved:
            return True, "explicitly approved"
        if self.auto_approve_security and pkg.reason is proto.Reason.SECURITY:
            return True, "security update auto-approved"
        return False, "needs explicit approval"


def select_update(record: DeviceRecord) -> tuple[str, str, str] | None:
    """Highest version wins; ties go to the lexicographically smallest update id."""
    if not record.available_updates:
        return None
    return min(record.available_updates, key=lambda u: (_neg_version(u[1]), u[0]))


def _neg_version(version: str) -> tuple[int, ...]:
    return tuple(-p for p in proto.version_key(version)) + (1,)


# --------------------------------------------------------------------------
# the Guardian


class _Exchange:
    def __init__(self, gen: Generator):
        self.gen = gen
        self.done = False
        self.result = None
        self.error: BaseException | None = None

    def _step(self, value) -> list[Frame]:
        try:
            out = self.gen.send(value)
        except StopIteration as stop:
            self.done, self.result = True, stop.value
            return []
        except GuardianError as exc:
            self.done, self.error = True, exc
            return list(exc.outbound)
        if out is None:
            return []
        return [out] if isinstance(out, Frame) else list(out)

    def start(self) -> list[Frame]:
        return self._step(None)

    def feed(self, frame: Frame) -> list[Frame]:
        return [] if self.done else self._step(frame)


def parse_qr(qr_payload: str) -> tuple[str, str, str, str]:
    parts = qr_payload.strip().split("|")
    if len(parts) not in (2, 4) or not parts[0] or not parts[1]:
        raise RosterError(f"malformed QR payload {qr_payload!r}")
    serial, d_pw = parts[0], parts[1]
    vendor_id, model = (parts[2], parts[3]) if len(parts) == 4 else ("", "")
    if not re.fullmatch(r"[A-Za-z0-9._-]+", serial):
        raise RosterError(f"malformed serial {serial!r}")
    return serial, d_pw, vendor_id, model


class Guardian:
    is_device = False

    def __init__(self, guardian_id: str, mac: str, rng: Drbg, domain: str | None = None,
                 policy: UpdatePolicy | None = None, trust: TrustStore | None = None):
        self.guardian_id = guardian_id
        self.mac = mac.lower()
        self.rng = rng
        self.domain = domain or guardian_id
        self.policy = policy or UpdatePolicy()
        self.trust = trust or TrustStore()
        self.registry = Registry()
        self.world: World | None = None
        self.feed_dir: Path | None = None
        self.feed_entries: list[feedmod.FeedEntry] = []
        self.events: list[str] = []
        self.alarms: list[tuple[str, str, str]] = []
        self._exchanges: dict[tuple, _Exchange] = {}

    @property
    def name(self) -> str:
        return f"guardian:{self.guardian_id}"

    @property
    def ap_table(self) -> ApPasswordTable:
        return self.registry.ap_table

    def join(self, world: World) -> "Guardian":
        """Attach to ``world`` and stand up this domain's access point."""
        world.attach(self)
        world.add_domain_ap(self.domain, self.ap_table, owner_mac=self.mac)
        return self

    def _event(self, text: str) -> None:
        self.events.append(text)
        if self.world is not None:
            self.world.log(self.name, text)

    def _alarm(self, kind: str, device_id: str, detail: str) -> None:
        self.alarms.append((kind, device_id, detail))
        log.critical("ALARM %s on %s: %s", kind, device_id, detail)
        self._event(f"ALARM {kind} {device_id}: {detail}")

    def _now(self) -> int:
        return self.world.tick if self.world is not None else 0

    # ---------------------------------------------------------- exchanges

    def receive(self, frame: Frame) -> list[Frame]:
        if frame.link.kind is LinkKind.DEVICE_AP:
            key = ("ap", frame.link.name)
        else:
            key = (frame.link.kind.value, frame.src_mac)
        ex = self._exchanges.get(key)
        if ex is None or ex.done:
            return []
        return ex.feed(frame)

    def _converse(self, key: tuple, gen: Generator):
        if self.world is None:
            raise GuardianError("guardian is not attached to a world")
        ex = _Exchange(gen)
        self._exchanges[key] = ex
        try:
            self.world.send(ex.start())
            deadline = self.world.tick + self.world.timeout_ticks
            self.world.run(until=lambda: ex.done, deadline=deadline)
        finally:
            del self._exchanges[key]
        if not ex.done:
            gen.close()
            raise ExchangeTimeout(f"exchange {key} timed out")
        self.world.settle()
        if ex.error is not None:
            raise ex.error
        return ex.result

    @staticmethod
    def _expect(frames, accept):
        """Send ``frames``, then wait until ``accept(frame)`` returns non-None."""
        frame = yield frames
        while True:
            got = accept(frame)
            if got is not None:
                return got
            frame = yield []

    # ---------------------------------------------------------- rostering

    def roster_scan(self, qr_payload: str) -> DeviceRecord:
        serial, d_pw, vendor_id, model = parse_qr(qr_payload)
        if serial in self.registry:
            raise RosterError(f"duplicate serial {serial!r}")
        record = DeviceRecord(serial, vendor_id=vendor_id, model=model, d_pw=d_pw.encode())
        self._autofill(record)
        self.registry.add(record)
        self._event(f"rostered {serial}")
        return record

    def roster_transfer(self, serial: str, model: str = "", vendor_id: str = "") -> DeviceRecord:
        """Roster a second-hand device by its stamped serial; no sticker password."""
        if serial in self.registry:
            raise RosterError(f"duplicate serial {serial!r}")
        record = DeviceRecord(serial, vendor_id=vendor_id, model=model, via_transfer=True)
        self._autofill(record)
        self.registry.add(record)
        self._event(f"rostered {serial} (transfer)")
        return record

    @staticmethod
    def _autofill(record: DeviceRecord) -> None:
        if not record.model:
            record.model = SERIAL_PREFIXES.get(record.device_id.split("-")[0], "")
        if record.model in MODEL_CATALOG:
            vendor, description, cls = MODEL_CATALOG[record.model]
            record.vendor_id = record.vendor_id or vendor
            record.description = record.description or description
            record.device_class = cls

    # ---------------------------------------------------------- on-boarding

    def _find_ap(self, serial: str) -> str:
        for ap_serial, mac in self.world.visible_aps():
            if ap_serial == serial:
                return mac
        raise DeviceUnreachable(f"no access point for {serial}")

    def onboard_visible(self) -> dict[str, str]:
        """Scan for provisioning APs; on-board rostered devices, ignore the rest."""
        results = {}
        for serial, _ in self.world.visible_aps():
            record = self.registry.devices.get(serial)
            if record is None:
                self._event(f"ignored unrostered AP {serial}")
                results[serial] = "ignored"
                continue
            if record.lifecycle is not Lifecycle.ROSTERED or record.via_transfer:
                continue
            try:
                self.onboard(serial)
                results[serial] = "onboarded"
            except GuardianError as exc:
                results[serial] = f"failed: {exc}"
        return results

    def onboard(self, device_id: str) -> DeviceRecord:
        record = self.registry.get(device_id)
        if record.lifecycle is not Lifecycle.ROSTERED:
            raise OnboardingRefused(f"{device_id} is {record.lifecycle.value}, not Rostered")
        if record.d_pw is None:
            raise OnboardingRefused(f"{device_id} has no on-boarding password")
        ap_mac = self._find_ap(device_id)
        return self._onboard_with(record, ap_mac, record.d_pw, b"")

    def _onboard_with(self, record: DeviceRecord, ap_mac: str, password: bytes, binding: bytes) -> DeviceRecord:
        try:
            self._converse(("ap", record.device_id), self._onboard_flow(record, ap_mac, password, binding))
        except PriorBoardingAlarm as exc:
            self._alarm("prior-boarding", record.device_id, str(exc))
            raise
        except (OnboardingFailed, ExchangeTimeout) as exc:
            self.ap_table.remove(record.mac or ap_mac)
            self._event(f"onboard failed {record.device_id}: {exc}")
            raise OnboardingFailed(str(exc)) from None
        try:
            version, _ = self.query_status(record.device_id)
        except ExchangeTimeout:
            self._event(f"version unknown for {record.device_id}: status timed out")
            return record
        record.installed_version = version
        record.version_history.append((version, self._now(), "observed"))
        return record

    def _onboard_flow(self, record: DeviceRecord, ap_mac: str, password: bytes, binding: bytes):
        serial = record.device_id
        link = Link.device_ap(serial)

        def status(frame: Frame):
            try:
                name, fields = proto.parse(frame.body)
            except (ValueError, UnicodeDecodeError):
                return None
            if name == "status" and len(fields) == 5 and fields[0].decode() == serial:
                return fields
            return None

        _, model, _, flag, _ = yield from self._expect(
            Frame(self.mac, ap_mac, link, Kind.STATUS, proto.message("hello")), status)
        if field_int(flag):
            raise PriorBoardingAlarm(f"{serial} reports it has already been on-boarded")

        g_id, d_id = proto.pake_ids(serial, binding)
        session, blob = pake_start(Role.INITIATOR, password, g_id, d_id, self.rng)

        def pake_reply(frame: Frame):
            if frame.kind is Kind.PAKE_BLOB:
                return frame
            if frame.kind is Kind.STATUS:
                try:
                    name, _ = proto.parse(frame.body)
                except (ValueError, UnicodeDecodeError):
                    return None
                if name == "already-onboarded":
                    raise PriorBoardingAlarm(f"{serial} refused PAKE: already on-boarded")
                if name == "no-password":
                    raise OnboardingFailed(f"{serial} has no on-boarding password")
            return None

        frame = yield from self._expect(Frame(self.mac, ap_mac, link, Kind.PAKE_BLOB, blob), pake_reply)
        learned_mac = frame.src_mac
        other = self.registry.by_mac(learned_mac)
        if other is not None and other is not record:
            raise OnboardingFailed(f"MAC {learned_mac} already belongs to {other.device_id}")
        session, out = pake_step(session, frame.body)
        if session.phase is not Phase.DONE:
            self._event(f"pake aborted {serial}: {session.abort_reason}")
            abort = [Frame(self.mac, learned_mac, link, Kind.PAKE_BLOB, out)] if out else []
            raise OnboardingFailed(f"PAKE aborted: {session.abort_reason}", abort)

        master = session.session_key
        k_wifi = self.rng.bytes(32)
        keyset = derive_keyset(master, serial, k_wifi, 0)
        self.ap_table.install(learned_mac, k_wifi, self.rng.bytes(16))
        nonce = counter_nonce(proto.DIR_GUARDIAN_TO_DEVICE, 0)
        sealed = nonce + aead_seal(keyset.k_enc, nonce, k_wifi, proto.wifi_key_aad(serial, self.domain, 0))
        confirm = Frame(self.mac, learned_mac, link, Kind.PAKE_BLOB, out)
        wifi = Frame(self.mac, learned_mac, link, Kind.SEALED, proto.message("wifi-key", self.domain, sealed))

        def ack(frame: Frame):
            if frame.kind is Kind.PAKE_BLOB:
                pake_step(session, frame.body)
                if session.phase is Phase.ABORTED:
                    raise OnboardingFailed("device rejected key confirmation")
                return None
            if frame.kind is not Kind.STATUS:
                return None
            opened = proto.open_reply(keyset.k_mac, frame.body)
            if opened and opened[0] == 0 and opened[1] == "onboarded" and opened[2] == "ok":
                return opened[3]
            return None

        yield from self._expect([confirm, wifi], ack)
        if record.mac and record.mac != learned_mac:
            self._event(f"mac changed for {serial}: {record.mac} -> {learned_mac}")
        record.mac = learned_mac
        record.keyset = keyset
        if not record.model:
            record.model = model.decode()
        record.lifecycle = Lifecycle.ONBOARDED
        record.command_counter = 0
        record.rotation_pending = False
        self._event(f"onboarded {serial} mac={learned_mac}")
        return record

    # ------------------------------------------------------ transfer support

    def read_transfer_info(self, serial: str) -> tuple[str, str, int]:
        """Read (serial, MAC, reset count) over the device's open AP."""
        ap_mac = self._find_ap(serial)
        link = Link.device_ap(serial)

        def counter(frame: Frame):
            try:
                name, fields = proto.parse(frame.body)
            except (ValueError, UnicodeDecodeError):
                return None
            if name == "counter" and len(fields) == 3 and fields[0].decode() == serial:
                return fields[1].decode(), field_int(fields[2])
            if name == "refused":
                raise DeviceUnreachable(f"{serial} refused to report its reset counter")
            return None

        def flow():
            return (yield from self._expect(
                Frame(self.mac, ap_mac, link, Kind.STATUS, proto.message("counter")), counter))

        mac, c = self._converse(("ap", serial), flow())
        return serial, mac, c

    def request_next_password(self, anchor: TrustAnchor, serial: str, mac: str, c: int) -> bytes:
        """Ask the vendor for ``w_c`` over a channel keyed to the vendor's published key."""
        seed, my_pub = dh_keypair(self.rng.bytes(32))
        key = vendor_channel_key(dh_shared(seed, anchor.channel_public_key), my_pub, anchor.channel_public_key)
        channel = SealingChannel(key, proto.DIR_VENDOR_REQUEST, proto.DIR_VENDOR_RESPONSE)
        request = channel.seal(encode_fields(serial, mac, c, self.guardian_id), my_pub)

        def response(frame: Frame):
            try:
                name, fields = proto.parse(frame.body)
                if name != "next-pw-resp" or len(fields) != 1:
                    return None
                status, value = decode_fields(channel.open(fields[0], my_pub), 2)
            except (ValueError, AeadError, UnicodeDecodeError):
                return None
            return status.decode(), value

        def flow():
            return (yield from self._expect(
                Frame(self.mac, anchor.mac, Link.wan(), Kind.VENDOR,
                      proto.message("next-pw-req", my_pub, request)), response))

        status, value = self._converse((LinkKind.WAN.value, anchor.mac), flow())
        if status != "issued":
            raise TransferRefused(f"vendor refused next password for {serial}: {value.decode()}")
        return value

    def onboard_transfer(self, device_id: str) -> DeviceRecord:
        """On-board a second-hand device using the vendor's next chain password."""
        record = self.registry.get(device_id)
        if record.lifecycle is not Lifecycle.ROSTERED:
            raise OnboardingRefused(f"{device_id} is {record.lifecycle.value}, not Rostered")
        anchor = self.trust.anchors.get(record.vendor_id) or self.trust.for_model(record.model)
        if anchor is None:
            raise TransferRefused(f"no vendor trust anchor for {device_id}")
        serial, mac, c = self.read_transfer_info(device_id)
        w_c = self.request_next_password(anchor, serial, mac, c)
        ap_mac = self._find_ap(device_id)
        binding = self._converse(("ap", device_id), self._deliver_password_flow(serial, ap_mac, c, w_c))
        record.d_pw = w_c
        return self._onboard_with(record, ap_mac, w_c, binding)

    def _deliver_password_flow(self, serial: str, ap_mac: str, c: int, w_c: bytes):
        link = Link.device_ap(serial)
        seed, g_pub = dh_keypair(self.rng.bytes(32))

        def hello(frame: Frame):
            try:
                name, fields = proto.parse(frame.body)
            except (ValueError, UnicodeDecodeError):
                return None
            return fields[0] if name == "xfer-hello" and len(fields) == 1 else None

        d_pub = yield from self._expect(
            Frame(self.mac, ap_mac, link, Kind.COMMAND, proto.message("xfer-hello", g_pub)), hello)
        try:
            shared = dh_shared(seed, d_pub)
        except CryptoError as exc:
            raise TransferRefused(str(exc)) from None
        binding = digest(encode_fields(b"xfer", serial, g_pub, d_pub))
        key = kdf(shared, "transfer-channel", binding)
        nonce = counter_nonce(proto.DIR_TRANSFER, 0)
        sealed = nonce + aead_seal(key, nonce, w_c, encode_fields(b"next-pw", serial, c))

        def verdict(frame: Frame):
            try:
                name, fields = proto.parse(frame.body)
            except (ValueError, UnicodeDecodeError):
                return None
            return fields[0].decode() if name == "next-pw" and len(fields) == 1 else None

        answer = yield from self._expect(
            Frame(self.mac, ap_mac, link, Kind.SEALED, proto.message("next-pw", c, sealed)), verdict)
        if answer != "accept":
            raise TransferRefused(f"{serial} rejected the next password")
        return binding

    # ------------------------------------------------------------ commands

    def _require_onboarded(self, device_id: str) -> DeviceRecord:
        record = self.registry.get(device_id)
        if record.lifecycle is not Lifecycle.ONBOARDED or record.keyset is None:
            raise GuardianError(f"{device_id} is not on-boarded")
        return record

    def _command_flow(self, record: DeviceRecord, name: str, payload: bytes = b"",
                      reply_keys: KeySet | None = None, counter: int | None = None):
        if counter is None:
            record.command_counter += 1
            counter = record.command_counter
        keys = record.keyset
        body = proto.seal_command(keys.k_mac, counter, name, payload)
        frame = Frame(self.mac, record.mac, Link.domain_ap(self.domain), Kind.COMMAND, body)
        check = reply_keys or keys

        def reply(f: Frame):
            if f.kind is not Kind.STATUS:
                return None
            opened = proto.open_reply(check.k_mac, f.body)
            if opened and opened[0] == counter and opened[1] == name:
                return opened[2], opened[3]
            return None

        return (yield from self._expect(frame, reply))

    def _command(self, record: DeviceRecord, name: str, payload: bytes = b"", **kw):
        return self._converse((LinkKind.DOMAIN_AP.value, record.mac),
                              self._command_flow(record, name, payload, **kw))

    def query_status(self, device_id: str) -> tuple[str, int]:
        record = self._require_onboarded(device_id)
        _, data = self._command(record, "status")
        version, _, epoch = decode_fields(data, 3)
        if record.installed_version not in (None, version.decode()):
            self._event(f"version drift {device_id}: {record.installed_version} -> {version.decode()}")
        return version.decode(), field_int(epoch)

    def store_user_data(self, device_id: str, label: str, value: bytes) -> str:
        record = self._require_onboarded(device_id)
        record.command_counter += 1
        counter = record.command_counter
        sealed = aead_seal(record.keyset.k_enc, proto.command_nonce(counter),
                           encode_fields(label, value), encode_fields(b"store", device_id))
        result, _ = self._command(record, "store", sealed, counter=counter)
        return result

    # ------------------------------------------------------------- updates

    def add_trust_anchor(self, anchor: TrustAnchor) -> None:
        self.trust.add(anchor)

    def discover_updates(self, feed_dir: str | Path) -> bool:
        try:
            entries = feedmod.read_index(feed_dir)
        except feedmod.FeedError as exc:
            log.warning("update feed unreadable, registry unchanged: %s", exc)
            self._event(f"feed unreadable: {exc}")
            return False
        self.feed_dir = Path(feed_dir)
        self.feed_entries = entries
        for record in self.registry:
            record.available_updates = [
                (e.update_id, e.version, e.reason) for e in entries if e.model == record.model
            ]
        self._event(f"discovered {len(entries)} feed entries")
        return True

    def verify_update(self, package: proto.UpdatePackage) -> VerifyResult:
        return verify_update(package, self.trust)

    def approve(self, device_id: str, update_id: str) -> None:
        record = self.registry.get(device_id)
        if update_id not in record.approved_updates:
            record.approved_updates.append(update_id)
        self._event(f"approved {update_id} for {device_id}")

    def push_update(self, device_id: str, update_id: str) -> UpdateOutcome:
        record = self._require_onboarded(device_id)
        entry = next((e for e in self.feed_entries
                      if e.update_id == update_id and e.model == record.model), None)
        if entry is None or self.feed_dir is None:
            return UpdateOutcome.UNKNOWN_UPDATE
        try:
            pkg = feedmod.load_package(self.feed_dir, entry)
        except feedmod.FeedError as exc:
            self._event(f"update {update_id} unreadable: {exc}")
            return UpdateOutcome.NOT_VERIFIED
        verdict = self.verify_update(pkg)
        if verdict is not VerifyResult.VERIFIED or (pkg.model, pkg.version, pkg.reason.value) != (
            entry.model, entry.version, entry.reason
        ):
            self._event(f"update {update_id} {verdict.value}")
            return UpdateOutcome.NOT_VERIFIED
        allowed, why = self.policy.decide(record, pkg, update_id in record.approved_updates)
        if not allowed:
            self._event(f"update {update_id} for {device_id} denied: {why}")
            return UpdateOutcome.POLICY_DENIED
        return self.deliver_update(record, pkg, update_id)

    def deliver_update(self, record: DeviceRecord, pkg: proto.UpdatePackage, update_id: str) -> UpdateOutcome:
        """Steps 1-3 of mediated install: prepare, transfer under MAC, install."""
        canonical = proto.encode_package(pkg)
        tag = mac_compute(record.keyset.k_mac, canonical)
        try:
            result, _ = self._command(record, "prepare-update")
            if result != "ok":
                return UpdateOutcome.DEVICE_REJECTED
            result, _ = self._command(record, "update", encode_fields(canonical, tag))
        except ExchangeTimeout:
            self._event(f"update {update_id} for {record.device_id} timed out")
            return UpdateOutcome.TIMEOUT
        if result != "accepted":
            self._event(f"update {update_id} rejected by {record.device_id}")
            return UpdateOutcome.DEVICE_REJECTED
        record.installed_version = pkg.version
        record.version_history.append((pkg.version, self._now(), f"push:{update_id}"))
        self._event(f"installed {update_id} ({pkg.version}) on {record.device_id}")
        return UpdateOutcome.INSTALLED

    # ------------------------------------------------------------ rotation

    def rotate_keys(self, device_id: str) -> DeviceRecord:
        record = self._require_onboarded(device_id)
        old = record.keyset
        epoch = old.epoch + 1
        k_wifi = self.rng.bytes(32)
        new = derive_keyset(old.master, device_id, k_wifi, epoch)
        record.command_counter += 1
        counter = record.command_counter
        sealed = aead_seal(old.k_enc, proto.command_nonce(counter), k_wifi,
                           proto.wifi_key_aad(device_id, self.domain, epoch))
        try:
            result, _ = self._command(record, "rotate", encode_fields(epoch, sealed),
                                      reply_keys=new, counter=counter)
        except ExchangeTimeout:
            record.rotation_pending = True
            self._event(f"rotation pending {device_id}: no ack, staying on epoch {old.epoch}")
            return record
        if result != "staged":
            record.rotation_pending = True
            self._event(f"rotation refused by {device_id}: {result}")
            return record
        record.keyset = new
        record.rotation_pending = False
        self.ap_table.install(record.mac, k_wifi, self.rng.bytes(16))
        self._event(f"rotated {device_id} to epoch {epoch}")
        try:
            self._command(record, "rotate-commit")
        except ExchangeTimeout:
            # device activates the staged keys on the next command under them
            self._event(f"rotate-commit unacknowledged {device_id}")
        return record

    # ------------------------------------------------------- decommission

    def decommission(self, device_id: str, mode: DecommissionMode = DecommissionMode.RECYCLE):
        """Wipe the device, then scrub every local secret for it.

        Returns ``(record, transfer_note)``; the note is ``None`` for recycling.
        """
        record = self._require_onboarded(device_id)
        try:
            result, _ = self._command(record, "wipe")
            record.wipe_unconfirmed = result != "wiped"
        except ExchangeTimeout:
            record.wipe_unconfirmed = True
        if record.wipe_unconfirmed:
            self._alarm("wipe-unconfirmed", device_id, "no wipe acknowledgement")
        record.keyset = None
        record.d_pw = None
        record.approved_updates.clear()
        self.ap_table.remove(record.mac)
        ap = self.world.domain_aps.get(self.domain) if self.world else None
        if ap is not None:
            ap.revoke(record.mac)
        record.lifecycle = Lifecycle.DECOMMISSIONED
        self._event(f"decommissioned {device_id} ({mode.value})")
        note = {"serial": device_id, "mac": record.mac} if mode is DecommissionMode.TRANSFER else None
        return record, note

    # ------------------------------------------------------- persistence

    def save(self, path: str | Path, storage_key: bytes) -> None:
        doc = self.registry.to_document(storage_key)
        doc["guardian"] = {
            "guardian_id": self.guardian_id,
            "mac": self.mac,
            "domain": self.domain,
            "rng_seed": storage.seal_secret(storage_key, "guardian/rng", self.rng.seed),
            "rng_counter": self.rng.counter,
            "policy": {"auto_approve_security": self.policy.auto_approve_security,
                       "allow_downgrade": self.policy.allow_downgrade},
            "trust_anchors": [
                {"vendor_id": a.vendor_id, "public_key": a.public_key.hex(),
                 "channel_public_key": a.channel_public_key.hex(), "models": list(a.models),
                 "mac": a.mac}
                for a in self.trust.anchors.values()
            ],
            "feed_dir": str(self.feed_dir) if self.feed_dir else None,
            "alarms": [list(a) for a in self.alarms],
        }
        storage.write_document(path, doc)

    @classmethod
    def load(cls, path: str | Path, storage_key: bytes) -> "Guardian":
        doc = storage.read_document(path, REGISTRY_FORMAT)
        registry = Registry.from_document(doc, storage_key)
        try:
            g = doc["guardian"]
            rng = Drbg(storage.open_secret(storage_key, "guardian/rng", g["rng_seed"]), int(g["rng_counter"]))
            guardian = cls(g["guardian_id"], g["mac"], rng, g["domain"], UpdatePolicy(**g["policy"]))
            for a in g["trust_anchors"]:
                guardian.trust.add(TrustAnchor(a["vendor_id"], bytes.fromhex(a["public_key"]),
                                               bytes.fromhex(a["channel_public_key"]),
                                               tuple(a["models"]), a["mac"]))
            guardian.alarms = [tuple(a) for a in g.get("alarms", [])]
            if g.get("feed_dir"):
                guardian.feed_dir = Path(g["feed_dir"])
                try:
                    guardian.feed_entries = feedmod.read_index(guardian.feed_dir)
                except feedmod.FeedError:
                    guardian.feed_entries = []
        except (KeyError, TypeError, ValueError) as exc:
            raise storage.CorruptState(f"{path}: guardian section: {exc}") from None
        guardian.registry = registry
        return guardian
