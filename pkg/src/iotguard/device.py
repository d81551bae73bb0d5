"""Simulated commodity IoT device.

The device keeps only what a cheap endpoint would: its sticker password, a
Lamport chain *verifier* (never the seed), a reset counter, and, once
on-boarded, the working keys.  It never verifies vendor signatures; firmware
installs are gated by a MAC under the working key established with the
Guardian.
"""

from __future__ import annotations

import enum
import logging

from . import protocol as proto
from . import storage
from .crypto import (
    AeadError,
    ChainState,
    CryptoError,
    Drbg,
    KeySet,
    aead_open,
    chain_verify,
    counter_nonce,
    decode_fields,
    derive_keyset,
    dh_keypair,
    dh_shared,
    digest,
    encode_fields,
    field_int,
    iterate_hash,
    kdf,
    mac_verify,
    working_keys,
)
from .netsim import Frame, Kind, LinkKind
from .pake import SHARE, Phase, Role, pake_start, pake_step

log = logging.getLogger(__name__)


class DeviceClass(enum.Enum):
    HIGH_END = "HighEnd"
    MID_LEVEL = "MidLevel"
    LOW_END = "LowEnd"


class DeviceState(enum.Enum):
    FACTORY = "Factory"
    PROVISIONING = "Provisioning"
    ONBOARDED = "Onboarded"
    DECOMMISSIONED = "Decommissioned"


CAPABILITIES = {
    DeviceClass.HIGH_END: frozenset({"pake", "mac", "aead-data", "sig"}),
    DeviceClass.MID_LEVEL: frozenset({"pake", "mac", "aead-data", "sig"}),
    DeviceClass.LOW_END: frozenset({"pake", "mac"}),
}


class DeviceError(Exception):
    pass


class DeviceSim:
    is_device = True

    def __init__(self, serial: str, mac: str, vendor_id: str, model: str,
                 device_class: DeviceClass, d_pw: bytes, chain: ChainState,
                 rng: Drbg, firmware_version: str = "1.0", firmware_payload: bytes = b""):
        if chain.seed_w is not None:
            raise ValueError("devices hold only the chain verifier, never the seed")
        self.serial = serial
        self.mac = mac
        self.vendor_id = vendor_id
        self.model = model
        self.device_class = device_class
        self.state = DeviceState.FACTORY
        self.factory_password: bytes | None = d_pw
        self.session_password: bytes | None = None
        self.onboarded_flag = False
        self.reset_count_c = 0
        self.chain = chain
        self.keys: KeySet | None = None
        self.firmware = (firmware_version, digest(firmware_payload))
        self.sensitive_store: dict[str, bytes] = {}
        self.update_ready = False
        self.domain: str | None = None
        self.associated = False
        self.rng = rng
        self.world = None
        self.events: list[str] = []
        self._pake = None
        self._pake_binding = b""
        self._pending_master: bytes | None = None
        self._staged: KeySet | None = None
        self._last_command = 0
        self._transfer_key: bytes | None = None

    # ------------------------------------------------------------------ basics

    @property
    def name(self) -> str:
        return f"device:{self.serial}"

    @property
    def d_pw(self) -> bytes | None:
        """Current on-boarding authenticator."""
        return self.session_password if self.session_password is not None else self.factory_password

    @property
    def capabilities(self) -> frozenset[str]:
        return CAPABILITIES[self.device_class]

    @property
    def ap_up(self) -> bool:
        return self.state in (DeviceState.PROVISIONING, DeviceState.ONBOARDED)

    def _event(self, text: str) -> None:
        self.events.append(text)
        if self.world is not None:
            self.world.log(self.name, text)

    def _set_state(self, new: DeviceState) -> None:
        if new is not self.state:
            self._event(f"state {self.state.value}->{new.value}")
            self.state = new

    def secrets(self) -> list[bytes]:
        """Every secret byte string the device currently holds (for leak scans)."""
        out = [s for s in (self.factory_password, self.session_password, self._pending_master) if s]
        if self.keys:
            out += self.keys.secrets()
        if self._staged:
            out += self._staged.secrets()
        return out

    # ------------------------------------------------------------ local actions

    def hard_reset(self) -> "DeviceSim":
        """Physical reset button: re-enter provisioning, bump the counter.

        Sensitive user data survives; wiping is a separate step.
        """
        self.reset_count_c += 1
        self.onboarded_flag = False
        self.keys = None
        self._staged = None
        self._pake = None
        self._pending_master = None
        self.session_password = None
        self._transfer_key = None
        self.update_ready = False
        self._disassociate()
        self._last_command = 0
        self._pake_binding = b""
        self._event(f"hard-reset c={self.reset_count_c}")
        self._set_state(DeviceState.PROVISIONING)
        return self

    def read_reset_counter(self) -> int:
        if self.state is not DeviceState.PROVISIONING:
            raise DeviceError("reset counter is only readable in provisioning state")
        return self.reset_count_c

    def record_user_data(self, label: str, value: bytes) -> None:
        """Normal device operation accumulating sensitive data (camera clips, schedules...)."""
        if self.state is DeviceState.DECOMMISSIONED:
            raise DeviceError("decommissioned device stores nothing")
        self.sensitive_store[label] = value

    def wipe(self, leave_network: bool = True) -> "DeviceSim":
        """Remove sensitive data, keys and the retired sticker password.

        A wipe ordered over the domain AP keeps the radio session long enough
        to acknowledge; the Guardian revokes it afterwards.
        """
        self.sensitive_store.clear()
        self.keys = None
        self._staged = None
        self._pending_master = None
        self._pake = None
        self.session_password = None
        self.factory_password = None
        self.update_ready = False
        if leave_network:
            self._disassociate()
        else:
            self.associated = False
            self.domain = None
        self._event("wiped")
        self._set_state(DeviceState.DECOMMISSIONED)
        return self

    # ------------------------------------------------------------- persistence

    def to_document(self, storage_key: bytes) -> dict:
        """Durable state; secrets are sealed. In-flight protocol state is not kept."""
        def seal(label: str, value: bytes | None):
            return None if value is None else storage.seal_secret(storage_key, f"{self.serial}/{label}", value)

        return {
            "serial": self.serial,
            "mac": self.mac,
            "vendor_id": self.vendor_id,
            "model": self.model,
            "device_class": self.device_class.value,
            "state": self.state.value,
            "factory_password": seal("factory_password", self.factory_password),
            "session_password": seal("session_password", self.session_password),
            "onboarded_flag": self.onboarded_flag,
            "reset_count_c": self.reset_count_c,
            "chain": {"t": self.chain.t, "index": self.chain.index, "verifier": self.chain.verifier.hex()},
            "keys": seal("keys", self.keys.to_bytes() if self.keys else None),
            "staged": seal("staged", self._staged.to_bytes() if self._staged else None),
            "firmware": [self.firmware[0], self.firmware[1].hex()],
            "sensitive_store": seal("sensitive_store", encode_fields(
                *[x for k in sorted(self.sensitive_store) for x in (k, self.sensitive_store[k])])),
            "update_ready": self.update_ready,
            "domain": self.domain,
            "associated": self.associated,
            "last_command": self._last_command,
            "rng_seed": seal("rng", self.rng.seed),
            "rng_counter": self.rng.counter,
        }

    @classmethod
    def from_document(cls, doc: dict, storage_key: bytes) -> "DeviceSim":
        serial = doc["serial"]

        def unseal(label: str):
            value = doc[label if label != "rng" else "rng_seed"]
            return None if value is None else storage.open_secret(storage_key, f"{serial}/{label}", value)

        chain = ChainState(None, int(doc["chain"]["t"]), int(doc["chain"]["index"]),
                           bytes.fromhex(doc["chain"]["verifier"]))
        dev = cls(serial, doc["mac"], doc["vendor_id"], doc["model"], DeviceClass(doc["device_class"]),
                  unseal("factory_password"), chain, Drbg(unseal("rng"), int(doc["rng_counter"])),
                  firmware_version=doc["firmware"][0])
        dev.firmware = (doc["firmware"][0], bytes.fromhex(doc["firmware"][1]))
        dev.state = DeviceState(doc["state"])
        dev.session_password = unseal("session_password")
        dev.onboarded_flag = bool(doc["onboarded_flag"])
        dev.reset_count_c = int(doc["reset_count_c"])
        keys, staged = unseal("keys"), unseal("staged")
        dev.keys = KeySet.from_bytes(keys) if keys else None
        dev._staged = KeySet.from_bytes(staged) if staged else None
        store = decode_fields(unseal("sensitive_store"))
        dev.sensitive_store = {store[i].decode(): store[i + 1] for i in range(0, len(store), 2)}
        dev.update_ready = bool(doc["update_ready"])
        dev.domain = doc["domain"]
        dev.associated = bool(doc["associated"])
        dev._last_command = int(doc["last_command"])
        return dev

    # ----------------------------------------------------------- chain verifier

    def verify_next_password(self, candidate: bytes) -> bool:
        """Check a vendor-issued ``w_c`` against the stored chain verifier.

        The verifier sits at chain position ``chain.index``; a candidate for the
        current reset count ``c`` must hash to it in exactly ``c - index`` steps
        (a single step when every reset was paired with an issuance).
        """
        if self.state is not DeviceState.PROVISIONING:
            return False
        steps = self.reset_count_c - self.chain.index
        if steps < 1 or self.reset_count_c > self.chain.t:
            self._event(f"next-password reject c={self.reset_count_c}")
            return False
        if not chain_verify(iterate_hash(candidate, steps - 1), self.chain.verifier):
            self._event(f"next-password reject c={self.reset_count_c}")
            return False
        self.chain.verifier = candidate
        self.chain.index = self.reset_count_c
        self.session_password = candidate
        self._event(f"next-password accept c={self.reset_count_c}")
        return True

    # ------------------------------------------------------------------ update

    def apply_update(self, package_bytes: bytes, tag: bytes) -> bool:
        ready, self.update_ready = self.update_ready, False
        if self.state is not DeviceState.ONBOARDED or self.keys is None or not ready:
            self._event("update reject not-ready")
            return False
        if not mac_verify(self.keys.k_mac, package_bytes, tag):
            self._event("update reject bad-mac")
            return False
        try:
            pkg = proto.decode_package(package_bytes)
        except (ValueError, UnicodeDecodeError):
            self._event("update reject malformed")
            return False
        if pkg.model != self.model:
            self._event(f"update reject model {pkg.model}")
            return False
        self.firmware = (pkg.version, digest(pkg.payload))
        self._event(f"firmware {pkg.version}")
        return True

    # ------------------------------------------------------------------ frames

    def receive(self, frame: Frame) -> list[Frame]:
        return self.handle_frame(frame)

    def handle_frame(self, frame: Frame) -> list[Frame]:
        if self.state in (DeviceState.FACTORY, DeviceState.DECOMMISSIONED):
            return []
        if frame.link.kind is LinkKind.DEVICE_AP:
            return self._on_device_ap(frame)
        if frame.link.kind is LinkKind.DOMAIN_AP and self.state is DeviceState.ONBOARDED:
            return self._on_command(frame)
        return []

    def _reply(self, frame: Frame, kind: Kind, body: bytes) -> list[Frame]:
        return [Frame(self.mac, frame.src_mac, frame.link, kind, body)]

    def _on_device_ap(self, frame: Frame) -> list[Frame]:
        if frame.kind is Kind.PAKE_BLOB:
            return self._on_pake(frame)
        try:
            name, fields = proto.parse(frame.body)
        except (ValueError, UnicodeDecodeError):
            return []
        if name == "hello":
            return self._reply(frame, Kind.STATUS, proto.message(
                "status", self.serial, self.model, self.state.value,
                int(self.onboarded_flag), int(self.d_pw is not None)))
        if name == "counter":
            if self.state is not DeviceState.PROVISIONING:
                return self._reply(frame, Kind.STATUS, proto.message("refused", "counter"))
            return self._reply(frame, Kind.STATUS, proto.message(
                "counter", self.serial, self.mac, self.reset_count_c))
        if name == "wifi-key" and frame.kind is Kind.SEALED:
            return self._on_wifi_key(frame, fields)
        if name == "xfer-hello" and frame.kind is Kind.COMMAND:
            return self._on_transfer_hello(frame, fields)
        if name == "next-pw" and frame.kind is Kind.SEALED:
            return self._on_next_password(frame, fields)
        return []

    def _on_pake(self, frame: Frame) -> list[Frame]:
        if self.onboarded_flag:
            return self._reply(frame, Kind.STATUS, proto.message("already-onboarded", self.serial))
        if self.state is not DeviceState.PROVISIONING:
            return []
        if self.d_pw is None:
            return self._reply(frame, Kind.STATUS, proto.message("no-password", self.serial))
        blob = frame.body
        if blob[:1] == bytes([SHARE]):
            if self._pake is not None and not self._pake.finished:
                self._event("pake restart")
            g_id, d_id = proto.pake_ids(self.serial, self._pake_binding)
            self._pake, _ = pake_start(Role.RESPONDER, self.d_pw, d_id, g_id, self.rng)
            self._pending_master = None
        elif self._pake is None:
            return []
        session, out = pake_step(self._pake, blob)
        if session.phase is Phase.DONE:
            self._pending_master = session.session_key
            self._event("pake done")
        elif session.phase is Phase.ABORTED:
            self._pake = None
            self._pending_master = None
            self._event(f"pake aborted: {session.abort_reason}")
        if out is None:
            return []
        return self._reply(frame, Kind.PAKE_BLOB, out)

    def _on_wifi_key(self, frame: Frame, fields: list[bytes]) -> list[Frame]:
        if self.state is not DeviceState.PROVISIONING or self._pending_master is None:
            return []
        try:
            domain_raw, sealed = fields
            domain = domain_raw.decode()
            k_enc, _ = working_keys(self._pending_master, self.serial, 0)
            nonce = counter_nonce(proto.DIR_GUARDIAN_TO_DEVICE, 0)
            if sealed[:12] != nonce:
                raise AeadError("unexpected nonce")
            k_wifi = aead_open(k_enc, nonce, sealed[12:], proto.wifi_key_aad(self.serial, domain, 0))
        except (ValueError, AeadError, UnicodeDecodeError):
            self._event("wifi-key reject")
            return []
        self.keys = derive_keyset(self._pending_master, self.serial, k_wifi, 0)
        self._pending_master = None
        self._pake = None
        self.session_password = None
        self._transfer_key = None
        self._pake_binding = b""
        self.onboarded_flag = True
        self.domain = domain
        self._last_command = 0
        self._set_state(DeviceState.ONBOARDED)
        self._associate()
        version, fw_digest = self.firmware
        return self._reply(frame, Kind.STATUS, proto.seal_reply(
            self.keys.k_mac, 0, "onboarded", "ok", encode_fields(version, fw_digest)))

    def _associate(self) -> None:
        if self.world is not None and self.keys is not None and self.domain is not None:
            self.associated = self.world.associate(self.domain, self.mac, self.keys.k_wifi)

    def _disassociate(self) -> None:
        if self.world is not None and self.domain in self.world.domain_aps:
            self.world.domain_aps[self.domain].revoke(self.mac)
        self.associated = False
        self.domain = None

    # ---------------------------------------------------------------- transfer

    def _on_transfer_hello(self, frame: Frame, fields: list[bytes]) -> list[Frame]:
        if self.state is not DeviceState.PROVISIONING or len(fields) != 1:
            return []
        g_pub = fields[0]
        seed, d_pub = dh_keypair(self.rng.bytes(32))
        try:
            shared = dh_shared(seed, g_pub)
        except CryptoError:
            return []
        binding = digest(encode_fields(b"xfer", self.serial, g_pub, d_pub))
        self._transfer_key = kdf(shared, "transfer-channel", binding)
        self._pake_binding = binding
        return self._reply(frame, Kind.COMMAND, proto.message("xfer-hello", d_pub))

    def _on_next_password(self, frame: Frame, fields: list[bytes]) -> list[Frame]:
        if self._transfer_key is None or len(fields) != 2:
            return []
        try:
            c = field_int(fields[0])
            sealed = fields[1]
            if sealed[:12] != counter_nonce(proto.DIR_TRANSFER, 0):
                raise AeadError("unexpected nonce")
            candidate = aead_open(
                self._transfer_key, sealed[:12], sealed[12:],
                encode_fields(b"next-pw", self.serial, c))
        except (ValueError, AeadError):
            return self._reply(frame, Kind.STATUS, proto.message("next-pw", "reject"))
        if c != self.reset_count_c or not self.verify_next_password(candidate):
            return self._reply(frame, Kind.STATUS, proto.message("next-pw", "reject"))
        return self._reply(frame, Kind.STATUS, proto.message("next-pw", "accept"))

    # ---------------------------------------------------------------- commands

    def _open(self, body: bytes):
        if self.keys is not None:
            opened = proto.open_command(self.keys.k_mac, body)
            if opened is not None:
                return opened
        if self._staged is not None:
            opened = proto.open_command(self._staged.k_mac, body)
            if opened is not None:
                self._activate_staged()
                return opened
        return None

    def _activate_staged(self) -> None:
        self.keys, self._staged = self._staged, None
        self._event(f"keys epoch {self.keys.epoch}")
        self._associate()

    def _on_command(self, frame: Frame) -> list[Frame]:
        if frame.kind is not Kind.COMMAND:
            return []
        opened = self._open(frame.body)
        if opened is None:
            self._event("command dropped: bad mac")
            return []
        counter, name, payload = opened
        if counter <= self._last_command:
            self._event(f"command dropped: stale counter {counter}")
            return []
        self._last_command = counter
        result, data, reply_keys = self._dispatch(counter, name, payload)
        if reply_keys is None:
            return []
        return self._reply(frame, Kind.STATUS, proto.seal_reply(reply_keys.k_mac, counter, name, result, data))

    def _dispatch(self, counter: int, name: str, payload: bytes):
        keys = self.keys
        if name == "status":
            version, fw_digest = self.firmware
            return "ok", encode_fields(version, fw_digest, self.keys.epoch), keys
        if name == "prepare-update":
            self.update_ready = True
            return "ok", b"", keys
        if name == "update":
            try:
                package_bytes, tag = decode_fields(payload, 2)
            except ValueError:
                self.update_ready = False
                return "rejected", b"", keys
            ok = self.apply_update(package_bytes, tag)
            return ("accepted" if ok else "rejected"), self.firmware[0].encode(), keys
        if name == "rotate":
            return self._on_rotate(counter, payload)
        if name == "rotate-commit":
            # a command verifying under the staged key has already activated it
            return "ok", encode_fields(self.keys.epoch), self.keys
        if name == "store":
            if "aead-data" not in self.capabilities:
                return "unsupported", b"", keys
            try:
                plain = aead_open(keys.k_enc, proto.command_nonce(counter), payload,
                                  encode_fields(b"store", self.serial))
                label, value = decode_fields(plain, 2)
            except (AeadError, ValueError):
                return "rejected", b"", keys
            self.sensitive_store[label.decode()] = value
            return "ok", b"", keys
        if name == "wipe":
            self.wipe(leave_network=False)
            return "wiped", b"", keys
        return "unknown", b"", keys

    def _on_rotate(self, counter: int, payload: bytes):
        keys = self.keys
        try:
            epoch_raw, sealed = decode_fields(payload, 2)
            epoch = field_int(epoch_raw)
            if epoch != keys.epoch + 1:
                return "bad-epoch", b"", keys
            k_wifi = aead_open(keys.k_enc, proto.command_nonce(counter), sealed,
                               proto.wifi_key_aad(self.serial, self.domain, epoch))
        except (AeadError, ValueError):
            return "rejected", b"", keys
        self._staged = derive_keyset(keys.master, self.serial, k_wifi, epoch)
        self._event(f"keys staged epoch {epoch}")
        return "staged", b"", self._staged
