"""Scripted attackers for the threat classes T1-T4.

Each script is an :class:`~iotguard.netsim.AdversaryScript`; some also have a
``strike(world)`` method for attacks that originate actively rather than by
tampering with frames in flight.
"""

from __future__ import annotations

from dataclasses import replace

from . import protocol as proto
from .crypto import Drbg
from .netsim import Action, AdversaryScript, Frame, Kind, Link, LinkKind, Rule, Threat, flip_byte, nth_matching
from .pake import CONFIRM, SHARE, SHARE_CONFIRM, Phase, Role, pake_start, pake_step


class PakeMitm(AdversaryScript):
    """Active man-in-the-middle on a device's open provisioning AP.

    Without the on-boarding password it can only guess; it splices its own
    SPAKE2 sessions between the Guardian and the device and records every key
    it manages to agree (there should be none).
    """

    def __init__(self, name: str = "pake-mitm", guess: bytes = b"password123",
                 rng: Drbg | None = None, target: str | None = None):
        super().__init__(name, Threat.T4)
        self.guess = guess
        self.rng = rng or Drbg(b"pake-mitm")
        self.target = target
        self.facing_guardian = None
        self.facing_device = None
        self._reply_to_guardian: bytes | None = None
        self.agreed_keys: list[bytes] = []

    def _collect(self) -> None:
        for s in (self.facing_guardian, self.facing_device):
            if s is not None and s.phase is Phase.DONE and s.session_key not in self.agreed_keys:
                self.agreed_keys.append(s.session_key)

    def intercept(self, frame: Frame):
        if frame.kind is not Kind.PAKE_BLOB or frame.link.kind is not LinkKind.DEVICE_AP:
            return Action.PASS, frame, []
        serial = frame.link.name
        if self.target and serial != self.target:
            return Action.PASS, frame, []
        device = self.world.devices.get(serial) if self.world else None
        from_device = device is not None and frame.src_mac == device.mac
        g_id, d_id = proto.pake_ids(serial)
        tag = frame.body[:1]
        if not from_device and tag == bytes([SHARE]):
            self.facing_guardian, _ = pake_start(Role.RESPONDER, self.guess, d_id, g_id, self.rng)
            self.facing_guardian, self._reply_to_guardian = pake_step(self.facing_guardian, frame.body)
            self.facing_device, share = pake_start(Role.INITIATOR, self.guess, g_id, d_id, self.rng)
            self.recorded.append(frame)
            return Action.MODIFY, replace(frame, body=share), []
        if from_device and tag == bytes([SHARE_CONFIRM]) and self.facing_device is not None:
            self.facing_device, _ = pake_step(self.facing_device, frame.body)
            self._collect()
            self.recorded.append(frame)
            if self._reply_to_guardian is not None:
                return Action.MODIFY, replace(frame, body=self._reply_to_guardian), []
        if not from_device and tag == bytes([CONFIRM]) and self.facing_guardian is not None:
            self.facing_guardian, _ = pake_step(self.facing_guardian, frame.body)
            self._collect()
        return Action.PASS, frame, []


class StaleCommandReplayer(AdversaryScript):
    """T3: records authenticated commands and replays each one once."""

    def __init__(self, name: str = "replay"):
        super().__init__(name, Threat.T3, mac="0a:dd:00:00:00:03")
        self._seen: set[bytes] = set()

    def intercept(self, frame: Frame):
        if frame.kind is Kind.COMMAND and frame.link.kind is LinkKind.DOMAIN_AP and frame.body not in self._seen:
            self._seen.add(frame.body)
            self.recorded.append(frame)
            return Action.INJECT, frame, [replace(frame, seq=0)]
        return Action.PASS, frame, []


class CommandForger(AdversaryScript):
    """T3: pushes unauthenticated commands (malware outside the update path).

    The forged frames spoof the Guardian's source address and carry a tag
    under a key the attacker invented.
    """

    def __init__(self, name: str = "forge-command", rng: Drbg | None = None):
        super().__init__(name, Threat.T3, mac="0a:dd:00:00:00:04")
        self.rng = rng or Drbg(b"forge-command")
        self.sent: list[Frame] = []

    def strike(self, world, guardian_mac: str, domain: str) -> str:
        for serial, dev in sorted(world.devices.items()):
            for name, payload in (("prepare-update", b""), ("wipe", b""), ("store", b"\x00" * 32)):
                body = proto.seal_command(self.rng.bytes(32), 1_000_000, name, payload)
                frame = Frame(guardian_mac, dev.mac, Link.domain_ap(domain), Kind.COMMAND, body)
                self.sent.append(frame)
                world.send(frame)
        world.settle()
        return f"sent {len(self.sent)}"


class RemoteIntruder(AdversaryScript):
    """T2: tries to get onto the domain AP with guessed or stolen secrets."""

    def __init__(self, name: str = "intruder", rng: Drbg | None = None):
        super().__init__(name, Threat.T2, mac="0a:dd:00:00:00:02")
        self.rng = rng or Drbg(b"intruder")
        self.accepted: list[str] = []

    def strike(self, world, domain: str, stolen: bytes | None = None,
               spoof_macs: list[str] | None = None) -> str:
        """Present ``stolen`` (or random guesses) under its own and spoofed MACs."""
        candidates = [stolen] if stolen else [self.rng.bytes(32) for _ in range(8)]
        for mac in [self.mac] + list(spoof_macs or []):
            for secret in candidates:
                if world.associate(domain, mac, secret):
                    self.accepted.append(mac)
        probe = Frame(self.mac, spoof_macs[0] if spoof_macs else "ff:ff:ff:ff:ff:ff",
                      Link.domain_ap(domain), Kind.COMMAND, b"probe")
        world.send(probe)
        world.settle()
        return f"accepted {len(self.accepted)}"


def _is_update_command(frame: Frame) -> bool:
    if frame.kind is not Kind.COMMAND or frame.link.kind is not LinkKind.DOMAIN_AP:
        return False
    return b"\x00\x00\x00\x06update" in frame.body


def update_tamperer(byte: int | None = None, name: str = "update-tamper") -> AdversaryScript:
    """T1: flips one bit inside the authenticated update command (default: mid-body)."""

    def mutate(frame: Frame) -> Frame:
        return flip_byte(len(frame.body) // 2 if byte is None else byte)(frame)

    return AdversaryScript(name, Threat.T1, [Rule(_is_update_command, Action.MODIFY, mutate)])


def drop_all(name: str = "drop-all", threat: Threat = Threat.T4) -> AdversaryScript:
    return AdversaryScript(name, threat, [Rule(lambda f: True, Action.DROP)])


def drop_kind(kind: Kind, nth: int | None = None, from_mac: str | None = None,
              name: str = "drop", threat: Threat = Threat.T4) -> AdversaryScript:
    def match(frame: Frame) -> bool:
        return frame.kind is kind and (from_mac is None or frame.src_mac == from_mac)

    trigger = match if nth is None else nth_matching(match, nth)
    return AdversaryScript(name, threat, [Rule(trigger, Action.DROP)])


def flip_kind(kind: Kind, position: int, nth: int = 0, mask: int = 0x01,
              name: str = "flip", threat: Threat = Threat.T4) -> AdversaryScript:
    trigger = nth_matching(lambda f: f.kind is kind, nth)
    return AdversaryScript(name, threat, [Rule(trigger, Action.MODIFY, flip_byte(position, mask))])


def eavesdropper(name: str = "eavesdrop") -> AdversaryScript:
    return AdversaryScript(name, Threat.T4, [Rule(lambda f: True, Action.RECORD)])

