"""Deterministic discrete-event message fabric with scripted adversaries.

Time is a logical tick that advances by one per delivered frame.  Frames are
delivered strictly in FIFO order; before each delivery every adversary whose
scope covers the frame's link may pass, drop, modify, record or inject.  The
complete run (frames, adversary actions, node events) is kept as a
:class:`Trace` that exports to a line-delimited, tab-separated text format.
"""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Protocol

from .crypto import Drbg

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_TICKS = 64
BROADCAST = "ff:ff:ff:ff:ff:ff"


class LinkKind(enum.Enum):
    DEVICE_AP = "DeviceAp"
    DOMAIN_AP = "DomainAp"
    WAN = "Wan"


@dataclass(frozen=True)
class Link:
    kind: LinkKind
    name: str = ""

    @classmethod
    def device_ap(cls, serial: str) -> "Link":
        return cls(LinkKind.DEVICE_AP, serial)

    @classmethod
    def domain_ap(cls, domain: str) -> "Link":
        return cls(LinkKind.DOMAIN_AP, domain)

    @classmethod
    def wan(cls) -> "Link":
        return cls(LinkKind.WAN)

    def __str__(self) -> str:
        return f"{self.kind.value}({self.name})" if self.name else self.kind.value


class Kind(enum.Enum):
    PAKE_BLOB = "PakeBlob"
    SEALED = "SealedPayload"
    COMMAND = "Command"
    STATUS = "Status"
    VENDOR = "VendorMsg"


@dataclass(frozen=True)
class Frame:
    src_mac: str
    dst_mac: str
    link: Link
    kind: Kind
    body: bytes
    seq: int = 0


class Threat(enum.Enum):
    T1 = "T1"  # forged software updates
    T2 = "T2"  # remote access-control bypass
    T3 = "T3"  # remote malware push outside the update path
    T4 = "T4"  # local attacker within wireless range


class Action(enum.Enum):
    PASS = "pass"
    DROP = "drop"
    MODIFY = "modify"
    INJECT = "inject"
    RECORD = "record"


class Node(Protocol):
    mac: str
    name: str

    def receive(self, frame: Frame) -> list[Frame]: ...


# --------------------------------------------------------------------------
# trace


@dataclass(frozen=True)
class TraceLine:
    seq: int
    link: str
    src: str
    dst: str
    kind: str
    body: str
    action: str

    def render(self) -> str:
        return "\t".join(
            [str(self.seq), self.link, self.src, self.dst, self.kind, self.body, self.action]
        )

    @property
    def is_event(self) -> bool:
        return self.kind == "Event"


@dataclass
class Trace:
    """Ordered record of everything that happened in a world.

    Frame lines carry ``(seq, link, src, dst, kind, body-hex, action)``.
    Event lines reuse the columns as ``(seq, "-", node, "-", "Event", text, "-")``.
    ``frames`` keeps the delivered/dropped :class:`Frame` objects in order.
    """

    lines: list[TraceLine] = field(default_factory=list)
    frames: list[tuple[Frame, str]] = field(default_factory=list)
    truncated: bool = False

    def export(self) -> str:
        out = [line.render() for line in self.lines]
        if self.truncated:
            out.append("#truncated")
        return "\n".join(out) + "\n"

    def events(self, node: str | None = None) -> list[str]:
        return [
            line.body
            for line in self.lines
            if line.is_event and (node is None or line.src == node)
        ]

    def has_event(self, prefix: str, node: str | None = None) -> bool:
        return any(e.startswith(prefix) for e in self.events(node))


def record_transcript(trace: Trace, predicate: Callable[[Frame], bool] | None = None,
                      delivered_only: bool = False) -> list[Frame]:
    """Frames of ``trace`` matching ``predicate``, in delivery order."""
    out = []
    for frame, action in trace.frames:
        if delivered_only and action not in ("pass", "record", "modify", "inject"):
            continue
        if predicate is None or predicate(frame):
            out.append(frame)
    return out


# --------------------------------------------------------------------------
# adversaries


@dataclass
class Rule:
    trigger: Callable[[Frame], bool]
    action: Action
    mutate: Callable[[Frame], Frame] | None = None
    inject: Callable[[Frame], list[Frame]] | None = None
    once: bool = False
    fired: int = 0


class AdversaryScript:
    """A scripted attacker.

    Local (T4) adversaries observe every link; remote ones (T1-T3) observe only
    the domain AP and WAN links.  Rules are checked in order: every matching
    RECORD rule stores the frame, and the first matching non-RECORD rule
    decides the frame's fate.  Subclasses may also act as addressable nodes.
    """

    def __init__(self, name: str, threat: Threat, rules: Iterable[Rule] = (),
                 mac: str = "0a:dd:00:00:00:01"):
        self.name = name
        self.threat = threat
        self.rules = list(rules)
        self.mac = mac
        self.recorded: list[Frame] = []
        self.world: World | None = None

    @property
    def local(self) -> bool:
        return self.threat is Threat.T4

    def sees(self, link: Link) -> bool:
        return self.local or link.kind is not LinkKind.DEVICE_AP

    def intercept(self, frame: Frame) -> tuple[Action, Frame | None, list[Frame]]:
        decided: tuple[Action, Frame | None, list[Frame]] | None = None
        for rule in self.rules:
            if rule.once and rule.fired:
                continue
            if not rule.trigger(frame):
                continue
            if rule.action is Action.RECORD:
                rule.fired += 1
                self.recorded.append(frame)
                continue
            if decided is not None:
                continue
            rule.fired += 1
            if rule.action is Action.DROP:
                decided = (Action.DROP, None, [])
            elif rule.action is Action.MODIFY:
                decided = (Action.MODIFY, rule.mutate(frame), [])
            elif rule.action is Action.INJECT:
                decided = (Action.INJECT, frame, list(rule.inject(frame)))
            else:
                decided = (Action.PASS, frame, [])
        return decided or (Action.PASS, frame, [])

    def receive(self, frame: Frame) -> list[Frame]:
        return []

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r}, {self.threat.value})"


def flip_byte(position: int, mask: int = 0x01) -> Callable[[Frame], Frame]:
    def mutate(frame: Frame) -> Frame:
        body = bytearray(frame.body)
        if position < len(body):
            body[position] ^= mask
        return replace(frame, body=bytes(body))

    return mutate


def nth_matching(predicate: Callable[[Frame], bool], n: int) -> Callable[[Frame], bool]:
    """Trigger that fires only on the n-th (0-based) frame satisfying ``predicate``."""
    seen = [0]

    def trigger(frame: Frame) -> bool:
        if not predicate(frame):
            return False
        hit = seen[0] == n
        seen[0] += 1
        return hit

    return trigger


# --------------------------------------------------------------------------
# domain access point


def associate(ap_table, mac: str, presented_secret: bytes) -> bool:
    """Accept iff the per-MAC table entry verifies the presented secret."""
    return ap_table.verify(mac, presented_secret)


class DomainAccessPoint:
    """The trust domain's AP; holds no shared password, only a per-MAC table."""

    def __init__(self, domain: str, table, owner_mac: str | None = None):
        self.domain = domain
        self.table = table
        self.owner_mac = owner_mac
        self.sessions: set[str] = set()

    def associate(self, mac: str, secret: bytes) -> bool:
        # a failed attempt must not tear down someone else's session for that MAC
        ok = associate(self.table, mac, secret)
        if ok:
            self.sessions.add(mac)
        return ok

    def revoke(self, mac: str) -> None:
        self.sessions.discard(mac)

    def is_associated(self, mac: str) -> bool:
        return mac in self.sessions


# --------------------------------------------------------------------------
# the world


class World:
    """All nodes, the pending frame queue, the adversaries and the trace."""

    def __init__(self, seed: int = 0, timeout_ticks: int = DEFAULT_TIMEOUT_TICKS):
        self.seed = seed
        self.rng = Drbg.from_int(seed)
        self.timeout_ticks = timeout_ticks
        self.tick = 0
        self._seq = 0
        self.queue: deque[Frame] = deque()
        self.nodes: dict[str, Node] = {}
        self.devices: dict[str, Node] = {}
        self.domain_aps: dict[str, DomainAccessPoint] = {}
        self.adversaries: list[AdversaryScript] = []
        self.trace = Trace()

    # -- topology

    def attach(self, node):
        if node.mac in self.nodes:
            raise ValueError(f"MAC {node.mac} already attached")
        self.nodes[node.mac] = node
        node.world = self
        if getattr(node, "is_device", False):
            self.devices[node.serial] = node
        return node

    def add_adversary(self, adversary: AdversaryScript) -> AdversaryScript:
        adversary.world = self
        self.adversaries.append(adversary)
        if adversary.mac not in self.nodes:
            self.nodes[adversary.mac] = adversary
        return adversary

    def add_domain_ap(self, domain: str, table, owner_mac: str | None = None) -> DomainAccessPoint:
        ap = DomainAccessPoint(domain, table, owner_mac)
        self.domain_aps[domain] = ap
        return ap

    def visible_aps(self) -> list[tuple[str, str]]:
        """(serial, mac) of every device AP currently beaconing, sorted by serial."""
        return sorted(
            (serial, dev.mac) for serial, dev in self.devices.items() if dev.ap_up
        )

    def associate(self, domain: str, mac: str, secret: bytes) -> bool:
        ap = self.domain_aps.get(domain)
        ok = ap is not None and ap.associate(mac, secret)
        self.log("domain-ap", f"associate {mac} {domain} {'accept' if ok else 'reject'}")
        return ok

    # -- trace

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def log(self, node: str, text: str) -> None:
        self.trace.lines.append(
            TraceLine(self._next_seq(), "-", node, "-", "Event", text.replace("\t", " "), "-")
        )

    # -- delivery

    def send(self, frames: Frame | Iterable[Frame] | None) -> None:
        if frames is None:
            return
        if isinstance(frames, Frame):
            frames = [frames]
        self.queue.extend(frames)

    def _record(self, frame: Frame, action: str) -> None:
        self.trace.frames.append((frame, action))
        self.trace.lines.append(
            TraceLine(frame.seq, str(frame.link), frame.src_mac, frame.dst_mac,
                      frame.kind.value, frame.body.hex(), action)
        )

    def _isolation_violation(self, frame: Frame) -> str | None:
        if frame.link.kind is LinkKind.DEVICE_AP:
            dev = self.devices.get(frame.link.name)
            if dev is None or not dev.ap_up:
                return "no-ap"
            if dev.mac not in (frame.src_mac, frame.dst_mac):
                return "link-isolation"
        elif frame.link.kind is LinkKind.DOMAIN_AP:
            ap = self.domain_aps.get(frame.link.name)
            if ap is None:
                return "no-ap"
            # the AP's owner is the wired side; every radio station must hold a session
            if frame.src_mac != ap.owner_mac and not ap.is_associated(frame.src_mac):
                return "unassociated"
            node = self.nodes.get(frame.dst_mac)
            if getattr(node, "is_device", False) and not ap.is_associated(frame.dst_mac):
                return "unassociated"
        return None

    def step(self) -> None:
        frame = replace(self.queue.popleft(), seq=self._next_seq())
        self.tick += 1
        injected: list[Frame] = []
        actions: list[str] = []
        current: Frame | None = frame
        for adv in self.adversaries:
            if current is None or not adv.sees(current.link):
                continue
            action, current, extra = adv.intercept(current)
            if action is not Action.PASS:
                actions.append(f"{action.value}:{adv.threat.value}:{adv.name}")
            injected.extend(extra)
        if current is None:
            self._record(frame, ",".join(actions))
            self.queue.extend(injected)
            return
        current = replace(current, seq=frame.seq)
        problem = self._isolation_violation(current)
        dst = self.nodes.get(current.dst_mac)
        if problem is None and dst is None:
            problem = "undeliverable"
        if problem is not None:
            actions.append(problem)
        self._record(current, ",".join(actions) or "pass")
        if problem is None:
            self.queue.extend(dst.receive(current))
        self.queue.extend(injected)

    def run(self, event_limit: int | None = None, until: Callable[[], bool] | None = None,
            deadline: int | None = None) -> Trace:
        """Deliver queued frames until the queue drains, ``until()`` holds,
        ``deadline`` tick passes, or ``event_limit`` deliveries happened."""
        delivered = 0
        while self.queue:
            if until is not None and until():
                break
            if deadline is not None and self.tick >= deadline:
                break
            if event_limit is not None and delivered >= event_limit:
                self.trace.truncated = True
                log.warning("event limit %d reached with %d frames queued", event_limit, len(self.queue))
                break
            self.step()
            delivered += 1
        return self.trace

    def settle(self, event_limit: int = 10_000) -> Trace:
        return self.run(event_limit=event_limit)
