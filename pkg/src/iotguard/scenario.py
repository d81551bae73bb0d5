"""Plain-text scenario files and their runner.

One directive per line, ``#`` starts a comment, tokens are shell-quoted.
Options are ``key=value`` tokens.  A scenario is parsed completely (including
reference checks: every serial, guardian, vendor, update and adversary must be
introduced before use) before anything runs.  ``expect`` lines are evaluated
at their position in the file against the world, registries and trace.
"""

from __future__ import annotations

import logging
import shlex
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from . import feed as feedmod
from .adversaries import (
    CommandForger,
    PakeMitm,
    RemoteIntruder,
    StaleCommandReplayer,
    drop_all,
    drop_kind,
    eavesdropper,
    flip_kind,
    update_tamperer,
)
from .crypto import Drbg, KeySet, chain_init, chain_password, digest, iterate_hash
from .device import DeviceClass, DeviceSim, DeviceState
from .guardian import (
    DecommissionMode,
    Guardian,
    GuardianError,
    PriorBoardingAlarm,
    TransferRefused,
    UpdatePolicy,
)
from .netsim import AdversaryScript, Frame, Kind, Link, LinkKind, Threat, World
from . import protocol as proto
from .vendor import Vendor

log = logging.getLogger(__name__)

SCENARIO_SUFFIX = ".scn"
BUNDLED_DIR = Path(__file__).parent / "scenarios"


class ScenarioError(Exception):
    """Parse or reference error; ``line`` is 1-based."""

    def __init__(self, line: int, message: str, source: str = "<scenario>"):
        super().__init__(f"{source}:{line}: {message}")
        self.line = line


@dataclass
class Directive:
    line: int
    verb: str
    args: list[str]
    opts: dict[str, str]
    text: str


@dataclass
class Scenario:
    name: str
    seed: int
    steps: list[Directive]
    source: str = "<scenario>"

    @property
    def expectations(self) -> list[Directive]:
        return [d for d in self.steps if d.verb == "expect"]


# verb -> (min positional args, max positional args, allowed options)
DIRECTIVES: dict[str, tuple[int, int, frozenset[str]]] = {
    "scenario": (1, 1, frozenset()),
    "seed": (1, 1, frozenset()),
    "timeout": (1, 1, frozenset()),
    "vendor": (1, 1, frozenset({"mac", "t"})),
    "guardian": (1, 1, frozenset({"mac", "policy"})),
    "trust": (2, 2, frozenset()),
    "provision": (1, 1, frozenset({"vendor", "model", "class", "mac", "version"})),
    "provision-fleet": (2, 2, frozenset({"vendor", "model", "class", "version"})),
    "reset": (1, 1, frozenset({"times"})),
    "record": (3, 3, frozenset()),
    "roster": (2, 2, frozenset()),
    "roster-transfer": (2, 2, frozenset()),
    "onboard": (2, 2, frozenset()),
    "onboard-visible": (1, 1, frozenset()),
    "store": (4, 4, frozenset()),
    "status": (2, 2, frozenset()),
    "publish-update": (4, 4, frozenset({"id", "payload", "size"})),
    "tamper-update": (2, 2, frozenset()),
    "discover": (1, 1, frozenset()),
    "approve": (3, 3, frozenset()),
    "push-update": (3, 3, frozenset()),
    "rotate": (2, 2, frozenset()),
    "snapshot": (2, 2, frozenset()),
    "try-associate": (2, 2, frozenset({"key", "as"})),
    "try-command": (2, 2, frozenset({"key"})),
    "decommission": (3, 3, frozenset()),
    "transfer-info": (2, 2, frozenset()),
    "request-password": (2, 2, frozenset({"c"})),
    "transfer": (2, 2, frozenset()),
    "reuse-password": (2, 2, frozenset()),
    "adversary": (1, 1, frozenset({"name", "target", "kind", "nth", "pos", "from", "threat", "byte", "guess"})),
    "strike": (2, 2, frozenset({"key"})),
    "clear-adversaries": (0, 0, frozenset()),
    "chain-sweep": (2, 2, frozenset()),
    "expect": (1, 6, frozenset({"issued", "refused"})),
}

EXPECTATIONS = {
    "state": 2, "lifecycle": 3, "keys-agree": 2, "alarm": 2, "no-alarm": 1, "firmware": 2,
    "history": 3, "last": 1, "not-contacted": 1, "store-empty": 1, "no-secrets": 2,
    "event": 2, "no-event": 2, "transcript-clean": 2, "mitm-keys": 2, "associations": 2,
    "vendor-log": 2, "counter": 2, "epoch": 3, "pending": 3, "trace-truncated": 1,
}

ADVERSARY_KINDS = {"pake-mitm", "drop-all", "drop", "flip", "eavesdrop", "replay",
                   "update-tamper", "forge-command", "intruder"}


def _tokenize(raw: str, line: int, source: str) -> list[str]:
    try:
        return shlex.split(raw, comments=True)
    except ValueError as exc:
        raise ScenarioError(line, f"cannot tokenize: {exc}", source) from None


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    name, seed = Path(source).stem, 0
    steps: list[Directive] = []
    known = {"vendor": set(), "guardian": set(), "serial": set(), "update": set(),
             "adversary": set(), "snapshot": set(), "model": set()}

    def need(kind: str, value: str, line: int) -> None:
        if value not in known[kind]:
            label = "unprovisioned serial" if kind == "serial" else f"unknown {kind}"
            raise ScenarioError(line, f"{label} {value!r}", source)

    def integer(value: str, line: int, what: str) -> int:
        try:
            return int(value, 0)
        except ValueError:
            raise ScenarioError(line, f"{what} must be an integer, got {value!r}", source) from None

    for line_no, raw in enumerate(text.splitlines(), start=1):
        tokens = _tokenize(raw, line_no, source)
        if not tokens:
            continue
        verb, rest = tokens[0], tokens[1:]
        if verb not in DIRECTIVES:
            raise ScenarioError(line_no, f"unknown directive {verb!r}", source)
        lo, hi, allowed = DIRECTIVES[verb]
        # key=value is an option only for keys the directive accepts
        args, opts = [], {}
        for token in rest:
            key, sep, value = token.partition("=")
            if sep and key in allowed:
                opts[key] = value
            else:
                args.append(token)
        if not lo <= len(args) <= hi:
            raise ScenarioError(line_no, f"{verb} takes {lo}..{hi} arguments, got {len(args)}", source)
        d = Directive(line_no, verb, args, opts, raw.split("#", 1)[0].strip())

        if verb == "scenario":
            name = args[0]
        elif verb == "seed":
            seed = integer(args[0], line_no, "seed")
        elif verb in ("timeout",):
            integer(args[0], line_no, verb)
        elif verb == "vendor":
            known["vendor"].add(args[0])
        elif verb == "guardian":
            known["guardian"].add(args[0])
            if opts.get("policy", "default") not in ("default", "permissive"):
                raise ScenarioError(line_no, f"unknown policy {opts['policy']!r}", source)
        elif verb == "trust":
            need("guardian", args[0], line_no)
            need("vendor", args[1], line_no)
        elif verb in ("provision", "provision-fleet"):
            if "vendor" not in opts or "model" not in opts:
                raise ScenarioError(line_no, f"{verb} needs vendor= and model=", source)
            need("vendor", opts["vendor"], line_no)
            if "class" in opts and opts["class"] not in {c.value for c in DeviceClass}:
                raise ScenarioError(line_no, f"unknown device class {opts['class']!r}", source)
            known["model"].add(opts["model"])
            if verb == "provision":
                known["serial"].add(args[0])
            else:
                for i in range(integer(args[1], line_no, "fleet size")):
                    known["serial"].add(fleet_serial(args[0], i))
        elif verb in ("reset", "snapshot", "record"):
            if not (verb == "reset" and args[0] == "*"):
                need("serial", args[0], line_no)
            if verb == "snapshot":
                known["snapshot"].add(args[1])
        elif verb in ("roster", "roster-transfer", "onboard", "store", "status", "rotate", "decommission",
                      "transfer-info", "request-password", "transfer", "reuse-password",
                      "try-associate", "try-command", "approve", "push-update"):
            need("guardian", args[0], line_no)
            if args[1] != "*":
                need("serial", args[1], line_no)
            if verb in ("approve", "push-update"):
                need("update", args[2], line_no)
            if verb == "decommission" and args[2].lower() not in ("recycle", "transfer"):
                raise ScenarioError(line_no, f"mode must be recycle or transfer, got {args[2]!r}", source)
            if verb in ("try-associate", "try-command"):
                key = opts.get("key", args[1])
                if key not in known["snapshot"] and key not in known["serial"]:
                    raise ScenarioError(line_no, f"unknown key source {key!r}", source)
        elif verb in ("onboard-visible", "discover"):
            need("guardian", args[0], line_no)
        elif verb == "publish-update":
            need("vendor", args[0], line_no)
            try:
                proto.Reason(args[3])
                proto.version_key(args[2])
            except ValueError as exc:
                raise ScenarioError(line_no, str(exc), source) from None
            known["update"].add(opts.get("id", f"{args[1]}-{args[2]}"))
        elif verb == "tamper-update":
            need("update", args[0], line_no)
            if args[1] not in ("flip", "foreign", "forge"):
                raise ScenarioError(line_no, "tamper mode must be flip, foreign or forge", source)
        elif verb == "adversary":
            if args[0] not in ADVERSARY_KINDS:
                raise ScenarioError(line_no, f"unknown adversary script {args[0]!r}", source)
            if args[0] in ("drop", "flip") and "kind" not in opts:
                raise ScenarioError(line_no, f"{args[0]} needs kind=", source)
            if "kind" in opts and opts["kind"] not in {k.value for k in Kind}:
                raise ScenarioError(line_no, f"unknown frame kind {opts['kind']!r}", source)
            if "threat" in opts and opts["threat"] not in {t.value for t in Threat}:
                raise ScenarioError(line_no, f"unknown threat {opts['threat']!r}", source)
            known["adversary"].add(opts.get("name", args[0]))
        elif verb == "strike":
            need("adversary", args[0], line_no)
            need("guardian", args[1], line_no)
        elif verb == "chain-sweep":
            integer(args[0], line_no, "chain length")
            integer(args[1], line_no, "seed count")
        elif verb == "expect":
            what = args[0]
            if what not in EXPECTATIONS:
                raise ScenarioError(line_no, f"unknown expectation {what!r}", source)
            if len(args) - 1 != EXPECTATIONS[what]:
                raise ScenarioError(line_no, f"expect {what} takes {EXPECTATIONS[what]} arguments", source)
            if what in ("state", "firmware", "not-contacted", "store-empty", "counter"):
                need("serial", args[1], line_no)
            if what in ("lifecycle", "keys-agree", "history", "no-secrets", "transcript-clean", "epoch", "pending",
                        "alarm", "no-alarm"):
                need("guardian", args[1], line_no)
            if what in ("mitm-keys", "associations"):
                need("adversary", args[1], line_no)
            if what == "vendor-log":
                need("vendor", args[1], line_no)
        steps.append(d)
    if not steps:
        raise ScenarioError(0, "empty scenario", source)
    return Scenario(name, seed, steps, source)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(0, str(exc), str(path)) from None
    return parse_scenario(text, str(path))


def bundled_scenarios() -> list[Path]:
    return sorted(BUNDLED_DIR.glob(f"*{SCENARIO_SUFFIX}"))


def fleet_serial(prefix: str, i: int) -> str:
    return f"{prefix}-{i:04d}"


def default_mac(label: str, first: int = 0x02) -> str:
    return ":".join([f"{first:02x}"] + [f"{b:02x}" for b in digest(label.encode())[:5]])


# --------------------------------------------------------------------------
# report


@dataclass
class StepResult:
    line: int
    text: str
    outcome: str


@dataclass
class ExpectationResult:
    line: int
    text: str
    passed: bool
    detail: str = ""


@dataclass
class Report:
    name: str
    seed: int
    steps: list[StepResult] = field(default_factory=list)
    expectations: list[ExpectationResult] = field(default_factory=list)
    trace_path: Path | None = None
    files: list[Path] = field(default_factory=list)
    truncated: bool = False
    runner: "Runner | None" = field(default=None, repr=False, compare=False)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.expectations)

    def render_tsv(self) -> str:
        rows = [["scenario", self.name, "seed", str(self.seed)]]
        rows += [["step", str(s.line), s.text, s.outcome] for s in self.steps]
        rows += [["expect", str(e.line), e.text, "pass" if e.passed else "fail", e.detail]
                 for e in self.expectations]
        ok = sum(e.passed for e in self.expectations)
        rows.append(["result", "pass" if self.passed else "fail", f"{ok}/{len(self.expectations)}"])
        return "".join("\t".join(c.replace("\t", " ") for c in r) + "\n" for r in rows)


# --------------------------------------------------------------------------
# runner


class Runner:
    def __init__(self, scenario: Scenario, feed_dir: Path):
        self.scenario = scenario
        self.world = World(scenario.seed)
        self.feed_dir = feed_dir
        self.vendors: dict[str, Vendor] = {}
        self.guardians: dict[str, Guardian] = {}
        self.devices: dict[str, DeviceSim] = {}
        self.device_vendor: dict[str, str] = {}
        self.qr: dict[str, str] = {}
        self.trust: dict[str, list[str]] = {}
        self.adversaries: dict[str, AdversaryScript] = {}
        self.snapshots: dict[str, KeySet] = {}
        self.updates: dict[str, tuple[str, feedmod.FeedEntry]] = {}
        self.last = ""
        self.report = Report(scenario.name, scenario.seed)

    # -------------------------------------------------------------- helpers

    def _guardian(self, gid: str) -> Guardian:
        g = self.guardians[gid]
        for vid in self.trust.get(gid, []):
            g.add_trust_anchor(self.vendors[vid].trust_anchor())
        return g

    def _serials(self, arg: str) -> list[str]:
        return sorted(self.devices) if arg == "*" else [arg]

    def _keys_for(self, source: str) -> KeySet | None:
        if source in self.snapshots:
            return self.snapshots[source]
        dev = self.devices.get(source)
        return dev.keys if dev else None

    # ------------------------------------------------------------ execution

    def run(self) -> Report:
        for d in self.scenario.steps:
            if d.verb == "expect":
                passed, detail = self._expect(d)
                self.report.expectations.append(ExpectationResult(d.line, d.text, passed, detail))
                continue
            outcome = getattr(self, "_do_" + d.verb.replace("-", "_"))(d)
            if outcome is not None:
                self.last = outcome
                self.report.steps.append(StepResult(d.line, d.text, outcome))
        self.world.settle()
        self.report.truncated = self.world.trace.truncated
        return self.report

    def _do_scenario(self, d):
        return None

    def _do_seed(self, d):
        return None

    def _do_timeout(self, d):
        self.world.timeout_ticks = int(d.args[0], 0)

    def _do_vendor(self, d):
        vid = d.args[0]
        secret = Drbg.from_int(self.scenario.seed).fork(f"vendor:{vid}").bytes(32)
        vendor = Vendor(vid, secret, mac=d.opts.get("mac", default_mac(f"vendor:{vid}")),
                        t=int(d.opts.get("t", 200)))
        self.world.attach(vendor)
        self.vendors[vid] = vendor

    def _do_guardian(self, d):
        gid = d.args[0]
        policy = UpdatePolicy(allow_downgrade=True) if d.opts.get("policy") == "permissive" else UpdatePolicy()
        g = Guardian(gid, d.opts.get("mac", default_mac(f"guardian:{gid}")),
                     self.world.rng.fork(f"guardian:{gid}"), policy=policy)
        g.join(self.world)
        self.guardians[gid] = g

    def _do_trust(self, d):
        self.trust.setdefault(d.args[0], []).append(d.args[1])

    def _provision(self, serial: str, opts: dict) -> None:
        vendor = self.vendors[opts["vendor"]]
        cls = DeviceClass(opts.get("class", DeviceClass.MID_LEVEL.value))
        dev, qr, _ = vendor.provision_device(serial, opts.get("mac", default_mac(f"device:{serial}")),
                                             opts["model"], cls, opts.get("version", "1.0"))
        self.world.attach(dev)
        self.devices[serial] = dev
        self.device_vendor[serial] = vendor.vendor_id
        self.qr[serial] = qr

    def _do_provision(self, d):
        self._provision(d.args[0], d.opts)
        return "provisioned"

    def _do_provision_fleet(self, d):
        n = int(d.args[1], 0)
        for i in range(n):
            self._provision(fleet_serial(d.args[0], i), d.opts)
        return f"provisioned {n}"

    def _do_reset(self, d):
        counts = []
        for serial in self._serials(d.args[0]):
            dev = self.devices[serial]
            for _ in range(int(d.opts.get("times", 1))):
                dev.hard_reset()
            counts.append(f"c={dev.reset_count_c}")
        return counts[0] if len(counts) == 1 else summarize(counts)

    def _do_record(self, d):
        self.devices[d.args[0]].record_user_data(d.args[1], d.args[2].encode())
        return "recorded"

    def _do_roster(self, d):
        g = self._guardian(d.args[0])
        for serial in self._serials(d.args[1]):
            try:
                g.roster_scan(self.qr[serial])
            except GuardianError as exc:
                return f"rejected: {exc}"
        return "rostered"

    def _do_roster_transfer(self, d):
        try:
            self._guardian(d.args[0]).roster_transfer(d.args[1], vendor_id=self.device_vendor[d.args[1]],
                                                      model=self.devices[d.args[1]].model)
        except GuardianError as exc:
            return f"rejected: {exc}"
        return "rostered"

    @staticmethod
    def _failure(exc: Exception) -> str:
        if isinstance(exc, PriorBoardingAlarm):
            return "alarm:prior-boarding"
        return f"failed: {exc}"

    def _do_onboard(self, d):
        g = self._guardian(d.args[0])
        outcomes = []
        for serial in self._serials(d.args[1]):
            try:
                g.onboard(serial)
                outcomes.append("onboarded")
            except GuardianError as exc:
                outcomes.append(self._failure(exc))
        return outcomes[0] if len(outcomes) == 1 else summarize(outcomes)

    def _do_onboard_visible(self, d):
        results = self._guardian(d.args[0]).onboard_visible()
        return summarize(list(results.values())) if results else "none"

    def _do_store(self, d):
        try:
            return self._guardian(d.args[0]).store_user_data(d.args[1], d.args[2], d.args[3].encode())
        except GuardianError as exc:
            return self._failure(exc)

    def _do_status(self, d):
        try:
            version, epoch = self._guardian(d.args[0]).query_status(d.args[1])
        except GuardianError as exc:
            return self._failure(exc)
        return f"version={version} epoch={epoch}"

    def _do_publish_update(self, d):
        vid, model, version, reason = d.args
        uid = d.opts.get("id", f"{model}-{version}")
        if "size" in d.opts:
            payload = Drbg(uid.encode()).bytes(int(d.opts["size"]))
        else:
            payload = d.opts.get("payload", f"firmware {model} {version}").encode()
        pkg, entry = self.vendors[vid].publish_update(model, version, payload, reason, self.feed_dir, uid)
        self.updates[uid] = (vid, entry)
        return f"published {uid}"

    def _do_tamper_update(self, d):
        uid, mode = d.args
        vid, entry = self.updates[uid]
        pkg = feedmod.load_package(self.feed_dir, entry)
        if mode == "flip":
            payload = bytearray(pkg.payload)
            payload[len(payload) // 2] ^= 0x01
            pkg.payload = bytes(payload)
        else:
            stranger = Vendor("stranger", digest(b"stranger" + uid.encode()))
            claimed = pkg.vendor_id
            stranger.sign_package(pkg)
            if mode == "forge":
                pkg.vendor_id = claimed
        (self.feed_dir / entry.filename).write_bytes(pkg.to_file_bytes())
        return f"tampered {uid} {mode}"

    def _do_discover(self, d):
        return "ok" if self._guardian(d.args[0]).discover_updates(self.feed_dir) else "unreadable"

    def _do_approve(self, d):
        self._guardian(d.args[0]).approve(d.args[1], d.args[2])
        return "approved"

    def _do_push_update(self, d):
        try:
            return self._guardian(d.args[0]).push_update(d.args[1], d.args[2]).value
        except GuardianError as exc:
            return self._failure(exc)

    def _do_rotate(self, d):
        try:
            record = self._guardian(d.args[0]).rotate_keys(d.args[1])
        except GuardianError as exc:
            return self._failure(exc)
        return "pending" if record.rotation_pending else f"epoch={record.keyset.epoch}"

    def _do_snapshot(self, d):
        keys = self.devices[d.args[0]].keys
        if keys is None:
            return "no-keys"
        self.snapshots[d.args[1]] = KeySet(keys.master, keys.k_enc, keys.k_mac, keys.k_wifi, keys.epoch)
        return f"epoch={keys.epoch}"

    def _do_try_associate(self, d):
        g = self.guardians[d.args[0]]
        keys = self._keys_for(d.opts.get("key", d.args[1]))
        if keys is None:
            return "no-key"
        target = d.opts.get("as", d.args[1])
        mac = self.devices[target].mac if target in self.devices else target
        return "accept" if self.world.associate(g.domain, mac, keys.k_wifi) else "reject"

    def _do_try_command(self, d):
        g = self.guardians[d.args[0]]
        dev = self.devices[d.args[1]]
        keys = self._keys_for(d.opts.get("key", d.args[1]))
        if keys is None:
            return "no-key"
        # probes take the Guardian's next counter so later commands are not stale
        record = g.registry.devices.get(d.args[1])
        counter = 1
        if record is not None:
            record.command_counter += 1
            counter = record.command_counter
        body = proto.seal_command(keys.k_mac, counter, "status")
        before = len(self.world.trace.frames)
        self.world.send(Frame(g.mac, dev.mac, Link.domain_ap(g.domain), Kind.COMMAND, body))
        self.world.settle()
        replied = any(f.src_mac == dev.mac and f.kind is Kind.STATUS and a == "pass"
                      for f, a in self.world.trace.frames[before:])
        return "accepted" if replied else "dropped"

    def _do_decommission(self, d):
        mode = DecommissionMode.TRANSFER if d.args[2].lower() == "transfer" else DecommissionMode.RECYCLE
        try:
            record, note = self._guardian(d.args[0]).decommission(d.args[1], mode)
        except GuardianError as exc:
            return self._failure(exc)
        out = "wipe-unconfirmed" if record.wipe_unconfirmed else "decommissioned"
        return f"{out} note={note['serial']},{note['mac']}" if note else out

    def _do_transfer_info(self, d):
        try:
            serial, mac, c = self._guardian(d.args[0]).read_transfer_info(d.args[1])
        except GuardianError as exc:
            return self._failure(exc)
        return f"{serial},{mac},{c}"

    def _do_request_password(self, d):
        g = self._guardian(d.args[0])
        dev = self.devices[d.args[1]]
        anchor = self.vendors[self.device_vendor[d.args[1]]].trust_anchor()
        c = int(d.opts.get("c", dev.reset_count_c))
        try:
            g.request_next_password(anchor, d.args[1], dev.mac, c)
        except TransferRefused as exc:
            return f"refused: {str(exc).rsplit(': ', 1)[-1]}"
        except GuardianError as exc:
            return self._failure(exc)
        return "issued"

    def _do_transfer(self, d):
        g = self._guardian(d.args[0])
        serial = d.args[1]
        try:
            if serial not in g.registry:
                g.roster_transfer(serial, vendor_id=self.device_vendor[serial], model=self.devices[serial].model)
            g.onboard_transfer(serial)
        except GuardianError as exc:
            return self._failure(exc)
        return "onboarded"

    def _do_reuse_password(self, d):
        g = self._guardian(d.args[0])
        serial = d.args[1]
        record = g.registry.devices.get(serial)
        dev = self.devices[serial]
        if record is None or record.d_pw is None:
            return "no-password"
        if not dev.ap_up or dev.state is not DeviceState.PROVISIONING:
            return "reject: device not provisioning"
        try:
            g._converse(("ap", serial), g._deliver_password_flow(serial, dev.mac, dev.reset_count_c, record.d_pw))
        except GuardianError as exc:
            return f"reject: {exc}"
        return "accept"

    def _do_adversary(self, d):
        kind, opts = d.args[0], d.opts
        name = opts.get("name", kind)
        rng = self.world.rng.fork(f"adversary:{name}")
        threat = Threat(opts["threat"]) if "threat" in opts else None
        if kind == "pake-mitm":
            adv = PakeMitm(name, guess=opts.get("guess", "password123").encode(), rng=rng,
                           target=opts.get("target"))
        elif kind == "drop-all":
            adv = drop_all(name, threat or Threat.T4)
        elif kind == "drop":
            from_mac = None
            if "from" in opts:
                src = opts["from"]
                from_mac = (self.devices[src].mac if src in self.devices
                            else self.guardians[src].mac if src in self.guardians else src)
            nth = int(opts["nth"]) if "nth" in opts else None
            adv = drop_kind(Kind(opts["kind"]), nth, from_mac, name, threat or Threat.T4)
        elif kind == "flip":
            adv = flip_kind(Kind(opts["kind"]), int(opts.get("pos", 0)), int(opts.get("nth", 0)),
                            name=name, threat=threat or Threat.T4)
        elif kind == "eavesdrop":
            adv = eavesdropper(name)
        elif kind == "replay":
            adv = StaleCommandReplayer(name)
        elif kind == "update-tamper":
            adv = update_tamperer(int(opts["byte"]) if "byte" in opts else None, name)
        elif kind == "forge-command":
            adv = CommandForger(name, rng)
        else:
            adv = RemoteIntruder(name, rng)
        self.world.add_adversary(adv)
        self.adversaries[name] = adv
        return f"{adv.threat.value} {name}"

    def _do_strike(self, d):
        adv = self.adversaries[d.args[0]]
        g = self.guardians[d.args[1]]
        if isinstance(adv, CommandForger):
            return adv.strike(self.world, g.mac, g.domain)
        if isinstance(adv, RemoteIntruder):
            key_src = d.opts.get("key")
            keys = self._keys_for(key_src) if key_src else None
            spoof = [dev.mac for s, dev in sorted(self.devices.items()) if s != key_src]
            return adv.strike(self.world, g.domain, keys.k_wifi if keys else None, spoof)
        return "no-op"

    def _do_clear_adversaries(self, d):
        self.world.adversaries.clear()
        return "cleared"

    def _do_chain_sweep(self, d):
        t, seeds = int(d.args[0], 0), int(d.args[1], 0)
        failures = chain_sweep(t, seeds, self.world.rng.fork("chain-sweep"))
        return "ok" if not failures else f"fail {failures[0]}"

    # ---------------------------------------------------------- expectations

    def _expect(self, d: Directive) -> tuple[bool, str]:
        what, a = d.args[0], d.args[1:]
        if what == "state":
            got = self.devices[a[0]].state.value
            return got == a[1], got
        if what == "lifecycle":
            record = self.guardians[a[0]].registry.devices.get(a[1])
            got = record.lifecycle.value if record else "absent"
            return got == a[2], got
        if what == "keys-agree":
            record = self.guardians[a[0]].registry.devices.get(a[1])
            dev = self.devices[a[1]]
            ok = (record is not None and record.keyset is not None and dev.keys is not None
                  and record.keyset.to_bytes() == dev.keys.to_bytes())
            return ok, "identical" if ok else "differ"
        if what == "alarm":
            kinds = [k for k, _, _ in self.guardians[a[0]].alarms]
            return a[1] in kinds, ",".join(kinds) or "none"
        if what == "no-alarm":
            kinds = [k for k, _, _ in self.guardians[a[0]].alarms]
            return not kinds, ",".join(kinds) or "none"
        if what == "firmware":
            got = self.devices[a[0]].firmware[0]
            return got == a[1], got
        if what == "history":
            record = self.guardians[a[0]].registry.devices.get(a[1])
            got = len(record.version_history) if record else -1
            return got == int(a[2]), str(got)
        if what == "last":
            return self.last.startswith(a[0]), self.last
        if what == "not-contacted":
            dev = self.devices[a[0]]
            hits = [f for f, _ in self.world.trace.frames
                    if f.dst_mac == dev.mac or f.src_mac == dev.mac
                    or (f.link.kind is LinkKind.DEVICE_AP and f.link.name == a[0])]
            return not hits, f"{len(hits)} frames"
        if what == "store-empty":
            n = len(self.devices[a[0]].sensitive_store)
            return n == 0, f"{n} items"
        if what == "no-secrets":
            g = self.guardians[a[0]]
            record = g.registry.devices.get(a[1])
            secrets = record.secret_fields() if record else []
            in_table = record is not None and record.mac is not None and record.mac in g.ap_table
            return not secrets and not in_table, f"{len(secrets)} secret fields, ap-entry={in_table}"
        if what in ("event", "no-event"):
            node = None if a[0] == "*" else a[0]
            hit = self.world.trace.has_event(a[1], node)
            return hit == (what == "event"), "present" if hit else "absent"
        if what == "transcript-clean":
            return self._transcript_clean(a[0], a[1])
        if what == "mitm-keys":
            got = len(getattr(self.adversaries[a[0]], "agreed_keys", []))
            return got == int(a[1]), str(got)
        if what == "associations":
            got = len(getattr(self.adversaries[a[0]], "accepted", []))
            return got == int(a[1]), str(got)
        if what == "vendor-log":
            record = self.vendors[a[0]].records.get(a[1])
            log_ = record.request_log if record else []
            issued = sum(1 for e in log_ if e[3] == "issued")
            refused = len(log_) - issued
            want_i = int(d.opts.get("issued", issued))
            want_r = int(d.opts.get("refused", refused))
            return (issued, refused) == (want_i, want_r), f"issued={issued} refused={refused}"
        if what == "counter":
            got = self.devices[a[0]].reset_count_c
            return got == int(a[1]), str(got)
        if what == "epoch":
            record = self.guardians[a[0]].registry.devices.get(a[1])
            dev = self.devices[a[1]]
            g_epoch = record.keyset.epoch if record and record.keyset else -1
            d_epoch = dev.keys.epoch if dev.keys else -1
            return g_epoch == d_epoch == int(a[2]), f"guardian={g_epoch} device={d_epoch}"
        if what == "pending":
            record = self.guardians[a[0]].registry.devices.get(a[1])
            got = bool(record and record.rotation_pending)
            return got == (a[2] == "true"), str(got).lower()
        if what == "trace-truncated":
            got = self.world.trace.truncated
            return got == (a[0] == "true"), str(got).lower()
        raise AssertionError(what)

    def _transcript_clean(self, gid: str, serial: str) -> tuple[bool, str]:
        record = self.guardians[gid].registry.devices.get(serial)
        dev = self.devices[serial]
        secrets = set(dev.secrets())
        if record is not None:
            secrets.update(record.secret_fields())
        secrets.update(s for ks in self.snapshots.values() for s in ks.secrets())
        secrets.update(p.encode() for p in [self.qr.get(serial, "|").split("|")[1]] if p)
        secrets = {s for s in secrets if len(s) >= 8}
        leaks = [f.seq for f, _ in self.world.trace.frames for s in secrets if s in f.body]
        return not leaks, f"{len(secrets)} secrets scanned, {len(leaks)} leaks"


def summarize(outcomes: list[str]) -> str:
    counts: dict[str, int] = {}
    for o in outcomes:
        key = o.split(":", 1)[0]
        counts[key] = counts.get(key, 0) + 1
    return " ".join(f"{k}={v}" for k, v in sorted(counts.items()))


def chain_sweep(t: int, seeds: int, rng: Drbg) -> list[str]:
    """Walk ``seeds`` full chains of length ``t`` against a forward-hashing oracle.

    Every ``w_i`` must verify in order; replays, skips and single-bit mutations
    must all be rejected.  Returns failure descriptions (empty on success).
    """
    failures = []
    for s in range(seeds):
        seed = rng.bytes(32)
        chain = chain_init(seed, t)
        if chain.verifier != iterate_hash(seed, t):
            failures.append(f"seed {s}: bad initial verifier")
            continue
        view = chain.verifier_view()
        forward = [seed]
        for _ in range(t):
            forward.append(digest(forward[-1]))
        for i in range(1, t + 1):
            w_i = chain_password(seed, t, i)
            if w_i != forward[t - i]:
                failures.append(f"seed {s}: w_{i} differs from oracle")
                break
            mutated = bytes([w_i[0] ^ 0x01]) + w_i[1:]
            if view.advance(mutated):
                failures.append(f"seed {s}: mutated w_{i} accepted")
                break
            if i < t and view.advance(forward[t - i - 1]):
                failures.append(f"seed {s}: skipped to w_{i + 1}")
                break
            if not view.advance(w_i):
                failures.append(f"seed {s}: w_{i} rejected")
                break
            if view.advance(w_i):
                failures.append(f"seed {s}: replayed w_{i} accepted")
                break
    return failures


def run_scenario(scenario: Scenario | str | Path, out_dir: str | Path | None = None,
                 seed: int | None = None, storage_key: bytes | None = None) -> Report:
    """Parse (if needed) and execute a scenario against a fresh world.

    With ``out_dir`` the trace, a TSV report, figures and (when a storage key is
    given) the registry and vendor state files are written there.
    """
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    if seed is not None:
        scenario = Scenario(scenario.name, seed, scenario.steps, scenario.source)
    scratch = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        feed_dir = out / "feed"
        shutil.rmtree(feed_dir, ignore_errors=True)
    else:
        scratch = tempfile.TemporaryDirectory(prefix="iotguard-feed-")
        feed_dir = Path(scratch.name)
    feed_dir.mkdir(parents=True, exist_ok=True)
    try:
        runner = Runner(scenario, feed_dir)
        report = runner.run()
        if out_dir is not None:
            _write_outputs(runner, report, Path(out_dir), storage_key)
        report.runner = runner
        return report
    finally:
        if scratch is not None:
            scratch.cleanup()


def _write_outputs(runner: Runner, report: Report, out: Path, storage_key: bytes | None) -> None:
    from .report import write_figures

    trace_path = out / "trace.txt"
    trace_path.write_text(runner.world.trace.export())
    report.trace_path = trace_path
    (out / "report.tsv").write_text(report.render_tsv())
    report.files = [trace_path, out / "report.tsv"]
    report.files += write_figures(runner.world.trace, out, title=report.name)
    if storage_key is None:
        log.warning("no storage key: registry and vendor state not saved")
        return
    for gid, g in sorted(runner.guardians.items()):
        path = out / f"registry-{gid}.json"
        g.save(path, storage_key)
        report.files.append(path)
    for vid, v in sorted(runner.vendors.items()):
        path = out / f"vendor-{vid}.json"
        v.save(path, storage_key)
        report.files.append(path)
