"""Command-line front end: scenario runner and operator commands.

Operator commands work on persisted state files: the Guardian registry
(``--registry``), the vendor back-end (``--vendor``), the update feed directory
(``--feed``) and the simulated device fleet (``--world``).  Secrets in those
files are sealed under a storage key read from the environment variable named
by ``--storage-key-env``.

Exit codes: 0 success, 1 failed expectation or refused operation,
2 usage/parse error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import secrets
import sys
from pathlib import Path

from . import __version__
from . import storage
from .crypto import Drbg
from .device import DeviceClass, DeviceSim
from .feed import FeedError
from .guardian import (
    DecommissionMode,
    DeviceRecord,
    Guardian,
    GuardianError,
    UpdateOutcome,
)
from .netsim import World
from .protocol import Reason
from .scenario import ScenarioError, bundled_scenarios, default_mac, load_scenario, run_scenario
from .vendor import Vendor, VendorRefusal

log = logging.getLogger("iotguard")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 3
WORLD_FORMAT = "iotguard-world-v1"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# persisted state


def storage_key(args) -> tuple[bytes, bool]:
    """``(key, persistent)``; without the variable an ephemeral key is used."""
    key = storage.storage_key_from_env(args.storage_key_env)
    if key is None:
        log.warning("$%s not set: using an ephemeral storage key, state will not be saved",
                    args.storage_key_env)
        return secrets.token_bytes(32), False
    return key, True


class State:
    """Vendor, Guardian and device fleet loaded into one simulated world."""

    def __init__(self, args, need_vendor=False, need_guardian=False, need_world=False):
        self.args = args
        self.key, self.persistent = storage_key(args)
        self.world = World(args.seed)
        self.vendor: Vendor | None = None
        self.guardian: Guardian | None = None
        self.devices: dict[str, DeviceSim] = {}
        if need_vendor:
            self.vendor = self._load_vendor()
            self.world.attach(self.vendor)
        if need_guardian:
            self.guardian = self._load_guardian()
            self.guardian.join(self.world)
            if self.vendor is not None:
                self.guardian.add_trust_anchor(self.vendor.trust_anchor())
        if need_world:
            self._load_world()

    def _load_vendor(self) -> Vendor:
        path = Path(self.args.vendor)
        if path.exists():
            return Vendor.load(path, self.key)
        vid = self.args.vendor_id
        secret = Drbg.from_int(self.args.seed).fork(f"vendor:{vid}").bytes(32)
        log.info("creating vendor %s in %s", vid, path)
        return Vendor(vid, secret, mac=default_mac(f"vendor:{vid}"))

    def _load_guardian(self) -> Guardian:
        path = Path(self.args.registry)
        if path.exists():
            return Guardian.load(path, self.key)
        gid = self.args.guardian_id
        log.info("creating registry for guardian %s in %s", gid, path)
        return Guardian(gid, default_mac(f"guardian:{gid}"),
                        Drbg.from_int(self.args.seed).fork(f"guardian:{gid}"))

    def _load_world(self) -> None:
        path = Path(self.args.world)
        if not path.exists():
            return
        doc = storage.read_document(path, WORLD_FORMAT)
        storage.verify_key_check(self.key, doc["key_check"])
        try:
            self.world.tick = int(doc.get("tick", 0))
            for d in doc["devices"]:
                dev = DeviceSim.from_document(d, self.key)
                self.world.attach(dev)
                self.devices[dev.serial] = dev
        except (KeyError, TypeError, ValueError) as exc:
            raise storage.CorruptState(f"{path}: {exc}") from None
        if self.guardian is not None:
            ap = self.world.domain_aps[self.guardian.domain]
            for dev in self.devices.values():
                if dev.associated and dev.domain == self.guardian.domain:
                    ap.sessions.add(dev.mac)

    def device(self, serial: str) -> DeviceSim:
        try:
            return self.devices[serial]
        except KeyError:
            raise UsageError(f"no device {serial!r} in {self.args.world}") from None

    def save(self) -> None:
        if not self.persistent:
            log.warning("state not saved (no storage key)")
            return
        if self.vendor is not None:
            self.vendor.save(self.args.vendor, self.key)
        if self.guardian is not None:
            self.guardian.save(self.args.registry, self.key)
        if self.devices:
            storage.write_document(self.args.world, {
                "format": WORLD_FORMAT,
                "key_check": storage.key_check(self.key),
                "tick": self.world.tick,
                "devices": [d.to_document(self.key) for _, d in sorted(self.devices.items())],
            })


# --------------------------------------------------------------------------
# scenario commands


def _print_report(report) -> None:
    for e in report.expectations:
        status = "PASS" if e.passed else "FAIL"
        print(f"{status}\t{report.name}:{e.line}\t{e.text}\t{e.detail}")
    ok = sum(e.passed for e in report.expectations)
    print(f"{'PASS' if report.passed else 'FAIL'}\t{report.name}\t{ok}/{len(report.expectations)}"
          + (f"\t{report.trace_path}" if report.trace_path else ""))


def cmd_run(args) -> int:
    key = storage.storage_key_from_env(args.storage_key_env)
    if key is None:
        log.warning("$%s not set: registry and vendor state will not be saved", args.storage_key_env)
    path = Path(args.scenario)
    if not path.exists():
        bundled = Path(__file__).parent / "scenarios" / f"{args.scenario}.scn"
        if bundled.exists():
            path = bundled
    scenario = load_scenario(path)
    out = Path(args.out) / scenario.name
    report = run_scenario(scenario, out, seed=args.seed_override, storage_key=key)
    _print_report(report)
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_run_all(args) -> int:
    key = storage.storage_key_from_env(args.storage_key_env)
    failed = 0
    rows = []
    for path in bundled_scenarios():
        scenario = load_scenario(path)
        report = run_scenario(scenario, Path(args.out) / scenario.name, storage_key=key)
        _print_report(report)
        failed += not report.passed
        rows.append(f"{scenario.name}\t{'pass' if report.passed else 'fail'}\t{report.trace_path}\n")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "summary.tsv").write_text("".join(rows))
    print(f"{'PASS' if not failed else 'FAIL'}\tall\t{len(rows) - failed}/{len(rows)}")
    return EXIT_OK if not failed else EXIT_FAIL


def cmd_list(args) -> int:
    for path in bundled_scenarios():
        first = path.read_text().splitlines()[0].lstrip("# ").strip()
        print(f"{path.stem}\t{first}")
    return EXIT_OK


# --------------------------------------------------------------------------
# operator commands


def cmd_provision(args) -> int:
    st = State(args, need_vendor=True, need_world=True)
    if args.serial in st.devices:
        raise UsageError(f"serial {args.serial!r} already exists in {args.world}")
    mac = args.mac or default_mac(f"device:{args.serial}")
    dev, qr, _ = st.vendor.provision_device(args.serial, mac, args.model, DeviceClass(args.device_class),
                                            args.firmware)
    st.world.attach(dev)
    st.devices[dev.serial] = dev
    if args.power_on:
        dev.hard_reset()
    st.save()
    print(qr)
    return EXIT_OK


def cmd_reset(args) -> int:
    st = State(args, need_world=True)
    dev = st.device(args.serial)
    for _ in range(args.times):
        dev.hard_reset()
    st.save()
    print(f"{dev.serial}\tc={dev.reset_count_c}\t{dev.state.value}")
    return EXIT_OK


def cmd_roster(args) -> int:
    st = State(args, need_guardian=True)
    if args.transfer:
        record = st.guardian.roster_transfer(args.transfer)
    else:
        record = st.guardian.roster_scan(args.qr)
    st.save()
    print(f"{record.device_id}\t{record.lifecycle.value}\t{record.model}\t{record.description}")
    return EXIT_OK


def cmd_onboard(args) -> int:
    st = State(args, need_guardian=True, need_world=True)
    status = EXIT_OK
    if args.all:
        for serial, outcome in st.guardian.onboard_visible().items():
            print(f"{serial}\t{outcome}")
            status = status or (EXIT_FAIL if outcome.startswith("failed") else EXIT_OK)
    for serial in args.devices:
        try:
            st.guardian.onboard(serial)
            print(f"{serial}\tonboarded")
        except GuardianError as exc:
            print(f"{serial}\tfailed: {exc}")
            status = EXIT_FAIL
    st.save()
    return status


def cmd_updates_publish(args) -> int:
    st = State(args, need_vendor=True)
    payload = Path(args.payload_file).read_bytes() if args.payload_file else args.payload.encode()
    _, entry = st.vendor.publish_update(args.model, args.version, payload, Reason(args.reason),
                                        args.feed, args.id)
    st.save()
    print(f"{entry.update_id}\t{entry.model}\t{entry.version}\t{entry.reason}\t{entry.filename}")
    return EXIT_OK


def cmd_updates_discover(args) -> int:
    st = State(args, need_vendor=Path(args.vendor).exists(), need_guardian=True)
    if not st.guardian.discover_updates(args.feed):
        print(f"feed {args.feed} unreadable; registry unchanged", file=sys.stderr)
        return EXIT_FAIL
    for record in st.guardian.registry:
        for uid, version, reason in record.available_updates:
            print(f"{record.device_id}\t{uid}\t{version}\t{reason}")
    st.save()
    return EXIT_OK


def cmd_updates_approve(args) -> int:
    st = State(args, need_guardian=True)
    st.guardian.approve(args.device, args.update)
    st.save()
    print(f"{args.device}\t{args.update}\tapproved")
    return EXIT_OK


def cmd_updates_push(args) -> int:
    st = State(args, need_vendor=Path(args.vendor).exists(), need_guardian=True, need_world=True)
    if not st.guardian.discover_updates(args.feed):
        return EXIT_FAIL
    outcome = st.guardian.push_update(args.device, args.update)
    st.save()
    record = st.guardian.registry.get(args.device)
    print(f"{args.device}\t{args.update}\t{outcome.value}\t{record.installed_version}")
    return EXIT_OK if outcome is UpdateOutcome.INSTALLED else EXIT_FAIL


def cmd_rotate(args) -> int:
    st = State(args, need_guardian=True, need_world=True)
    record = st.guardian.rotate_keys(args.device)
    st.save()
    if record.rotation_pending:
        print(f"{args.device}\tpending\tepoch={record.keyset.epoch}")
        return EXIT_FAIL
    print(f"{args.device}\trotated\tepoch={record.keyset.epoch}")
    return EXIT_OK


def cmd_decommission(args) -> int:
    st = State(args, need_guardian=True, need_world=True)
    mode = DecommissionMode.TRANSFER if args.mode == "transfer" else DecommissionMode.RECYCLE
    record, note = st.guardian.decommission(args.device, mode)
    st.save()
    print(f"{record.device_id}\t{record.lifecycle.value}"
          + ("\twipe-unconfirmed" if record.wipe_unconfirmed else ""))
    if note:
        print(f"transfer-note\tserial={note['serial']}\tmac={note['mac']}")
    return EXIT_OK


def cmd_transfer_info(args) -> int:
    st = State(args, need_guardian=True, need_world=True)
    serial, mac, c = st.guardian.read_transfer_info(args.serial)
    print(f"serial={serial}\tmac={mac}\tc={c}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    st = State(args, need_vendor=True, need_guardian=True, need_world=True)
    if args.serial not in st.guardian.registry:
        st.guardian.roster_transfer(args.serial, model=st.device(args.serial).model,
                                    vendor_id=st.vendor.vendor_id)
    st.guardian.onboard_transfer(args.serial)
    st.save()
    print(f"{args.serial}\tonboarded")
    return EXIT_OK


REGISTRY_COLUMNS = ["device_id", "mac", "vendor_id", "model", "description", "device_class",
                    "installed_version", "available_updates", "keyset", "d_pw", "lifecycle",
                    "version_history"]


def record_row(r: DeviceRecord) -> dict[str, str]:
    return {
        "device_id": r.device_id,
        "mac": r.mac or "-",
        "vendor_id": r.vendor_id or "-",
        "model": r.model or "-",
        "description": r.description or "-",
        "device_class": r.device_class.value,
        "installed_version": r.installed_version or "-",
        "available_updates": ",".join(f"{u}:{v}:{why}" for u, v, why in r.available_updates) or "-",
        "keyset": f"sealed(epoch {r.keyset.epoch})" if r.keyset else "-",
        "d_pw": "sealed" if r.d_pw else "-",
        "lifecycle": r.lifecycle.value,
        "version_history": ",".join(f"{v}@{ts}" for v, ts, _ in r.version_history) or "-",
    }


def cmd_registry_show(args) -> int:
    key, _ = storage_key(args)
    guardian = Guardian.load(args.registry, key)
    rows = [record_row(r) for r in sorted(guardian.registry, key=lambda r: r.device_id)]
    if args.format == "json":
        print(json.dumps(rows, indent=2))
    elif args.format == "tsv":
        print("\t".join(REGISTRY_COLUMNS))
        for row in rows:
            print("\t".join(row[c] for c in REGISTRY_COLUMNS))
    else:
        for row in rows:
            print(row["device_id"])
            for c in REGISTRY_COLUMNS[1:]:
                print(f"  {c:<18} {row[c]}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="world seed for newly created state")
    common.add_argument("--registry", default="registry.json", help="Guardian registry file")
    common.add_argument("--vendor", default="vendor.json", help="vendor back-end state file")
    common.add_argument("--feed", default="feed", help="update feed directory")
    common.add_argument("--world", default="world.json", help="simulated device fleet file")
    common.add_argument("--out", default="out", help="output directory for scenario runs")
    common.add_argument("--storage-key-env", default=storage.DEFAULT_KEY_ENV,
                        help="environment variable holding the 64-hex-digit storage key")
    common.add_argument("--guardian-id", default="home", help="Guardian id when creating a registry")
    common.add_argument("--vendor-id", default="acme", help="vendor id when creating vendor state")

    ap = argparse.ArgumentParser(prog="iotguard", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    p = add("run", cmd_run, "run one scenario file (or bundled scenario name)")
    p.add_argument("scenario")
    p.add_argument("--seed-override", type=int, default=None, help="replace the scenario's seed")
    add("run-all", cmd_run_all, "run every bundled scenario")
    add("list", cmd_list, "list bundled scenarios")

    p = add("provision", cmd_provision, "manufacture a device; prints its QR payload")
    p.add_argument("--serial", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--mac")
    p.add_argument("--class", dest="device_class", default=DeviceClass.MID_LEVEL.value,
                   choices=[c.value for c in DeviceClass])
    p.add_argument("--firmware", default="1.0")
    p.add_argument("--power-on", action="store_true", help="first reset press: open the provisioning AP")

    p = add("reset", cmd_reset, "press a device's hard-reset button")
    p.add_argument("serial")
    p.add_argument("--times", type=int, default=1)

    p = add("roster", cmd_roster, "add a device to the registry")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--qr", help="scanned QR payload serial|password[|vendor|model]")
    g.add_argument("--transfer", metavar="SERIAL", help="second-hand device, serial only")

    p = add("onboard", cmd_onboard, "on-board rostered devices")
    p.add_argument("devices", nargs="*")
    p.add_argument("--all", action="store_true", help="scan for provisioning APs")

    up = sub.add_parser("updates", help="update discovery, approval and delivery")
    usub = up.add_subparsers(dest="updates_cmd", required=True)

    def uadd(name, func, help_):
        q = usub.add_parser(name, parents=[common], help=help_)
        q.set_defaults(func=func)
        return q

    p = uadd("publish", cmd_updates_publish, "vendor: sign and publish a package to the feed")
    p.add_argument("--model", required=True)
    p.add_argument("--version", required=True)
    p.add_argument("--reason", required=True, type=str.capitalize, choices=[r.value for r in Reason])
    p.add_argument("--id")
    pg = p.add_mutually_exclusive_group(required=True)
    pg.add_argument("--payload")
    pg.add_argument("--payload-file")
    uadd("discover", cmd_updates_discover, "refresh available updates from the feed")
    p = uadd("approve", cmd_updates_approve, "approve an update for one device")
    p.add_argument("--device", required=True)
    p.add_argument("--update", required=True)
    p = uadd("push", cmd_updates_push, "verify, apply policy and install an update")
    p.add_argument("--device", required=True)
    p.add_argument("--update", required=True)

    p = add("rotate", cmd_rotate, "rotate a device's working keys and K_WiFi")
    p.add_argument("device")
    p = add("decommission", cmd_decommission, "wipe a device and scrub its secrets")
    p.add_argument("device")
    p.add_argument("--mode", choices=["recycle", "transfer"], default="recycle")
    p = add("transfer-info", cmd_transfer_info, "read (serial, MAC, reset count) over the open AP")
    p.add_argument("serial")
    p = add("transfer", cmd_transfer, "on-board a second-hand device via the vendor")
    p.add_argument("serial")

    rp = sub.add_parser("registry", help="registry inspection")
    rsub = rp.add_subparsers(dest="registry_cmd", required=True)
    p = rsub.add_parser("show", parents=[common], help="print every registry field")
    p.add_argument("--format", choices=["text", "tsv", "json"], default="text")
    p.set_defaults(func=cmd_registry_show)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except storage.WrongStorageKey as exc:
        print(f"failed: wrong storage key for this state ({exc})", file=sys.stderr)
        return EXIT_FAIL
    except (GuardianError, VendorRefusal, storage.StorageError, FeedError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
