"""Scenario language: parsing, reference checks, execution and golden traces."""

from __future__ import annotations

import os
from pathlib import Path

import pytest

from iotguard.scenario import (
    BUNDLED_DIR,
    ScenarioError,
    bundled_scenarios,
    default_mac,
    fleet_serial,
    load_scenario,
    parse_scenario,
    run_scenario,
)

from conftest import STORAGE_KEY, assert_passed, run_text

GOLDEN_DIR = Path(__file__).parent / "golden"
GOLDEN = ["happy_onboard", "rogue_device", "pake_mitm"]

HEADER = "scenario t\nseed 1\nvendor acme\nguardian home\n"


def parse_error(body: str) -> ScenarioError:
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(HEADER + body, source="t.scn")
    return exc.value


@pytest.mark.parametrize("body,line,fragment", [
    ("frobnicate x\n", 5, "unknown directive"),
    ("roster home SP1-0001\n", 5, "unprovisioned serial 'SP1-0001'"),
    ("provision SP1-0001 vendor=acme model=SP-100\nonboard home SP1-0002\n", 6, "unprovisioned serial"),
    ("provision SP1-0001 vendor=nobody model=SP-100\n", 5, "nobody"),
    ("roster nowhere *\n", 5, "nowhere"),
    ("expect bogus 1\n", 5, "bogus"),
    ("expect state\n", 5, "state"),
    ("reset\n", 5, "reset"),
    ("adversary teleport\n", 5, "teleport"),
    ('expect last "unterminated\n', 5, ""),
])
def test_parse_errors_name_the_line(body, line, fragment):
    err = parse_error(body)
    assert err.line == line
    assert str(err).startswith(f"t.scn:{line}:")
    assert fragment in str(err)


def test_comments_blank_lines_and_quotes():
    sc = parse_scenario(HEADER + "\n# comment\nprovision SP1-0001 vendor=acme model=SP-100  # trailing\n"
                        'expect last "a b=c"\n')
    assert [d.verb for d in sc.steps][-2:] == ["provision", "expect"]
    assert sc.steps[-1].args == ["last", "a b=c"]
    assert sc.steps[-2].opts == {"vendor": "acme", "model": "SP-100"}
    assert sc.name == "t" and sc.seed == 1


def test_name_defaults_to_file_stem():
    sc = parse_scenario("seed 5\n", source="dir/quick.scn")
    assert (sc.name, sc.seed) == ("quick", 5)


def test_load_missing_file_is_parse_error(tmp_path):
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "absent.scn")


def test_helpers():
    assert fleet_serial("SP1", 7) == "SP1-0007"
    mac = default_mac("x")
    assert mac.startswith("02:") and len(mac.split(":")) == 6 and default_mac("x") == mac
    assert default_mac("y") != mac


def test_every_bundled_scenario_passes():
    names = [p.stem for p in bundled_scenarios()]
    assert "happy_onboard" in names and len(names) >= 10
    for path in bundled_scenarios():
        report = run_scenario(path)
        assert_passed(report)
        assert report.expectations, path.name


def test_failed_expectation_reported():
    report = run_text("""
        scenario fail
        seed 1
        vendor acme
        provision SP1-0001 vendor=acme model=SP-100
        reset SP1-0001
        expect state SP1-0001 Onboarded
    """)
    assert not report.passed
    (e,) = report.expectations
    assert e.line == 6 and e.detail == "Provisioning"


def test_seed_override_changes_trace_but_not_outcome():
    a = run_scenario(BUNDLED_DIR / "happy_onboard.scn")
    b = run_scenario(BUNDLED_DIR / "happy_onboard.scn", seed=99)
    assert b.passed and b.seed == 99
    assert a.runner.world.trace.export() != b.runner.world.trace.export()


def test_outputs_written(tmp_path):
    report = run_scenario(BUNDLED_DIR / "decommission_transfer.scn", tmp_path, storage_key=STORAGE_KEY)
    names = sorted(p.name for p in tmp_path.iterdir())
    for expected in ("trace.txt", "report.tsv", "frames.png", "timeline.png",
                     "registry-home.json", "registry-newhome.json", "vendor-acme.json"):
        assert expected in names
    tsv = (tmp_path / "report.tsv").read_text().splitlines()
    assert tsv[0] == "scenario\tdecommission_transfer\tseed\t1007"
    assert tsv[-1].startswith("result\tpass\t")
    assert report.trace_path == tmp_path / "trace.txt"


def test_no_state_files_without_storage_key(tmp_path):
    run_scenario(BUNDLED_DIR / "rogue_device.scn", tmp_path)
    assert not list(tmp_path.glob("registry-*.json"))


def test_reports_deterministic(tmp_path):
    a = run_scenario(BUNDLED_DIR / "key_rotation.scn", tmp_path / "a")
    b = run_scenario(BUNDLED_DIR / "key_rotation.scn", tmp_path / "b")
    assert (tmp_path / "a/report.tsv").read_bytes() == (tmp_path / "b/report.tsv").read_bytes()
    assert (tmp_path / "a/trace.txt").read_bytes() == (tmp_path / "b/trace.txt").read_bytes()
    assert a.render_tsv() == b.render_tsv()


@pytest.mark.parametrize("name", GOLDEN)
def test_golden_trace(name):
    """Trace export is bit-exact; set IOTGUARD_REGEN_GOLDEN=1 to rewrite after intended changes."""
    trace = run_scenario(BUNDLED_DIR / f"{name}.scn").runner.world.trace.export()
    golden = GOLDEN_DIR / f"{name}.trace"
    if os.environ.get("IOTGUARD_REGEN_GOLDEN"):
        golden.write_text(trace)
    assert trace == golden.read_text()
