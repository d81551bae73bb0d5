"""Command-line front end against persisted state files."""

from __future__ import annotations

import json

import pytest

from iotguard import cli

KEY_HEX = "5a" * 32


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("IOTGUARD_STORAGE_KEY", KEY_HEX)
    return tmp_path


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def provision_and_onboard(capsys, serial="DL7-0001", model="DL-7"):
    code, qr, _ = run(capsys, "provision", "--serial", serial, "--model", model, "--power-on")
    assert code == 0
    assert run(capsys, "roster", "--qr", qr.strip())[0] == 0
    code, out, _ = run(capsys, "onboard", serial)
    assert code == 0 and out.strip() == f"{serial}\tonboarded"


def test_operator_flow_approve_then_push(workdir, capsys):
    provision_and_onboard(capsys)
    code, out, _ = run(capsys, "updates", "publish", "--model", "DL-7", "--version", "1.2",
                       "--reason", "functionality", "--id", "U2", "--payload", "new firmware")
    assert code == 0 and out.startswith("U2\tDL-7\t1.2")
    code, out, _ = run(capsys, "updates", "discover")
    assert code == 0 and "DL7-0001\tU2\t1.2\tFunctionality" in out
    code, out, _ = run(capsys, "updates", "push", "--device", "DL7-0001", "--update", "U2")
    assert code == 1 and "policy-denied" in out
    assert run(capsys, "updates", "approve", "--device", "DL7-0001", "--update", "U2")[0] == 0
    code, out, _ = run(capsys, "updates", "push", "--device", "DL7-0001", "--update", "U2")
    assert code == 0 and out.strip() == "DL7-0001\tU2\tinstalled\t1.2"
    world = json.loads((workdir / "world.json").read_text())
    assert world["devices"][0]["firmware"][0] == "1.2"


def test_registry_show_lists_every_field(workdir, capsys):
    provision_and_onboard(capsys)
    code, out, _ = run(capsys, "registry", "show")
    assert code == 0
    for column in cli.REGISTRY_COLUMNS[1:]:
        assert f"  {column} " in out
    code, out, _ = run(capsys, "registry", "show", "--format", "json")
    (row,) = json.loads(out)
    assert set(row) == set(cli.REGISTRY_COLUMNS)
    assert row["lifecycle"] == "Onboarded" and row["keyset"] == "sealed(epoch 0)"
    code, out, _ = run(capsys, "registry", "show", "--format", "tsv")
    assert out.splitlines()[0].split("\t") == cli.REGISTRY_COLUMNS


def test_rotate_and_decommission_transfer_note(workdir, capsys):
    provision_and_onboard(capsys)
    code, out, _ = run(capsys, "rotate", "DL7-0001")
    assert code == 0 and out.strip() == "DL7-0001\trotated\tepoch=1"
    code, out, _ = run(capsys, "decommission", "--mode", "transfer", "DL7-0001")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "DL7-0001\tDecommissioned"
    assert lines[1].startswith("transfer-note\tserial=DL7-0001\tmac=02:")


def test_second_owner_transfer(workdir, capsys):
    provision_and_onboard(capsys)
    run(capsys, "decommission", "--mode", "transfer", "DL7-0001")
    assert run(capsys, "reset", "DL7-0001")[1].startswith("DL7-0001\tc=2")
    new = ("--registry", "new.json", "--guardian-id", "newhome")
    code, out, _ = run(capsys, "transfer-info", "DL7-0001", *new)
    assert code == 0 and out.strip().endswith("c=2")
    code, out, _ = run(capsys, "transfer", "DL7-0001", *new)
    assert code == 0 and out.strip() == "DL7-0001\tonboarded"
    # the vendor will not issue the same chain position twice
    code, _, err = run(capsys, "transfer", "DL7-0001", "--registry", "third.json", "--guardian-id", "third")
    assert code == 1 and "failed" in err


def test_onboard_all_ignores_unrostered(workdir, capsys):
    run(capsys, "provision", "--serial", "SP1-0001", "--model", "SP-100", "--power-on")
    code, qr, _ = run(capsys, "provision", "--serial", "SP1-0002", "--model", "SP-100", "--power-on")
    run(capsys, "roster", "--qr", qr.strip())
    code, out, _ = run(capsys, "onboard", "--all")
    assert code == 0 and "SP1-0001\tignored" in out and "SP1-0002\tonboarded" in out


def test_onboard_failure_exit_code(workdir, capsys):
    code, out, _ = run(capsys, "onboard", "SP1-0404")
    assert code == 1 and "failed" in out


def test_without_storage_key_nothing_is_saved(tmp_path, monkeypatch, capsys, caplog):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("IOTGUARD_STORAGE_KEY", raising=False)
    code, out, _ = run(capsys, "provision", "--serial", "SP1-0001", "--model", "SP-100")
    assert code == 0 and out.startswith("SP1-0001|")
    assert "ephemeral storage key" in caplog.text
    assert list(tmp_path.iterdir()) == []


def test_wrong_storage_key_fails_closed(workdir, capsys, monkeypatch):
    provision_and_onboard(capsys)
    monkeypatch.setenv("IOTGUARD_STORAGE_KEY", "00" * 32)
    code, _, err = run(capsys, "registry", "show")
    assert code == 1 and "wrong storage key" in err
    monkeypatch.setenv("OTHER_KEY", KEY_HEX)
    assert run(capsys, "registry", "show", "--storage-key-env", "OTHER_KEY")[0] == 0


def test_usage_errors_exit_2(workdir, capsys):
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "roster")[0] == 2
    assert run(capsys, "reset", "SP1-0009")[0] == 2
    (workdir / "bad.scn").write_text("scenario bad\nexplode now\n")
    code, _, err = run(capsys, "run", "bad.scn")
    assert code == 2 and "bad.scn:2:" in err


def test_internal_error_exit_3(workdir, capsys, monkeypatch):
    def boom(args):
        raise RuntimeError("bug")

    monkeypatch.setattr(cli, "cmd_list", boom)
    assert run(capsys, "list")[0] == 3


def test_run_bundled_scenario(workdir, capsys):
    code, out, _ = run(capsys, "run", "rogue_device", "--out", "o")
    assert code == 0
    assert out.splitlines()[-1].startswith("PASS\trogue_device\t")
    assert (workdir / "o/rogue_device/trace.txt").exists()
    assert (workdir / "o/rogue_device/registry-home.json").exists()


def test_run_expectation_failure_exit_1(workdir, capsys):
    (workdir / "f.scn").write_text("scenario f\nseed 1\nvendor acme\nprovision SP1-0001 vendor=acme model=SP-100\n"
                                   "expect state SP1-0001 Onboarded\n")
    code, out, _ = run(capsys, "run", "f.scn")
    assert code == 1 and out.splitlines()[0].startswith("FAIL\tf:5")


def test_run_all_and_list(workdir, capsys):
    code, out, _ = run(capsys, "list")
    assert code == 0 and "happy_onboard\t" in out
    code, out, _ = run(capsys, "run-all", "--out", "all")
    assert code == 0 and out.splitlines()[-1].startswith("PASS\tall\t")
    summary = (workdir / "all/summary.tsv").read_text().splitlines()
    assert len(summary) >= 10 and all("\tpass\t" in row for row in summary)
