"""Vendor back-end: provisioning, next-password issuance, signing, persistence."""

from __future__ import annotations

import base64

import pytest

from iotguard import storage
from iotguard.crypto import chain_init, digest, sig_verify
from iotguard.protocol import Reason, encode_package
from iotguard.scenario import default_mac
from iotguard.vendor import Vendor, VendorRefusal, derive_default_password, qr_payload


@pytest.fixture
def vendor():
    return Vendor("acme", b"v" * 32, t=5)


def test_default_passwords_distinct_across_fleet(vendor):
    pws = {vendor.default_password(f"SN{i:04d}", default_mac(f"d{i}")) for i in range(2000)}
    assert len(pws) == 2000
    pw = vendor.default_password("SN1", "02:00:00:00:00:01")
    assert len(pw) == 20
    assert set(pw) <= set("ABCDEFGHIJKLMNOPQRSTUVWXYZ234567")


def test_default_password_is_base32_of_kdf_output():
    from iotguard.crypto import encode_fields, kdf
    raw = kdf(b"a" * 32, "sticker-password", encode_fields("SN1", "02:00:00:00:00:01"))
    expected = base64.b32encode(raw).decode()[:20]
    assert derive_default_password(b"a" * 32, "SN1", "02:00:00:00:00:01") == expected


def test_default_password_depends_on_secret():
    a = derive_default_password(b"a" * 32, "SN1", "02:00:00:00:00:01")
    b = derive_default_password(b"b" * 32, "SN1", "02:00:00:00:00:01")
    assert a != b


def test_provision_gives_device_verifier_only(vendor):
    dev, qr, record = vendor.provision_device("SN1", "02:00:00:00:00:01", "DL-7")
    assert dev.chain.seed_w is None
    assert dev.chain.verifier == chain_init(vendor.chain_seed("SN1"), 5).verifier
    assert qr == qr_payload("SN1", dev.d_pw.decode(), "acme", "DL-7")
    assert record.reset_count_c == 0
    with pytest.raises(ValueError):
        vendor.provision_device("SN1", "02:00:00:00:00:02", "DL-7")


def test_next_password_issuance_rules(vendor):
    vendor.provision_device("SN1", "02:00:00:00:00:01", "DL-7")
    w1 = vendor.next_password("SN1", "02:00:00:00:00:01", 1, "g1")
    assert digest(w1) == chain_init(vendor.chain_seed("SN1"), 5).verifier
    for c, reason in ((1, "already-issued"), (0, "already-issued"), (6, "chain-exhausted")):
        with pytest.raises(VendorRefusal) as exc:
            vendor.next_password("SN1", "02:00:00:00:00:01", c, "g2")
        assert exc.value.reason == reason
    with pytest.raises(VendorRefusal, match="mac-mismatch"):
        vendor.next_password("SN1", "02:00:00:00:00:99", 2, "g2")
    with pytest.raises(VendorRefusal, match="unknown-serial"):
        vendor.next_password("SN9", "02:00:00:00:00:01", 2, "g2")
    outcomes = [e[3] for e in vendor.records["SN1"].request_log]
    assert outcomes[0] == "issued" and outcomes.count("issued") == 1


def test_chain_exhaustion_after_t_issuances(vendor):
    vendor.provision_device("SN1", "02:00:00:00:00:01", "DL-7")
    for c in range(1, 6):
        vendor.next_password("SN1", "02:00:00:00:00:01", c, "g")
    with pytest.raises(VendorRefusal, match="chain-exhausted"):
        vendor.next_password("SN1", "02:00:00:00:00:01", 6, "g")


def test_signed_packages_verify(tmp_path, vendor):
    pkg, entry = vendor.publish_update("DL-7", "1.1", b"fw", Reason.SECURITY, tmp_path, "u1")
    assert sig_verify(vendor.public_key, encode_package(pkg), pkg.vendor_sig)
    assert entry.update_id == "u1" and (tmp_path / entry.filename).exists()
    assert "DL-7" in vendor.trust_anchor().models


def test_save_load_round_trip_without_plaintext_secret(tmp_path, vendor):
    vendor.provision_device("SN1", "02:00:00:00:00:01", "DL-7")
    vendor.next_password("SN1", "02:00:00:00:00:01", 1, "g")
    key = b"k" * 32
    path = tmp_path / "vendor.json"
    vendor.save(path, key)
    text = path.read_text()
    assert vendor.secret.hex() not in text
    assert vendor.chain_seed("SN1").hex() not in text
    again = Vendor.load(path, key)
    assert again.public_key == vendor.public_key
    assert again.records["SN1"].reset_count_c == 1
    with pytest.raises(storage.WrongStorageKey):
        Vendor.load(path, b"x" * 32)


def test_empty_secret_refused():
    with pytest.raises(ValueError):
        Vendor("acme", b"")
