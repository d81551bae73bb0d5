"""Primitive-level checks against published vectors and the standard library."""

from __future__ import annotations

import hashlib
import hmac

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iotguard.crypto import (
    AeadError,
    CryptoError,
    Drbg,
    SealingChannel,
    aead_open,
    aead_seal,
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
    mac_compute,
    mac_verify,
    sig_keypair,
    sig_sign,
    sig_verify,
)


def test_digest_empty_string_vector():
    # FIPS 180-4 SHA-256("")
    assert digest(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def test_digest_abc_vector():
    assert digest(b"abc").hex() == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


@given(st.binary(max_size=64), st.integers(min_value=0, max_value=20))
def test_iterate_hash_matches_hashlib_loop(data, n):
    expected = data
    for _ in range(n):
        expected = hashlib.sha256(expected).digest()
    assert iterate_hash(data, n) == expected


def test_iterate_hash_rejects_negative():
    with pytest.raises(ValueError):
        iterate_hash(b"x", -1)


def test_hmac_rfc4231_case_2():
    key = b"Jefe".ljust(32, b"\0")  # HMAC pads short keys with zeros, so this is the same key
    tag = mac_compute(key, b"what do ya want for nothing?")
    assert tag.hex() == "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"


@given(st.binary(min_size=32, max_size=32), st.binary(max_size=128))
def test_mac_matches_stdlib_and_verifies(key, data):
    tag = mac_compute(key, data)
    assert tag == hmac.new(key, data, hashlib.sha256).digest()
    assert mac_verify(key, data, tag)
    assert not mac_verify(key, data + b"\0", tag)
    assert not mac_verify(key, data, tag[:-1])


def test_mac_rejects_short_key():
    with pytest.raises(ValueError):
        mac_compute(b"short", b"data")


def test_kdf_is_hkdf_sha256_with_framed_info():
    # RFC 5869 expand step written out with the stdlib as the oracle
    master, label, context = b"\x0b" * 22, "enc", b"ctx"
    info = encode_fields(b"iotguard-kdf-v1", label, context)
    prk = hmac.new(b"\0" * 32, master, hashlib.sha256).digest()
    okm = hmac.new(prk, info + b"\x01", hashlib.sha256).digest()
    assert kdf(master, label, context) == okm


def test_kdf_labels_separate_outputs():
    m = b"m" * 32
    assert kdf(m, "enc") != kdf(m, "mac")
    assert kdf(m, "enc", b"a") != kdf(m, "enc", b"b")
    with pytest.raises(ValueError):
        kdf(b"", "enc")
    with pytest.raises(ValueError):
        kdf(m, "")


def test_chacha20_poly1305_rfc8439_vector():
    key = bytes(range(0x80, 0xA0))
    nonce = bytes.fromhex("070000004041424344454647")
    aad = bytes.fromhex("50515253c0c1c2c3c4c5c6c7")
    pt = (b"Ladies and Gentlemen of the class of '99: If I could offer you only one tip "
          b"for the future, sunscreen would be it.")
    sealed = aead_seal(key, nonce, pt, aad)
    assert sealed[:16].hex() == "d31a8d34648e60db7b86afbc53ef7ec2"
    assert sealed[-16:].hex() == "1ae10b594f09e26a7e902ecbd0600691"
    assert aead_open(key, nonce, sealed, aad) == pt
    with pytest.raises(AeadError):
        aead_open(key, nonce, sealed, aad + b"x")


def test_aead_rejects_bad_nonce_length():
    with pytest.raises(ValueError):
        aead_seal(b"k" * 32, b"n" * 11, b"")
    with pytest.raises(AeadError):
        aead_open(b"k" * 32, b"n" * 11, b"")


def test_ed25519_rfc8032_test1():
    seed = bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
    _, pub = sig_keypair(seed)
    assert pub.hex() == "d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a"
    sig = sig_sign(seed, b"")
    assert sig.hex().startswith("e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e06522490155")
    assert sig_verify(pub, b"", sig)
    assert not sig_verify(pub, b"x", sig)
    assert not sig_verify(b"\0" * 31, b"", sig)


def test_x25519_rfc7748_vector():
    a = bytes.fromhex("77076d0a7318a57d3c16c17251b26645df4c2f87ebc0992ab177fba51db92c2a")
    b = bytes.fromhex("5dab087e624a8a4b79e17f8b83800ee66f3bb1292618b6fd1c2f8b27ff88e0eb")
    _, a_pub = dh_keypair(a)
    _, b_pub = dh_keypair(b)
    assert a_pub.hex() == "8520f0098930a754748b7ddcb43ef75a0dbf3a0d26381af4eba4a98eaa9b4e6a"
    shared = "4a5d9d5ba4ce2de1728e3bf480350f25e07e21c947d19e3376f09b3c1e161742"
    assert dh_shared(a, b_pub).hex() == shared == dh_shared(b, a_pub).hex()
    with pytest.raises(CryptoError):
        dh_shared(a, b"\0" * 32)  # low-order point


@given(st.lists(st.one_of(st.binary(max_size=40), st.text(max_size=10),
                          st.integers(min_value=0, max_value=2**63)), max_size=6))
def test_encode_fields_round_trip(fields):
    decoded = decode_fields(encode_fields(*fields))
    assert len(decoded) == len(fields)
    for raw, original in zip(decoded, fields):
        if isinstance(original, int):
            assert field_int(raw) == original
        elif isinstance(original, str):
            assert raw.decode() == original
        else:
            assert raw == original


def test_encode_fields_is_injective_on_boundaries():
    assert encode_fields(b"ab", b"c") != encode_fields(b"a", b"bc")


def test_decode_fields_rejects_truncation_and_count():
    data = encode_fields(b"abc", b"de")
    with pytest.raises(ValueError):
        decode_fields(data[:-1])
    with pytest.raises(ValueError):
        decode_fields(data, 3)


def test_sealing_channel_round_trip_and_replay():
    key = b"k" * 32
    a = SealingChannel(key, send_direction=1, recv_direction=2)
    b = SealingChannel(key, send_direction=2, recv_direction=1)
    blob = a.seal(b"one", b"aad")
    assert b.open(blob, b"aad") == b"one"
    with pytest.raises(AeadError, match="reuse"):
        b.open(blob, b"aad")
    with pytest.raises(AeadError, match="direction"):
        a.open(a.seal(b"x"))
    assert blob[:12] == counter_nonce(1, 0)


def test_drbg_deterministic_and_forks_independent():
    a, b = Drbg.from_int(5), Drbg.from_int(5)
    assert a.bytes(40) == b.bytes(40)
    assert Drbg.from_int(5).fork("x").bytes(16) != Drbg.from_int(5).fork("y").bytes(16)
    assert Drbg.from_int(5).bytes(16) != Drbg.from_int(6).bytes(16)


@settings(max_examples=50)
@given(st.integers(min_value=1, max_value=1000))
def test_drbg_randbelow_in_range(n):
    assert 0 <= Drbg.from_int(n).randbelow(n) < n


def test_keyset_working_keys_bound_to_device_and_epoch():
    m, w = b"m" * 32, b"w" * 32
    k0 = derive_keyset(m, "SN1", w, 0)
    assert k0.k_enc != k0.k_mac
    assert derive_keyset(m, "SN2", w, 0).k_mac != k0.k_mac
    assert derive_keyset(m, "SN1", w, 1).k_mac != k0.k_mac
    assert type(k0).from_bytes(k0.to_bytes()) == k0
