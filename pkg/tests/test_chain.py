"""Lamport chain: generation, verification and the verifier-only device view."""

from __future__ import annotations

import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iotguard.crypto import Drbg, chain_init, chain_password, chain_verify
from iotguard.scenario import chain_sweep


def oracle_chain(seed: bytes, t: int) -> list[bytes]:
    """Forward hashing: h^0(w), h^1(w), ..., h^t(w); w_i is element t - i."""
    out = [seed]
    for _ in range(t):
        out.append(hashlib.sha256(out[-1]).digest())
    return out


def test_chain_init_anchor_matches_oracle():
    seed = b"s" * 32
    chain = chain_init(seed, 10)
    assert chain.verifier == oracle_chain(seed, 10)[10]
    assert chain.index == 0


@settings(max_examples=25)
@given(st.binary(min_size=1, max_size=32), st.integers(min_value=1, max_value=40))
def test_passwords_match_oracle_and_verify_in_order(seed, t):
    forward = oracle_chain(seed, t)
    view = chain_init(seed, t).verifier_view()
    for i in range(1, t + 1):
        w_i = chain_password(seed, t, i)
        assert w_i == forward[t - i]
        assert view.advance(w_i)
        assert view.index == i
    assert not view.advance(seed)  # chain exhausted


def test_out_of_order_replay_and_mutation_rejected():
    seed, t = b"seed", 20
    view = chain_init(seed, t).verifier_view()
    w1, w2, w3 = (chain_password(seed, t, i) for i in (1, 2, 3))
    assert not view.advance(w2)
    assert view.advance(w1)
    assert not view.advance(w1)  # replay
    assert not view.advance(bytes([w2[0] ^ 1]) + w2[1:])
    assert not view.advance(w3)
    assert view.advance(w2)


def test_verifier_view_cannot_produce_passwords():
    with pytest.raises(ValueError):
        chain_init(b"s", 5).verifier_view().password_at(1)


def test_chain_bounds():
    with pytest.raises(ValueError):
        chain_init(b"s", 0)
    with pytest.raises(IndexError):
        chain_password(b"s", 5, 0)
    with pytest.raises(IndexError):
        chain_password(b"s", 5, 6)
    assert chain_verify(b"x", hashlib.sha256(b"x").digest())


def test_chain_sweep_reports_ok_for_honest_chain():
    assert chain_sweep(30, 3, Drbg.from_int(1)) == []
