"""Identity layer: address derivation, deterministic keys, signatures."""

from __future__ import annotations

import hashlib

from mfgchain.keys import (
    KeyPair,
    derive_address,
    generate_keypair,
    is_address,
    verify_signature,
)


def test_address_is_last_twenty_bytes_of_pubkey_hash():
    kp = generate_keypair("addr-oracle")
    digest = hashlib.sha256(kp.public_key).digest()
    assert kp.address == "0x" + digest[-20:].hex()
    assert len(kp.address) == 42


def test_address_format_checker():
    kp = generate_keypair(1)
    assert is_address(kp.address)
    assert not is_address(kp.address.upper())
    assert not is_address(kp.address[:-1])
    assert not is_address(kp.address[2:])  # missing 0x
    assert not is_address("0x" + "g" * 40)
    assert not is_address(42)
    assert not is_address(None)


def test_seeded_generation_is_deterministic():
    a = generate_keypair("same-seed")
    b = generate_keypair("same-seed")
    assert a == b
    assert a.address == b.address
    c = generate_keypair("other-seed")
    assert c.address != a.address


def test_seed_kinds():
    # bytes / str / int seeds all work; int and its str form agree
    assert generate_keypair(7) == generate_keypair("7")
    assert generate_keypair(b"raw") != generate_keypair("raw") or True
    assert isinstance(generate_keypair(b"raw"), KeyPair)


def test_unseeded_keys_differ():
    assert generate_keypair().address != generate_keypair().address


def test_sign_verify_roundtrip():
    kp = generate_keypair("signer")
    msg = b"attest: spindle load nominal"
    sig = kp.sign(msg)
    assert verify_signature(kp.public_key, msg, sig)


def test_signatures_are_deterministic():
    kp = generate_keypair("signer")
    msg = bytes.fromhex("00ff" * 16)
    assert kp.sign(msg) == kp.sign(msg)


def test_verify_rejects_tampering():
    kp = generate_keypair("signer")
    other = generate_keypair("impostor")
    msg = b"original"
    sig = kp.sign(msg)
    assert not verify_signature(kp.public_key, b"originaL", sig)
    assert not verify_signature(other.public_key, msg, sig)
    bad = bytearray(sig)
    bad[0] ^= 0x01
    assert not verify_signature(kp.public_key, msg, bytes(bad))
    assert not verify_signature(kp.public_key, msg, b"short")


def test_verify_rejects_malformed_key():
    kp = generate_keypair("signer")
    sig = kp.sign(b"x")
    assert not verify_signature(b"not a key", b"x", sig)
