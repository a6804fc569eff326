"""Participant identities: Ed25519 keypairs and derived addresses.

An address is the last 20 bytes of the SHA-256 hash of the raw public
key, rendered as ``0x`` plus 40 lowercase hex characters. Ed25519 gives
deterministic signatures (same key + same message always yields the same
signature bytes), which keeps replayed simulations byte-identical.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ed25519

ADDRESS_LENGTH = 42  # "0x" + 20 bytes of hex


@lru_cache(maxsize=1024)
def _private_key(seed: bytes) -> ed25519.Ed25519PrivateKey:
    return ed25519.Ed25519PrivateKey.from_private_bytes(seed)


@lru_cache(maxsize=4096)
def _public_key(raw: bytes) -> ed25519.Ed25519PublicKey:
    return ed25519.Ed25519PublicKey.from_public_bytes(raw)


def derive_address(public_key: bytes) -> str:
    """Address for a raw public key: 0x + last 20 bytes of its SHA-256."""
    digest = hashlib.sha256(public_key).digest()
    return "0x" + digest[-20:].hex()


def is_address(value: object) -> bool:
    if not isinstance(value, str) or len(value) != ADDRESS_LENGTH:
        return False
    if not value.startswith("0x"):
        return False
    body = value[2:]
    return body == body.lower() and all(c in "0123456789abcdef" for c in body)


@dataclass(frozen=True)
class KeyPair:
    """An Ed25519 signing identity. ``private_key`` is the 32-byte seed."""

    public_key: bytes
    private_key: bytes

    @property
    def address(self) -> str:
        return derive_address(self.public_key)

    @property
    def public_hex(self) -> str:
        return self.public_key.hex()

    def sign(self, message: bytes) -> bytes:
        return _private_key(self.private_key).sign(message)


def generate_keypair(seed: bytes | str | int | None = None) -> KeyPair:
    """Create a keypair. A seed (any bytes/text/int) makes it deterministic."""
    if seed is None:
        raw = os.urandom(32)
    elif isinstance(seed, bytes):
        raw = hashlib.sha256(seed).digest()
    else:
        raw = hashlib.sha256(str(seed).encode("utf-8")).digest()
    private = ed25519.Ed25519PrivateKey.from_private_bytes(raw)
    public = private.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return KeyPair(public_key=public, private_key=raw)


def verify_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is a valid Ed25519 signature over ``message``."""
    try:
        _public_key(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False
