"""Keys, signatures and content hashing.

Ed25519 gives deterministic key generation from a 32-byte seed and
deterministic signatures, both required for replayable runs.  Addresses
are the first 20 bytes of SHA-256 over the raw public key.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .codec import to_hex

SEED_LEN = 32
ADDRESS_LEN = 20


class BadSeedLength(ValueError):
    pass


def content_hash(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def address_of(public: bytes) -> bytes:
    return content_hash(public)[:ADDRESS_LEN]


@dataclass(frozen=True)
class KeyPair:
    secret: bytes
    public: bytes
    address: bytes

    @property
    def hex_address(self) -> str:
        return to_hex(self.address)

    def __repr__(self) -> str:
        return f"KeyPair(address={self.hex_address})"


@dataclass(frozen=True)
class Signature:
    signer: bytes
    bytes: bytes


def generate_keypair(seed: bytes) -> KeyPair:
    if len(seed) != SEED_LEN:
        raise BadSeedLength(f"seed must be {SEED_LEN} bytes, got {len(seed)}")
    sk = Ed25519PrivateKey.from_private_bytes(bytes(seed))
    public = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return KeyPair(secret=bytes(seed), public=public, address=address_of(public))


def sign(key: KeyPair, message: bytes) -> Signature:
    sk = Ed25519PrivateKey.from_private_bytes(key.secret)
    return Signature(signer=key.address, bytes=sk.sign(message))


def verify(sig: Signature, public: bytes, message: bytes) -> bool:
    """True iff ``sig`` is a signature by ``public`` over ``message``.

    Never raises: malformed keys or signatures simply fail.
    """
    try:
        if sig.signer != address_of(public):
            return False
        Ed25519PublicKey.from_public_bytes(public).verify(sig.bytes, message)
    except (InvalidSignature, ValueError, TypeError, AttributeError):
        return False
    return True
