"""Signing, hashing and canonical encoding primitives.

The concrete algorithms are Ed25519 (32-byte keys, 64-byte signatures) and
SHA-256 (32-byte digests). Callers only rely on the sizes and on determinism,
so swapping either algorithm means changing this module and regenerating the
vectors under ``tests/vectors``.

Canonical framing:

* integers: 8-byte big-endian, must satisfy ``0 <= n < 2**64``
* byte strings (and UTF-8 text): 4-byte big-endian length, then the bytes
* lists/tuples: 4-byte big-endian element count, then each element

The framing carries no type tags, so it is injective only among values that
share one shape (field layout). Every message kind and record type declares a
fixed layout, which is what the signatures rely on.
"""

from __future__ import annotations

import hashlib
import random
import struct
from dataclasses import dataclass, field
from typing import Any

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import EncodingError

# Security parameter for Gen(1^lambda). Ed25519 targets ~128-bit security; the
# value is informational only and never feeds an algorithm.
SECURITY_PARAMETER = 128

KEY_SIZE = 32
DIGEST_SIZE = 32
SIGNATURE_SIZE = 64
NONCE_SIZE = 16
ZERO_NONCE = bytes(NONCE_SIZE)

_U64_LIMIT = 1 << 64


@dataclass(frozen=True)
class KeyPair:
    signing_key: bytes = field(repr=False)
    verification_key: bytes


def gen_keypair(seed: bytes) -> KeyPair:
    """Derive an Ed25519 key pair from a 32-byte seed."""
    if len(seed) != KEY_SIZE:
        raise ValueError(f"seed must be {KEY_SIZE} bytes, got {len(seed)}")
    sk = Ed25519PrivateKey.from_private_bytes(bytes(seed))
    vk = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return KeyPair(signing_key=bytes(seed), verification_key=vk)


def canonical_encode(value: Any) -> bytes:
    out = bytearray()
    _encode_into(value, out)
    return bytes(out)


def _encode_into(value: Any, out: bytearray) -> None:
    if isinstance(value, bool):
        value = int(value)
    if isinstance(value, int):
        if not 0 <= value < _U64_LIMIT:
            raise EncodingError(f"integer out of range: {value}")
        out += struct.pack(">Q", value)
    elif isinstance(value, (bytes, bytearray, memoryview)):
        data = bytes(value)
        out += struct.pack(">I", len(data))
        out += data
    elif isinstance(value, str):
        data = value.encode("utf-8")
        out += struct.pack(">I", len(data))
        out += data
    elif isinstance(value, (list, tuple)):
        out += struct.pack(">I", len(value))
        for item in value:
            _encode_into(item, out)
    else:
        raise EncodingError(f"cannot encode {type(value).__name__}")


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def hash_state(state: Any, nonce: bytes) -> bytes:
    """Digest of ``canonical_encode(state) || nonce``."""
    return hashlib.sha256(canonical_encode(state) + bytes(nonce)).digest()


def _signed_payload(dgst: bytes, counter: int) -> bytes:
    if not 0 <= counter < _U64_LIMIT:
        raise EncodingError(f"counter out of range: {counter}")
    return bytes(dgst) + struct.pack(">Q", counter)


def sign(key: KeyPair, dgst: bytes, counter: int) -> bytes:
    """Sign ``digest || counter`` so the counter cannot be swapped afterwards."""
    sk = Ed25519PrivateKey.from_private_bytes(key.signing_key)
    return sk.sign(_signed_payload(dgst, counter))


def verify(vkey: bytes, dgst: bytes, counter: int, sig: bytes) -> bool:
    if not isinstance(counter, int) or isinstance(counter, bool):
        return False
    if not 0 <= counter < _U64_LIMIT:
        return False
    try:
        if len(vkey) != KEY_SIZE or len(sig) != SIGNATURE_SIZE or len(dgst) != DIGEST_SIZE:
            return False
        pk = Ed25519PublicKey.from_public_bytes(bytes(vkey))
        pk.verify(bytes(sig), _signed_payload(dgst, counter))
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def derive_seed(master_seed: int, label: str) -> int:
    """Independent RNG stream seed for one named participant of a run.

    Per-party streams keep a party's keys and nonces identical whether it runs
    alone or next to unrelated parties.
    """
    data = canonical_encode(["chanforge-stream", master_seed % _U64_LIMIT, label])
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "big")


class NonceSource:
    """Fresh 16-byte nonces from a seeded stream, never repeating in a session."""

    def __init__(self, rng: random.Random):
        self._rng = rng
        self.seen: set[bytes] = set()

    def fresh(self) -> bytes:
        while True:
            nonce = self._rng.randbytes(NONCE_SIZE)
            if nonce not in self.seen:
                self.seen.add(nonce)
                return nonce


@dataclass(frozen=True)
class TimelockCredential:
    claim_secret: bytes = field(repr=False)
    unlock_height: int
    holder: str

    @property
    def credential_digest(self) -> bytes:
        return digest(self.claim_secret)


def new_credential(rng: random.Random, unlock_height: int, holder: str) -> TimelockCredential:
    return TimelockCredential(rng.randbytes(32), unlock_height, holder)
