#!/usr/bin/env python3
"""Reference oracle for the crypto test vectors.

Re-implements, without touching chanforge.crypto:

* Ed25519 key derivation and signing straight from RFC 8032 (slow, pure Python)
* the canonical framing rule (u64 big-endian ints, u32-length-prefixed bytes
  and text, u32-count-prefixed lists)
* the per-party RNG stream: sha256 over the framed ["chanforge-stream", seed,
  name], first 8 bytes as the seed of random.Random

The only thing taken from the package is the field values of the first
'update' message of the honest-trade run (captured off the network), which the
oracle frames on its own to produce the expected digest.

    python3 tools/oracle_vectors.py            # rewrite tests/vectors/crypto_vectors.json
    python3 tools/oracle_vectors.py --check    # exit 1 if the file is out of date
"""

from __future__ import annotations

import argparse
import hashlib
import json
import random
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
OUT = ROOT / "tests" / "vectors" / "crypto_vectors.json"

# --- Ed25519 (RFC 8032, section 5.1) --------------------------------------

P = 2**255 - 19
L = 2**252 + 27742317777372353535851937790883648493
D = -121665 * pow(121666, P - 2, P) % P
SQRT_M1 = pow(2, (P - 1) // 4, P)


def _add(a, b):
    x1, y1, z1, t1 = a
    x2, y2, z2, t2 = b
    A = (y1 - x1) * (y2 - x2) % P
    B = (y1 + x1) * (y2 + x2) % P
    C = 2 * t1 * t2 * D % P
    Dd = 2 * z1 * z2 % P
    E, F, G, H = B - A, Dd - C, Dd + C, B + A
    return (E * F % P, G * H % P, F * G % P, E * H % P)


def _mul(s, pt):
    q = (0, 1, 1, 0)
    while s > 0:
        if s & 1:
            q = _add(q, pt)
        pt = _add(pt, pt)
        s >>= 1
    return q


def _recover_x(y, sign):
    x2 = (y * y - 1) * pow(D * y * y + 1, P - 2, P)
    x = pow(x2, (P + 3) // 8, P)
    if (x * x - x2) % P:
        x = x * SQRT_M1 % P
    if x & 1 != sign:
        x = P - x
    return x


GY = 4 * pow(5, P - 2, P) % P
GX = _recover_x(GY, 0)
G = (GX, GY, 1, GX * GY % P)


def _compress(pt):
    zinv = pow(pt[2], P - 2, P)
    x, y = pt[0] * zinv % P, pt[1] * zinv % P
    return int.to_bytes(y | ((x & 1) << 255), 32, "little")


def _h(data: bytes) -> int:
    return int.from_bytes(hashlib.sha512(data).digest(), "little")


def _secret(seed: bytes):
    h = hashlib.sha512(seed).digest()
    a = int.from_bytes(h[:32], "little")
    a &= (1 << 254) - 8
    a |= 1 << 254
    return a, h[32:]


def public_key(seed: bytes) -> bytes:
    a, _ = _secret(seed)
    return _compress(_mul(a, G))


def sign(seed: bytes, msg: bytes) -> bytes:
    a, prefix = _secret(seed)
    A = _compress(_mul(a, G))
    r = _h(prefix + msg) % L
    R = _compress(_mul(r, G))
    s = (r + _h(R + A + msg) * a) % L
    return R + int.to_bytes(s, 32, "little")


# --- framing ---------------------------------------------------------------


def frame(value) -> bytes:
    if isinstance(value, bool):
        value = int(value)
    if isinstance(value, int):
        return value.to_bytes(8, "big")
    if isinstance(value, str):
        value = value.encode("utf-8")
    if isinstance(value, bytes):
        return len(value).to_bytes(4, "big") + value
    if isinstance(value, (list, tuple)):
        return len(value).to_bytes(4, "big") + b"".join(frame(v) for v in value)
    raise TypeError(type(value))


def stream(master_seed: int, name: str) -> random.Random:
    data = frame(["chanforge-stream", master_seed, name])
    return random.Random(int.from_bytes(hashlib.sha256(data).digest()[:8], "big"))


# --- JSON helpers (bytes are tagged so they survive the round trip) -----------


def to_json(value):
    if isinstance(value, bytes):
        return {"hex": value.hex()}
    if isinstance(value, (list, tuple)):
        return [to_json(v) for v in value]
    return value


def from_json(value):
    if isinstance(value, dict):
        return bytes.fromhex(value["hex"])
    if isinstance(value, list):
        return [from_json(v) for v in value]
    return value


# --- the captured update message ------------------------------------------------


def capture_update() -> dict:
    sys.path.insert(0, str(ROOT / "src"))
    from chanforge.harness import runner, scenarios
    from chanforge.messages import KIND_CODES, wire_value
    from chanforge.network import Network

    captured = []
    original = Network._enqueue

    def spy(self, sender, receiver, payload):
        if payload.kind == "update" and not captured:
            captured.append(payload)
        return original(self, sender, receiver, payload)

    Network._enqueue = spy
    try:
        runner.run(scenarios.honest_trade())
    finally:
        Network._enqueue = original
    msg = captured[0]
    return {
        "kind_code": KIND_CODES[msg.kind],
        "session": msg.session,
        "counter": msg.counter,
        "reply": msg.reply,
        "fields": [name for name, _ in msg.body],
        "values": to_json([wire_value(v) for _, v in msg.body]),
    }


def update_vector() -> dict:
    msg = capture_update()
    framed = frame(
        [bytes([msg["kind_code"]]), msg["session"], msg["counter"], msg["reply"], from_json(msg["values"])]
    )
    msg["digest"] = hashlib.sha256(framed).hexdigest()
    return msg


def build() -> dict:
    zero = bytes(32)
    rfc_seed = bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
    streams = {}
    for name in ("M", "P1", "P2"):
        rng = stream(42, name)
        seed = rng.randbytes(32)
        streams[name] = {
            "seed": seed.hex(),
            "verification_key": public_key(seed).hex(),
            "uutid": "u-" + rng.randbytes(8).hex(),
        }
    digest = hashlib.sha256(b"\x01" * 32).digest()
    counter = 7
    signed = digest + counter.to_bytes(8, "big")
    return {
        "ed25519_rfc8032_test1": {
            "seed": rfc_seed.hex(),
            "verification_key": public_key(rfc_seed).hex(),
            "signature_empty_message": sign(rfc_seed, b"").hex(),
        },
        "zero_seed": {"verification_key": public_key(zero).hex()},
        "seed42_streams": streams,
        "encodings": [
            {"value": to_json(v), "hex": frame(v).hex()}
            for v in ([], [1], [0, b"", "ab"], [[1, 2], [b"\xff"]], [2**64 - 1])
        ],
        "hash_msc_init_zero_nonce": hashlib.sha256(frame(["msc-init"]) + bytes(16)).hexdigest(),
        "signature": {
            "seed": zero.hex(),
            "digest": digest.hex(),
            "counter": counter,
            "sig": sign(zero, signed).hex(),
        },
        "update_message": update_vector(),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--check", action="store_true")
    args = parser.parse_args(argv)
    vectors = build()
    text = json.dumps(vectors, indent=2, sort_keys=True) + "\n"
    if args.check:
        current = OUT.read_text() if OUT.exists() else ""
        if current != text:
            print(f"{OUT} is out of date")
            return 1
        print("vectors up to date")
        return 0
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(text)
    print(f"wrote {OUT}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
