"""Protocol messages and their wire framing.

A message is ``(kind, session, counter, reply, fields...)``. The kind is sent
as a one-byte code from ``KIND_CODES`` so golden traces stay bit-exact; field
names are never encoded, only their values in declaration order. Responses
carry the request's counter with ``reply=True`` (the i' convention).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from . import crypto

KIND_CODES: dict[str, int] = {
    # CNS and MSC set-up
    "cns-apply": 0x01,
    "cns-decision": 0x02,
    "msc-init": 0x03,
    "msc-offer": 0x04,
    "msc-accept": 0x05,
    "msc-done": 0x06,
    "msc-abort": 0x07,
    "collateral-credential": 0x08,
    # ESC set-up
    "esc-init": 0x10,
    "esc-accept": 0x11,
    "esc-done": 0x12,
    "esc-refuse": 0x13,
    "collateral-notice": 0x14,
    # credit notes
    "note-request": 0x18,
    "note-issued": 0x19,
    "note-refused": 0x1A,
    # channel lifecycle
    "channel-init": 0x20,
    "channel-accept": 0x21,
    "channel-refuse": 0x22,
    "update": 0x28,
    "update-success": 0x29,
    "update-reject": 0x2A,
    "dispute": 0x30,
    "finalise": 0x38,
    "finalise-ack": 0x39,
    "finalise-newer": 0x3A,
}
KIND_NAMES = {code: name for name, code in KIND_CODES.items()}


def wire_value(value: Any) -> Any:
    """Reduce a field value to something ``canonical_encode`` accepts."""
    if value is None:
        return []
    if hasattr(value, "to_fields"):
        return value.to_fields()
    if isinstance(value, dict):
        return [[k, wire_value(v)] for k, v in sorted(value.items())]
    if isinstance(value, (list, tuple)):
        return [wire_value(v) for v in value]
    return value


@dataclass(frozen=True)
class Message:
    kind: str
    session: str
    counter: int = 0
    reply: bool = False
    body: tuple[tuple[str, Any], ...] = ()

    @classmethod
    def make(cls, kind: str, session: str, counter: int = 0, reply: bool = False, **fields: Any) -> "Message":
        if kind not in KIND_CODES:
            raise ValueError(f"unknown message kind {kind!r}")
        return cls(kind, session, counter, reply, tuple(fields.items()))

    def get(self, name: str, default: Any = None) -> Any:
        for key, value in self.body:
            if key == name:
                return value
        return default

    def __getitem__(self, name: str) -> Any:
        for key, value in self.body:
            if key == name:
                return value
        raise KeyError(name)

    def replace(self, **changes: Any) -> "Message":
        """Copy with some body fields (or header fields) swapped out."""
        header = {k: changes.pop(k) for k in ("kind", "session", "counter", "reply") if k in changes}
        body = tuple((k, changes.pop(k, v)) for k, v in self.body)
        if changes:
            raise KeyError(f"no such fields: {sorted(changes)}")
        return Message(
            header.get("kind", self.kind),
            header.get("session", self.session),
            header.get("counter", self.counter),
            header.get("reply", self.reply),
            body,
        )

    def encode(self) -> bytes:
        return crypto.canonical_encode(
            [
                bytes([KIND_CODES[self.kind]]),
                self.session,
                self.counter,
                self.reply,
                [wire_value(v) for _, v in self.body],
            ]
        )

    def digest(self) -> bytes:
        return crypto.digest(self.encode())

    def __len__(self) -> int:
        return len(self.encode())
