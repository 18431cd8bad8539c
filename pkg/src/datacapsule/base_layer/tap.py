"""Boundary tap: an audit record of every byte string leaving a capsule."""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

OUT = "out"
IN = "in"


@dataclass(frozen=True)
class TapRecord:
    direction: str
    channel: str  # invoke | hosting | socket | storage | block | xform
    capsule: bytes
    data: bytes


@dataclass
class BoundaryTap:
    records: list[TapRecord] = field(default_factory=list)

    def record(self, direction: str, channel: str, capsule: bytes, data: bytes) -> None:
        self.records.append(TapRecord(direction, channel, bytes(capsule), bytes(data)))

    def outbound(self, channel: str | None = None) -> list[TapRecord]:
        return [r for r in self.records if r.direction == OUT and (channel is None or r.channel == channel)]

    def outbound_bytes(self, channel: str | None = None) -> int:
        return sum(len(r.data) for r in self.outbound(channel))

    def clear(self) -> None:
        self.records.clear()

    def find_leaks(self, secret: bytes, window: int = 8) -> list[TapRecord]:
        """Outbound records containing ``secret`` (raw, hex or base64) or any
        ``window``-byte slice of it."""
        return [r for r in self.outbound() if leaks(r.data, secret, window)]


def _forms(secret: bytes) -> list[bytes]:
    return [
        secret,
        secret.hex().encode(),
        secret.hex().upper().encode(),
        base64.b64encode(secret),
        base64.urlsafe_b64encode(secret),
    ]


def leaks(data: bytes, secret: bytes, window: int = 8) -> bool:
    if not secret:
        return False
    for form in _forms(secret):
        if form in data:
            return True
    if len(secret) > window:
        for i in range(len(secret) - window + 1):
            if secret[i : i + window] in data:
                return True
    return False
