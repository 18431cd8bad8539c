"""Trusted time: a signing authority, and the capsule-side verifier."""

from __future__ import annotations

import time as _time
from dataclasses import dataclass
from typing import Callable

from .. import encoding
from ..crypto import KeyPair, PublicKey
from ..errors import TimeVerificationError

SKEW_SECONDS = 300


@dataclass(frozen=True)
class SignedTime:
    time: int
    nonce: bytes
    signature: bytes | None

    @staticmethod
    def signing_bytes(t: int, nonce: bytes) -> bytes:
        return encoding.encode(["time/v1", t, nonce])

    def to_record(self) -> list:
        return [self.time, self.nonce, self.signature]

    @classmethod
    def from_record(cls, rec) -> "SignedTime":
        return cls(int(rec[0]), rec[1], rec[2])


class TimeAuthority:
    def __init__(self, key: KeyPair | None = None, clock: Callable[[], float] = _time.time):
        self.key = key or KeyPair.generate("ed25519")
        self.clock = clock

    @property
    def public(self) -> PublicKey:
        return self.key.public

    def now(self, nonce: bytes) -> SignedTime:
        t = int(self.clock())
        return SignedTime(t, nonce, self.key.sign(SignedTime.signing_bytes(t, nonce)))


class FixedClock:
    """Settable clock for tests and the simulator."""

    def __init__(self, t: float):
        self.t = t

    def __call__(self) -> float:
        return self.t

    def advance(self, seconds: float) -> None:
        self.t += seconds


class TimeVerifier:
    """Accepts only fresh, signed, nonce-echoing timestamps."""

    def __init__(self, authority: PublicKey, skew: int = SKEW_SECONDS):
        self.authority = authority
        self.skew = skew
        self.last_accepted: int | None = None

    def verify(self, st: SignedTime, nonce: bytes) -> int:
        if st.signature is None:
            raise TimeVerificationError("unsigned time")
        if st.nonce != nonce:
            raise TimeVerificationError("time response does not echo our nonce")
        if not self.authority.verify(st.signature, SignedTime.signing_bytes(st.time, st.nonce)):
            raise TimeVerificationError("bad time signature")
        if self.last_accepted is not None and st.time < self.last_accepted - self.skew:
            raise TimeVerificationError("time is older than the skew window")
        self.last_accepted = max(st.time, self.last_accepted or st.time)
        return st.time
