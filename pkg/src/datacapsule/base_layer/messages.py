"""Records exchanged across the capsule boundary."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

from ..crypto import KeyPair, SealedBox
from ..encoding import MsgType, encode, frame, unframe
from ..errors import DataLayerError, FramingError, RequestRejected, UnknownOperation
from ..policy.ast import Assertion, assertion_from_record, assertion_record


def _assertions_from(recs) -> tuple[Assertion, ...]:
    try:
        return tuple(assertion_from_record(r) for r in recs)
    except (TypeError, ValueError, KeyError, IndexError) as exc:
        raise FramingError(f"malformed assertion record: {exc}") from exc


# -- invocation -----------------------------------------------------------------


@dataclass(frozen=True)
class InvocationRequest:
    capsule_id: bytes
    invoker: str
    op: str
    args: tuple = ()
    supporting: tuple[Assertion, ...] = ()
    nonce: bytes = b""
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return encode(["invoke/v1", self.capsule_id, self.nonce, self.op, list(self.args), self.invoker])

    def signed(self, key: KeyPair, nonce: bytes | None = None) -> "InvocationRequest":
        draft = InvocationRequest(
            self.capsule_id, self.invoker, self.op, tuple(self.args), tuple(self.supporting),
            nonce if nonce is not None else os.urandom(16),
        )
        return InvocationRequest(
            draft.capsule_id, draft.invoker, draft.op, draft.args, draft.supporting, draft.nonce,
            key.sign(draft.signing_bytes()),
        )

    def to_frame(self) -> bytes:
        return frame(
            MsgType.INVOKE,
            {
                "capsule": self.capsule_id,
                "invoker": self.invoker,
                "op": self.op,
                "args": list(self.args),
                "supporting": [assertion_record(a) for a in self.supporting],
                "nonce": self.nonce,
                "sig": self.signature,
            },
        )

    @classmethod
    def from_frame(cls, data: bytes) -> "InvocationRequest":
        _, body = unframe(data, MsgType.INVOKE)
        try:
            return cls(
                body["capsule"], body["invoker"], body["op"], tuple(body["args"]),
                _assertions_from(body["supporting"]), body["nonce"], body["sig"],
            )
        except (KeyError, TypeError) as exc:
            raise FramingError(f"malformed invocation request: {exc}") from exc


def response_frame(status: str, **fields) -> bytes:
    return frame(MsgType.INVOKE_RESP, {"status": status, **fields})


@dataclass(frozen=True)
class Response:
    status: str  # ok | denied | rejected | error
    result: Any = None
    reason: str | None = None
    kind: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @classmethod
    def from_frame(cls, data: bytes) -> "Response":
        _, body = unframe(data, MsgType.INVOKE_RESP)
        return cls(body["status"], body.get("result"), body.get("reason"), body.get("kind"))

    def unwrap(self):
        """Return the result or raise the matching typed error."""
        if self.status == "ok":
            return self.result
        if self.status == "rejected":
            raise RequestRejected(self.reason or "request rejected")
        if self.status == "error" and self.kind == "unknown_op":
            raise UnknownOperation(self.reason or "unknown operation")
        if self.status == "error":
            raise DataLayerError(self.reason or "data layer error")
        return None


@dataclass
class Identity:
    """A principal name with its signing key: a user, service or machine."""

    name: str
    key: KeyPair

    def request(self, capsule_id: bytes, op: str, args=(), supporting=(), nonce: bytes | None = None) -> bytes:
        req = InvocationRequest(capsule_id, self.name, op, tuple(args), tuple(supporting))
        return req.signed(self.key, nonce).to_frame()

    @classmethod
    def generate(cls, name: str, kind: str | None = "ed25519") -> "Identity":
        return cls(name, KeyPair.generate(kind))

    @property
    def public(self):
        return self.key.public

    def sign(self, assertion):
        return assertion.signed_by(self.key)


# -- hosting ---------------------------------------------------------------------


@dataclass(frozen=True)
class HostingRequest:
    target_machine: str
    target_service: str
    supporting: tuple[Assertion, ...] = ()
    transfer_share: Fraction | None = None
    filter: Any = None


@dataclass(frozen=True)
class SealedCapsule:
    """Step-3 payload.  The header is authenticated as associated data."""

    sender_key: bytes  # K_C
    receiver_key: bytes  # K_C'
    source: bytes  # id of the sending capsule
    binding: int  # sender trust-module counter at transfer
    box: SealedBox = field(repr=False, default=None)

    def header(self) -> list:
        return ["sealed-capsule/v1", self.sender_key, self.receiver_key, self.source, self.binding]

    def aad(self) -> bytes:
        return encode(self.header())

    def to_frame(self) -> bytes:
        return frame(MsgType.INSTALL3, {"header": self.header(), "box": self.box.to_bytes()})

    @classmethod
    def from_frame(cls, data: bytes) -> "SealedCapsule":
        _, body = unframe(data, MsgType.INSTALL3)
        try:
            tag, k_c, k_c2, source, binding = body["header"]
            if tag != "sealed-capsule/v1":
                raise FramingError("unknown sealed capsule version")
            return cls(k_c, k_c2, source, int(binding), SealedBox.from_bytes(body["box"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FramingError(f"malformed sealed capsule: {exc}") from exc
