"""Provenance capsule: an editable document with a signed write log.

Each log entry keeps the invoker's signed request, so any reader holding
the invokers' public keys can check who made every edit.  Entries are hash
chained; ReadLog re-verifies the chain and every signature.
"""

from __future__ import annotations

from dataclasses import dataclass

from .. import encoding
from ..crypto import PublicKey, sha256
from ..errors import DataLayerError
from .base import DataLayer, OpSpec, require

GENESIS = bytes(32)


@dataclass(frozen=True)
class LogEntry:
    seq: int
    invoker: str
    op: str
    args: tuple
    capsule_id: bytes
    nonce: bytes
    signature: bytes
    prev: bytes

    def to_record(self) -> list:
        return [self.seq, self.invoker, self.op, list(self.args), self.capsule_id, self.nonce, self.signature, self.prev]

    @classmethod
    def from_record(cls, rec) -> "LogEntry":
        seq, invoker, op, args, cid, nonce, sig, prev = rec
        return cls(seq, invoker, op, tuple(args), cid, nonce, sig, prev)

    def digest(self) -> bytes:
        return sha256(encoding.encode(self.to_record()))

    def signed_bytes(self) -> bytes:
        # Must match the invocation request encoding.
        return encoding.encode(["invoke/v1", self.capsule_id, self.nonce, self.op, list(self.args), self.invoker])


def apply_edit(text: str, op: str, args) -> str:
    if op == "Insert":
        pos, s = args
        require(isinstance(pos, int) and isinstance(s, str), "Insert takes (int, str)")
        require(0 <= pos <= len(text), f"insert position {pos} outside [0, {len(text)}]")
        return text[:pos] + s + text[pos:]
    if op == "Delete":
        pos, n = args
        require(isinstance(pos, int) and isinstance(n, int), "Delete takes (int, int)")
        require(n >= 0 and 0 <= pos and pos + n <= len(text), f"delete range [{pos}, {pos + n}) outside text")
        return text[:pos] + text[pos + n :]
    raise DataLayerError(f"not an edit: {op}")


def replay(entries) -> str:
    text = ""
    for e in entries:
        text = apply_edit(text, e.op, e.args)
    return text


def verify_log(entries, keys) -> None:
    """``keys`` maps invoker names to :class:`PublicKey`."""
    prev = GENESIS
    for i, e in enumerate(entries):
        if e.seq != i or e.prev != prev:
            raise DataLayerError(f"write log broken at entry {i}")
        key = keys.get(e.invoker)
        if key is None or not key.verify(e.signature, e.signed_bytes()):
            raise DataLayerError(f"write log entry {i} has a bad signature")
        prev = e.digest()


class ProvenanceLayer(DataLayer):
    kind = "provenance"
    ops = {
        "Get": OpSpec("Get"),
        "Insert": OpSpec("Insert"),
        "Delete": OpSpec("Delete"),
        "ReadLog": OpSpec("ReadLog", owner_only=True),
    }

    def __init__(self, text: str = "", log=(), signers=None):
        self.text = text
        self.log: list[LogEntry] = list(log)
        # Keys of every invoker that appears in the log.
        self.signers: dict[str, bytes] = dict(signers or {})

    def _edit(self, ctx, op: str, args: tuple):
        self.text = apply_edit(self.text, op, args)
        req = ctx.extra.get("request")
        require(req is not None, "edits need the signed request")
        prev = self.log[-1].digest() if self.log else GENESIS
        self.log.append(LogEntry(len(self.log), ctx.invoker, op, args, req.capsule_id, req.nonce, req.signature, prev))
        key = ctx.extra.get("invoker_key")
        if key is not None:
            self.signers[ctx.invoker] = key.der
        return len(self.text)

    def op_Get(self, ctx):
        return self.text

    def op_Insert(self, ctx, pos, s):
        return self._edit(ctx, "Insert", (pos, s))

    def op_Delete(self, ctx, pos, n):
        return self._edit(ctx, "Delete", (pos, n))

    def op_ReadLog(self, ctx):
        self.verify()
        return [e.to_record() for e in self.log]

    def verify(self) -> None:
        verify_log(self.log, {n: PublicKey(der) for n, der in self.signers.items()})
        if replay(self.log) != self.text:
            raise DataLayerError("write log does not reproduce the document")

    def to_record(self):
        return {"text": self.text, "log": [e.to_record() for e in self.log], "signers": self.signers}

    @classmethod
    def from_record(cls, rec):
        return cls(rec["text"], [LogEntry.from_record(r) for r in rec["log"]], rec["signers"])

    @classmethod
    def from_initial(cls, initial):
        if initial is None:
            return cls()
        if isinstance(initial, bytes):
            initial = initial.decode()
        require(isinstance(initial, str) and initial == "", "a provenance document starts empty")
        return cls()
