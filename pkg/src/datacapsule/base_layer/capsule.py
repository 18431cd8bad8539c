"""The per-capsule runtime: invocation dispatch, policy checks, durable state."""

from __future__ import annotations

import os
import time
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import TYPE_CHECKING

from .. import encoding
from ..crypto import KeyPair, PublicKey, aead_decrypt, aead_encrypt, sha256
from ..data_layers import InvocationContext, OpSpec, restore_layer
from ..data_layers.base import DataLayer
from ..errors import (
    BelowThreshold,
    CapsuleError,
    DataLayerError,
    FramingError,
    HubError,
    PolicyError,
    ReplayError,
    SignatureError,
    StateUpdateError,
    TamperError,
    TimeVerificationError,
)
from ..host_hub.timeauth import TimeVerifier
from ..policy import (
    Keyring,
    PolicyDatabase,
    Predicate,
    Principal,
    apply_state_updates,
    number,
    principal,
    resolve,
    string,
)
from ..policy.ast import uses_current_time
from .messages import InvocationRequest, response_frame
from .tap import IN, OUT

if TYPE_CHECKING:
    from ..transformations import CrowdMembership
    from .machine import Machine

NONCE_WINDOW = 1024
CRASH_POINTS = ("after_intent", "after_advance", "after_dispatch", "after_persist")


class SimulatedCrash(Exception):
    """Raised at an armed crash point; the in-memory instance is then dead."""


def _base_ops() -> dict:
    from .. import transformations

    return {"AuditLog": (OpSpec("AuditLog", owner_only=True), _op_audit_log), **transformations.BASE_OPS}


def _op_audit_log(capsule: "Capsule", ctx):
    return [e.to_record() for e in capsule.audit]


# -- durable sealed storage ------------------------------------------------------------


class SealedStore:
    """State and write-ahead intent files, sealed under a key kept in the
    trust module's non-volatile storage.  Every write crosses the boundary
    and is therefore recorded on the tap."""

    def __init__(self, directory: Path, slot: str, tap, randbytes):
        self.directory = Path(directory)
        self.slot = slot
        self.tap = tap
        self._rand = randbytes
        self.capsule_id = b""
        nv = self.directory / f"{slot}.nv"
        if nv.exists():
            self._key = nv.read_bytes()
        else:
            self._key = randbytes(32)
            nv.write_bytes(self._key)

    def path(self, which: str) -> Path:
        return self.directory / f"{self.slot}.{which}"

    def _aad(self, which: str) -> bytes:
        return encoding.encode(["capsule-store/v1", self.slot, which])

    def write(self, which: str, record) -> None:
        nonce = self._rand(12)
        blob = nonce + aead_encrypt(self._key, nonce, encoding.encode(record), self._aad(which))
        self.tap.record(OUT, "storage", self.capsule_id, blob)
        path = self.path(which)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    def read(self, which: str):
        path = self.path(which)
        if not path.exists():
            return None
        blob = path.read_bytes()
        if len(blob) < 12:
            raise TamperError(f"sealed {which} file truncated")
        return encoding.decode(aead_decrypt(self._key, blob[:12], blob[12:], self._aad(which)))

    def remove(self, which: str) -> None:
        try:
            self.path(which).unlink()
        except FileNotFoundError:
            pass


# -- services offered to the data layer -------------------------------------------------


class CapsuleServices:
    """Randomness, trusted time and relayed sockets, as seen from inside."""

    def __init__(self, capsule: "Capsule"):
        self._c = capsule

    @property
    def keyring(self) -> Keyring:
        return self._c.known_principals

    def random_bytes(self, n: int) -> bytes:
        return self._c.tm.random_bytes(n)

    def time(self) -> int | None:
        """Verified time, or None when the hub cannot supply it."""
        verifier = self._c.time_verifier
        if verifier is None:
            return None
        nonce = self.random_bytes(16)
        try:
            return verifier.verify(self._c.machine.hub.hub_time(nonce), nonce)
        except (HubError, TimeVerificationError):
            return None

    def connect(self, address: str) -> int:
        return self._c.machine.hub.hub_socket("connect", address=address)

    def send(self, fd: int, data: bytes) -> int:
        self._c.machine.tap.record(OUT, "socket", self._c.id, data)
        return self._c.machine.hub.hub_socket("send", fd=fd, data=data)

    def recv(self, fd: int) -> bytes:
        data = self._c.machine.hub.hub_socket("recv", fd=fd)
        self._c.machine.tap.record(IN, "socket", self._c.id, data)
        return data

    def close(self, fd: int) -> None:
        self._c.machine.hub.hub_socket("close", fd=fd)


# -- the capsule ----------------------------------------------------------------------


@dataclass(frozen=True)
class AuditEntry:
    counter: int
    invoker: str
    op: str
    basis: str  # granted | owner | authenticated
    proof: tuple[bytes, ...] = ()

    @cached_property
    def encoded(self) -> encoding.Encoded:
        return encoding.Encoded(encoding.encode(self.to_record()))

    def to_record(self) -> dict:
        return {"counter": self.counter, "invoker": self.invoker, "op": self.op, "basis": self.basis, "proof": list(self.proof)}

    @classmethod
    def from_record(cls, rec) -> "AuditEntry":
        return cls(rec["counter"], rec["invoker"], rec["op"], rec["basis"], tuple(rec["proof"]))


class Capsule:
    """``C_U@[M,S]``: owner U's data and policies resident at (M, S)."""

    def __init__(
        self,
        machine: "Machine",
        slot: str,
        tm,
        id_key: KeyPair,
        owner: Principal,
        host: tuple[str, str],
        policy_db: PolicyDatabase,
        layer: DataLayer,
        known_principals: Keyring,
        crowd: "CrowdMembership | None" = None,
        lineage=(),
        countersigners=(),
        audit=(),
        nonces=(),
        counter: int = 0,
    ):
        self.machine = machine
        self.slot = slot
        self.tm = tm
        self.id_key = id_key
        self.owner = owner
        self.host = tuple(host)
        self.policy_db = policy_db
        self.layer = layer
        self.known_principals = known_principals
        self.crowd = crowd
        self.lineage = [tuple(h) for h in lineage] or [self.host]
        ids = [bytes(d) for d in countersigners]
        if self.id not in ids:
            ids.append(self.id)
        self.countersigners = ids
        self.audit: list[AuditEntry] = list(audit)
        self._nonces: deque = deque(nonces, maxlen=NONCE_WINDOW)
        self._nonce_set = set(self._nonces)
        self.counter = counter
        self.services = CapsuleServices(self)
        self.store: SealedStore | None = None
        self.time_verifier = TimeVerifier(machine.time_public) if machine.time_public is not None else None
        self.crash_at: set[str] = set()
        self.dead = False
        # Seconds spent in the last invocation, by component.
        self.last_timing: dict[str, float] = {}

    # -- identity --------------------------------------------------------------

    @property
    def id(self) -> bytes:
        return self.id_key.public.der

    @property
    def kind(self) -> str:
        return self.layer.kind

    def __repr__(self) -> str:
        return f"Capsule({self.owner.name}@[{self.host[0]},{self.host[1]}], kind={self.kind}, counter={self.counter})"

    # -- records -----------------------------------------------------------------

    def portable_record(self) -> dict:
        """Everything that travels in a hosting transfer (no instance identity)."""
        return {
            "v": 1,
            "owner": [self.owner.name, self.owner.key.der],
            "policy": self.policy_db.to_record(),
            "kind": self.kind,
            "layer": self.layer.to_record(),
            "known": self.known_principals.to_record(),
            "crowd": None if self.crowd is None else self.crowd.to_record(),
            "lineage": [list(h) for h in self.lineage],
            "countersigners": list(self.countersigners),
        }

    def state_record(self) -> dict:
        rec = self.portable_record()
        rec.update(
            {
                "host": list(self.host),
                "id_key": self.id_key.private_pem(),
                "audit": [e.encoded for e in self.audit],
                "nonces": list(self._nonces),
                "counter": self.counter,
            }
        )
        return rec

    @staticmethod
    def parse_portable(rec) -> dict:
        from ..transformations import CrowdMembership

        try:
            if rec["v"] != 1:
                raise FramingError("unknown capsule record version")
            name, der = rec["owner"]
            return {
                "owner": Principal(name, PublicKey(der)),
                "policy_db": PolicyDatabase.from_record(rec["policy"]),
                "layer": restore_layer(rec["kind"], rec["layer"]),
                "known_principals": Keyring.from_record(rec["known"]),
                "crowd": None if rec["crowd"] is None else CrowdMembership.from_record(rec["crowd"]),
                "lineage": [tuple(h) for h in rec["lineage"]],
                "countersigners": [bytes(d) for d in rec["countersigners"]],
            }
        except (KeyError, TypeError, ValueError) as exc:
            raise FramingError(f"malformed capsule record: {exc}") from exc

    def _load_state(self, rec) -> None:
        parts = Capsule.parse_portable(rec)
        self.policy_db = parts["policy_db"]
        self.layer = parts["layer"]
        self.crowd = parts["crowd"]
        # An in-memory record still holds the pre-encoded entries.
        self.audit = [
            AuditEntry.from_record(encoding.decode(e) if isinstance(e, encoding.Encoded) else e) for e in rec["audit"]
        ]
        self.counter = rec["counter"]

    def persist(self, which: str = "state") -> None:
        if self.store is not None:
            self.store.write(which, self.state_record())

    def bind_counter(self) -> int:
        """Advance the trust-module counter and persist against it."""
        self.counter = self.tm.counter_advance()
        self.persist()
        return self.counter

    def _crash(self, point: str) -> None:
        if point in self.crash_at:
            self.dead = True
            raise SimulatedCrash(point)

    # -- invocation ----------------------------------------------------------------

    def ops(self) -> dict:
        table = {name: (spec, None) for name, spec in self.layer.ops.items()}
        table.update(_base_ops())
        return table

    def handle(self, frame: bytes) -> bytes:
        """Process one INVOKE frame and return the INVOKE_RESP frame."""
        tap = self.machine.tap
        tap.record(IN, "invoke", self.id, frame)
        out = self._handle(frame)
        tap.record(OUT, "invoke", self.id, out)
        return out

    def _reject(self, reason: str) -> bytes:
        return response_frame("rejected", reason=reason)

    def _handle(self, frame: bytes) -> bytes:
        self._t0 = time.perf_counter()
        self.last_timing = {}
        if self.dead:
            raise CapsuleError("capsule instance crashed; recover it from storage")
        try:
            req = InvocationRequest.from_frame(frame)
        except FramingError as exc:
            return self._reject(f"malformed request: {exc}")
        if not isinstance(req.capsule_id, bytes) or req.capsule_id != self.id:
            return self._reject("request addressed to another capsule")
        key = self.known_principals.get(req.invoker)
        if key is None and req.invoker == self.owner.name:
            key = self.owner.key
        if key is None or not isinstance(req.signature, bytes) or not key.verify(req.signature, req.signing_bytes()):
            return self._reject("invoker signature invalid")
        if not isinstance(req.nonce, bytes) or len(req.nonce) < 8:
            return self._reject("missing nonce")
        if req.nonce in self._nonce_set:
            return self._reject("replayed nonce")
        self._remember(req.nonce)

        entry = self.ops().get(req.op)
        if entry is None:
            return response_frame("error", kind="unknown_op", reason=f"unknown operation {req.op}")
        spec, base_handler = entry

        new_db = self.policy_db
        proof: tuple[bytes, ...] = ()
        if spec.owner_only:
            if req.invoker != self.owner.name:
                return response_frame("denied", reason="owner_only")
            basis = "owner"
        elif not spec.policy:
            basis = "authenticated"
        else:
            try:
                amount = int(spec.amount(list(req.args)))
            except (TypeError, ValueError, IndexError):
                return response_frame("error", kind="data_layer", reason="bad arguments")
            query = Predicate("CanInvoke", (string(req.op), principal(req.invoker), number(amount)))
            current_time = self.services.time() if self._needs_time(req.supporting) else None
            try:
                decision = resolve(
                    self.policy_db,
                    req.supporting,
                    query,
                    speaker=self.owner.name,
                    keyring=self.known_principals,
                    countersigners=tuple(PublicKey(d) for d in self.countersigners),
                    current_time=current_time,
                )
            except SignatureError as exc:
                return self._reject(str(exc))
            except PolicyError as exc:
                return response_frame("denied", reason=f"type: {exc}")
            if not decision:
                return response_frame("denied", reason=decision.reason)
            try:
                new_db = apply_state_updates(self.policy_db, decision.matched_state, self.id_key)
            except StateUpdateError:
                return response_frame("denied", reason="state")
            basis = "granted"
            proof = tuple(a.digest() for a in decision.proof)

        return self._execute(req, spec, base_handler, new_db, basis, proof)

    def _needs_time(self, supporting) -> bool:
        for a in (*self.policy_db, *supporting):
            if any(uses_current_time(c) for c in a.constraints):
                return True
        return False

    def _remember(self, nonce: bytes) -> None:
        if len(self._nonces) == self._nonces.maxlen:
            self._nonce_set.discard(self._nonces[0])
        self._nonces.append(nonce)
        self._nonce_set.add(nonce)

    def _execute(self, req, spec, base_handler, new_db, basis, proof) -> bytes:
        self.last_timing["policy"] = time.perf_counter() - self._t0
        pre = self.state_record()
        self.policy_db = new_db
        self.counter = self.tm.counter_read() + 1
        self.persist("intent")  # post-policy state, pre-dispatch data
        self._crash("after_intent")
        self.counter = self.tm.counter_advance()
        self._crash("after_advance")

        ctx = InvocationContext(
            req.invoker,
            self.owner.name,
            self.id,
            self.services,
            {"request": req, "invoker_key": self.known_principals.get(req.invoker) or self.owner.key},
        )
        t = time.perf_counter()
        try:
            if base_handler is not None:
                result = base_handler(self, ctx, *req.args)
            else:
                result = self.layer.call(req.op, list(req.args), ctx)
            encoding.encode(result)
            self.last_timing["data_layer"] = time.perf_counter() - t
        except (CapsuleError, TypeError, ValueError) as exc:
            # Roll the data layer and policy back, bound to the new counter.
            counter = self.counter
            self._load_state(pre)
            self.counter = counter
            self.persist()
            if self.store is not None:
                self.store.remove("intent")
            if isinstance(exc, BelowThreshold):
                return response_frame("denied", reason="threshold")
            kind = "data_layer" if isinstance(exc, (DataLayerError, TypeError, ValueError)) else type(exc).__name__
            return response_frame("error", kind=kind, reason=str(exc))
        self._crash("after_dispatch")

        self.audit.append(AuditEntry(self.counter, req.invoker, req.op, basis, proof))
        self.persist()
        if self.store is not None:
            self.store.remove("intent")
        self._crash("after_persist")
        return response_frame("ok", result=result)

    # -- recovery -----------------------------------------------------------------

    def recover(self) -> None:
        """Reload from sealed storage, bound to the trust-module counter."""
        if self.store is None:
            raise CapsuleError("capsule has no durable storage")
        current = self.tm.counter_read()
        state = self.store.read("state")
        intent = self.store.read("intent")
        if state is not None and state["counter"] == current:
            chosen = state
        elif intent is not None and intent["counter"] == current:
            chosen = intent  # crashed after advancing: roll forward
        else:
            seen = [r["counter"] for r in (state, intent) if r is not None]
            raise ReplayError(f"stored state {seen} does not match trust-module counter {current}")
        self._load_state(chosen)
        self._nonces = deque(chosen["nonces"], maxlen=NONCE_WINDOW)
        self._nonce_set = set(self._nonces)
        self.dead = False
        self.crash_at = set()
        if chosen is intent:
            self.persist()
        self.store.remove("intent")


def state_digest(capsule: Capsule) -> bytes:
    return sha256(encoding.encode(capsule.portable_record()))
