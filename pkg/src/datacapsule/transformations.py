"""Derivative capsules: filtering, and data-crowd aggregation.

Members of a crowd share a secret K_A.  A capsule exports its aggregate so
far as ``H(K_A) || AEAD_{K_A}(entries)``; only a capsule holding K_A can
merge it.  Entries are ``(owner key, payload)`` pairs, so duplicate owners
are visible at merge time and rejected.  The plaintext aggregate leaves a
capsule only once it covers at least ``A_min`` distinct owners.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from . import encoding
from .base_layer.capsule import Capsule
from .crypto import KeyPair, aead_decrypt, aead_encrypt, sha256
from .data_layers import OpSpec
from .errors import BelowThreshold, CrowdMismatch, DuplicateContribution, FramingError, TamperError, TransformationError

CROWD_ID_SIZE = 32
_LEN = struct.Struct(">I")


def canonical_multiset(items) -> list:
    return sorted(items, key=encoding.encode)


@dataclass
class CrowdMembership:
    key: bytes  # K_A
    a_min: int
    entries: list = field(default_factory=list)  # [owner key DER, payload items]
    pad_to: int | None = None  # size class for exported blobs; None disables padding

    def __post_init__(self):
        if len(self.key) != 32:
            raise TransformationError("crowd key must be 256 bits")
        if self.a_min < 1:
            raise TransformationError("A_min must be at least 1")

    @property
    def crowd_id(self) -> bytes:
        return sha256(self.key)

    @property
    def members(self) -> set[bytes]:
        return {owner for owner, _ in self.entries}

    def to_record(self) -> list:
        return [self.key, self.a_min, [[o, list(p)] for o, p in self.entries], self.pad_to]

    @classmethod
    def from_record(cls, rec) -> "CrowdMembership":
        key, a_min, entries, pad_to = rec
        return cls(key, a_min, [[o, list(p)] for o, p in entries], pad_to)


def join(crowd: CrowdMembership, owner_key: bytes, payload) -> CrowdMembership:
    """Seed the aggregate with the capsule's own contribution."""
    if crowd.entries:
        return crowd
    return CrowdMembership(crowd.key, crowd.a_min, [[owner_key, list(payload)]], crowd.pad_to)


# -- blobs ---------------------------------------------------------------------------


def _pad(body: bytes, size: int | None) -> bytes:
    framed = _LEN.pack(len(body)) + body
    if not size:
        return framed
    return framed + bytes(-len(framed) % size)


def _unpad(data: bytes) -> bytes:
    if len(data) < 4:
        raise FramingError("short contribution")
    (n,) = _LEN.unpack_from(data, 0)
    if 4 + n > len(data):
        raise FramingError("bad contribution length")
    return data[4 : 4 + n]


def export_blob(crowd: CrowdMembership, randbytes) -> bytes:
    nonce = randbytes(12)
    body = _pad(encoding.encode(crowd.to_record()[2]), crowd.pad_to)
    return crowd.crowd_id + nonce + aead_encrypt(crowd.key, nonce, body, crowd.crowd_id)


def open_blob(crowd: CrowdMembership, blob: bytes) -> list:
    if not isinstance(blob, bytes) or len(blob) < CROWD_ID_SIZE + 12:
        raise FramingError("contribution blob too short")
    if blob[:CROWD_ID_SIZE] != crowd.crowd_id:
        raise CrowdMismatch("contribution belongs to another crowd")
    nonce = blob[CROWD_ID_SIZE : CROWD_ID_SIZE + 12]
    try:
        body = aead_decrypt(crowd.key, nonce, blob[CROWD_ID_SIZE + 12 :], crowd.crowd_id)
    except TamperError as exc:
        raise CrowdMismatch("contribution does not decrypt under the crowd key") from exc
    entries = encoding.decode(_unpad(body))
    return [[o, list(p)] for o, p in entries]


def merge(dst: CrowdMembership, blob: bytes) -> CrowdMembership:
    """``dst`` plus the blob's entries; all-or-nothing on duplicate owners."""
    incoming = open_blob(dst, blob)
    owners = [o for o, _ in incoming]
    if len(set(owners)) != len(owners) or set(owners) & dst.members:
        raise DuplicateContribution("contribution repeats an owner already merged")
    return CrowdMembership(dst.key, dst.a_min, dst.entries + incoming, dst.pad_to)


def release(crowd: CrowdMembership) -> list:
    if len(crowd.members) < crowd.a_min:
        raise BelowThreshold(f"{len(crowd.members)} of {crowd.a_min} contributors")
    return canonical_multiset(item for _, payload in crowd.entries for item in payload)


# -- capsule operations ------------------------------------------------------------------


def _crowd(capsule) -> CrowdMembership:
    if capsule.crowd is None:
        raise TransformationError("capsule is not a member of a data crowd")
    capsule.crowd = join(capsule.crowd, capsule.owner.key.der, capsule.layer.contribution())
    return capsule.crowd


def _op_export(capsule, ctx):
    return export_blob(_crowd(capsule), capsule.tm.random_bytes)


def _op_merge(capsule, ctx, blob):
    capsule.crowd = merge(_crowd(capsule), blob)
    return len(capsule.crowd.members)


def _op_release(capsule, ctx):
    return release(_crowd(capsule))


def _op_filter(capsule, ctx, criterion=None):
    derived = filter_capsule(capsule, criterion)
    return derived.id


def filter_capsule(capsule, criterion):
    """A derivative holding the matching subset, with the same policies."""
    machine = capsule.machine
    layer = capsule.layer.filter(criterion)
    slot, tm = machine._compartment()
    id_key = KeyPair.generate("ed25519", seed=tm.random_bytes(32))
    parent = sha256(capsule.id).hex()[:16]
    derived = Capsule(
        machine,
        slot,
        tm,
        id_key,
        capsule.owner,
        capsule.host,
        capsule.policy_db,
        layer,
        capsule.known_principals,
        None,
        [*capsule.lineage, (capsule.host[0], f"filter:{parent}")],
        capsule.countersigners,
    )
    return machine._install(derived)


BASE_OPS = {
    "ExportContribution": (OpSpec("ExportContribution"), _op_export),
    "Merge": (OpSpec("Merge"), _op_merge),
    "ReleaseAggregate": (OpSpec("ReleaseAggregate", policy=False), _op_release),
    "Filter": (OpSpec("Filter", owner_only=True), _op_filter),
}

__all__ = [
    "BASE_OPS",
    "CrowdMembership",
    "canonical_multiset",
    "export_blob",
    "filter_capsule",
    "join",
    "merge",
    "open_blob",
    "release",
]
