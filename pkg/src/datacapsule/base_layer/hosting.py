"""Moving a capsule between machines.

Three messages, Diffie-Hellman based::

    1  M  -> M'   K_C, N
    2  M' -> M    K_C', Attestation(M', BL, N, K_C, K_C')
    3  M  -> M'   { C }_DHK

The source checks the CanHost policy before sending anything and checks
the attestation before Step 3, so a substituted K_C' (man in the middle)
or a rogue base layer aborts the run.
"""

from __future__ import annotations

from fractions import Fraction
from math import floor

from .. import encoding
from ..crypto import DHKey, PublicKey, derive_keys, open_box, seal as seal_box, sha256
from ..encoding import MsgType, frame, unframe
from ..errors import AttestationFailure, CapsuleError, HostingDenied, PolicyError, ReplayError, SignatureError
from ..policy import PolicyDatabase, Predicate, principal, resolve, split_constraint
from ..policy.state import splittable
from ..trust_module import Attestation, AttestationVerifier, Certificate, verify_attestation
from .capsule import Capsule
from .messages import HostingRequest, SealedCapsule
from .tap import IN, OUT

DEFAULT_SHARE = Fraction(1, 2)
_INFO = b"capsule-transfer/v1"


def transfer_transcript(nonce: bytes, sender_key: bytes, receiver_key: bytes) -> bytes:
    return encoding.encode([nonce, sender_key, receiver_key])


# -- sealing -----------------------------------------------------------------------


def seal(
    c: Capsule | dict,
    dh_secret: bytes,
    sender_key: bytes = b"",
    receiver_key: bytes = b"",
    binding: int = 0,
    transcript: bytes = b"",
    source: bytes | None = None,
) -> SealedCapsule:
    """Encrypt-then-MAC the portable record under keys derived from ``dh_secret``."""
    record = c.portable_record() if isinstance(c, Capsule) else c
    src = source if source is not None else (c.id if isinstance(c, Capsule) else b"")
    draft = SealedCapsule(sender_key, receiver_key, src, binding)
    enc_key, mac_key = derive_keys(dh_secret, _INFO, transcript)
    return SealedCapsule(
        sender_key, receiver_key, src, binding, seal_box(enc_key, mac_key, encoding.encode(record), draft.aad())
    )


def unseal(s: SealedCapsule, dh_secret: bytes, tm=None, transcript: bytes = b"") -> dict:
    """Verify the MAC, then the counter binding, then parse.

    With a trust module, the binding must exceed every binding previously
    accepted from the same source; the new high-water mark is recorded.
    """
    enc_key, mac_key = derive_keys(dh_secret, _INFO, transcript)
    plaintext = open_box(enc_key, mac_key, s.box, s.aad())
    if tm is not None and not tm.accept_binding(s.source, s.binding):
        raise ReplayError(f"counter binding {s.binding} is not newer than {tm.high_water(s.source)}")
    return Capsule.parse_portable(encoding.decode(plaintext))


# -- exo-leasing ---------------------------------------------------------------------


def split_database(db: PolicyDatabase, share, countersigner=None) -> tuple[PolicyDatabase, PolicyDatabase]:
    """(retained, transferred) databases with every decomposable budget split.

    The transferred side gets ``floor(value * share)``; the remainder stays.
    """
    share = Fraction(share)
    if not 0 <= share <= 1:
        raise PolicyError(f"transfer share {share} outside [0, 1]")
    kept, moved = [], []
    for a in db:
        if splittable(a):
            var = a.state.decomposable()[0]
            amount = floor(a.state.value(var) * share)
            r, t = split_constraint(a, amount, var, countersigner)
            kept.append(r)
            moved.append(t)
        else:
            kept.append(a)
            moved.append(a)
    retained = PolicyDatabase(tuple(kept), db.version + 1)
    return retained, PolicyDatabase(_dedupe(moved), 0)


def _dedupe(assertions) -> tuple:
    seen, out = set(), []
    for a in assertions:
        enc = a.encoded()
        if enc not in seen:
            seen.add(enc)
            out.append(a)
    return tuple(out)


# -- the protocol, source side -------------------------------------------------------


def check_hosting(src: Capsule, req: HostingRequest):
    query = Predicate("CanHost", (principal(req.target_machine),))
    try:
        decision = resolve(
            src.policy_db,
            req.supporting,
            query,
            speaker=src.owner.name,
            keyring=src.known_principals,
            countersigners=tuple(PublicKey(d) for d in src.countersigners),
            current_time=src.services.time() if src._needs_time(req.supporting) else None,
        )
    except SignatureError as exc:
        raise HostingDenied(f"supporting assertion rejected: {exc}") from exc
    except PolicyError as exc:
        raise HostingDenied(str(exc)) from exc
    if not decision:
        raise HostingDenied(f"{src.owner.name} says CanHost({req.target_machine}) not derivable ({decision.reason})")
    return decision


def _verify_step2(src: Capsule, req: HostingRequest, body1: dict, nonce: bytes, step2: bytes):
    try:
        _, body = unframe(step2, MsgType.INSTALL2)
        k_c2, new_id = body["k_c2"], body["id"]
        if src.machine.ca_public is None or body["cert"] is None:
            raise AttestationFailure("no certification authority to check against")
        verifier = AttestationVerifier(src.machine.ca_public, [Certificate.from_record(body["cert"])])
        att = Attestation.from_record(body["attestation"])
        ok = verify_attestation(att, src.machine.code_id, nonce, verifier, expected_machine=req.target_machine)
        ok = ok and att.input_digest == sha256(encoding.encode(body1))
        ok = ok and att.output_digest == sha256(encoding.encode([k_c2, new_id]))
    except AttestationFailure:
        raise
    except (CapsuleError, KeyError, TypeError, ValueError) as exc:
        raise AttestationFailure(f"attestation rejected: {exc}") from exc
    if not ok:
        raise AttestationFailure("attestation does not match this run")
    return k_c2


def host_transfer(src: Capsule, req: HostingRequest, destination, *, tamper=None) -> Capsule:
    """Run the hosting protocol from ``src`` to the ``destination`` machine.

    ``tamper(step, frame) -> frame`` lets tests play the network attacker.
    Returns the new capsule instance at the destination.
    """
    check_hosting(src, req)  # denial: nothing is sent
    tap = src.machine.tap
    relay = tamper or (lambda step, data: data)

    dh = DHKey.generate(src.tm.random_bytes)
    nonce = src.tm.random_bytes(16)
    body1 = {"k_c": dh.public, "nonce": nonce, "source": src.id, "service": req.target_service}
    step1 = frame(MsgType.INSTALL1, body1)
    tap.record(OUT, "hosting", src.id, step1)
    step2 = relay(2, destination.install_begin(relay(1, step1)))
    tap.record(IN, "hosting", src.id, step2)
    k_c2 = _verify_step2(src, req, body1, nonce, step2)

    share = DEFAULT_SHARE if req.transfer_share is None else req.transfer_share
    retained, moved = split_database(src.policy_db, share, src.id_key)
    moved = PolicyDatabase(_dedupe((*moved, *req.supporting)), 0)
    layer = src.layer if req.filter is None else src.layer.filter(req.filter)

    src.policy_db = retained
    binding = src.bind_counter()
    record = src.portable_record()
    record["policy"] = moved.to_record()
    record["layer"] = layer.to_record()
    try:
        secret = dh.exchange(k_c2)
    except CapsuleError as exc:
        raise AttestationFailure(str(exc)) from exc
    sealed = seal(record, secret, dh.public, k_c2, binding, transfer_transcript(nonce, dh.public, k_c2), src.id)
    step3 = sealed.to_frame()
    tap.record(OUT, "hosting", src.id, step3)
    return destination.install_complete(relay(3, step3))


__all__ = [
    "DEFAULT_SHARE",
    "check_hosting",
    "host_transfer",
    "seal",
    "split_database",
    "transfer_transcript",
    "unseal",
]
