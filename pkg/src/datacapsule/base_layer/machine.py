"""A machine running the base layer: compartments, capsules, installation."""

from __future__ import annotations

import hashlib
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .. import encoding
from ..crypto import DHKey, KeyPair, PublicKey
from ..data_layers import create_layer
from ..encoding import MsgType, frame, unframe
from ..errors import FramingError, PolicyError, ProtocolError, ReplayError
from ..host_hub import HostHub
from ..policy import Keyring, PolicyDatabase, Principal, parse_policy
from ..trust_module import CertificationAuthority, TrustModule
from .capsule import Capsule, SealedStore
from .messages import Identity, SealedCapsule
from .tap import IN, OUT, BoundaryTap


def _code_id() -> bytes:
    h = hashlib.sha256(b"base-layer/v1\0")
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode() + b"\0" + path.read_bytes())
    return h.digest()


BASE_LAYER_CODE_ID = _code_id()


@dataclass
class InstallSession:
    """Destination-side state of one hosting run, kept after completion so a
    replayed Step 3 is recognised rather than merely undecryptable."""

    dh: DHKey
    sender_key: bytes
    nonce: bytes
    source: bytes
    service: str
    slot: str
    tm: TrustModule
    id_key: KeyPair
    done: bool = False
    capsule: Capsule | None = field(default=None, repr=False)


def _policy_db(policy, owner: Identity) -> PolicyDatabase:
    db = parse_policy(policy) if isinstance(policy, str) else (policy or PolicyDatabase())
    foreign = sorted({a.issuer for a in db if a.signature is None and a.issuer != owner.name})
    if foreign:
        raise PolicyError(f"unsigned assertions issued by {', '.join(foreign)}; only the owner's may be signed here")
    return db.signed({owner.name: owner.key})


class Machine:
    """One physical host: a machine trust module, a host hub, and capsules.

    ``code_id`` is the measured identity of the running base layer; tests
    substitute another value to model a modified (rogue) base layer.
    """

    def __init__(
        self,
        name: str,
        ca: CertificationAuthority | None = None,
        *,
        hub: HostHub | None = None,
        state_dir=None,
        seed: int | None = None,
        code_id: bytes | None = None,
        time_public: PublicKey | None = None,
        ca_public: PublicKey | None = None,
        key_kind: str | None = None,
    ):
        self.name = name
        self.state_dir = Path(state_dir) if state_dir is not None else Path(tempfile.mkdtemp(prefix="capsule-"))
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.tm = TrustModule(name, self.state_dir / "machine.ctr", seed=seed, boundary_id="machine", key_kind=key_kind)
        self.code_id = code_id if code_id is not None else BASE_LAYER_CODE_ID
        self.hub = hub or HostHub()
        if time_public is None and self.hub.time_authority is not None:
            time_public = self.hub.time_authority.public
        self.time_public = time_public
        self.ca_public = ca_public if ca_public is not None else (ca.public if ca is not None else None)
        self.certificate = ca.certify(name, self.tm.attestation_public) if ca is not None else None
        self.tap = BoundaryTap()
        self.capsules: dict[bytes, Capsule] = {}
        self.sessions: dict[bytes, InstallSession] = {}

    def __repr__(self) -> str:
        return f"Machine({self.name}, capsules={len(self.capsules)})"

    # -- compartments ----------------------------------------------------------

    def _compartment(self, slot: str | None = None) -> tuple[str, TrustModule]:
        slot = slot or self.tm.random_bytes(8).hex()
        return slot, self.tm.compartment(slot, self.state_dir / f"{slot}.ctr")

    def _install(self, capsule: Capsule) -> Capsule:
        store = SealedStore(self.state_dir, capsule.slot, self.tap, capsule.tm.random_bytes)
        store.capsule_id = capsule.id
        capsule.store = store
        capsule.counter = capsule.tm.counter_read()
        capsule.persist()
        self.capsules[capsule.id] = capsule
        return capsule

    # -- creation --------------------------------------------------------------

    def create_capsule(
        self,
        owner: Identity,
        policy="",
        kind: str = "dummy",
        initial=None,
        known_principals=None,
        service: str | None = None,
        crowd=None,
    ) -> Capsule:
        layer = create_layer(kind, initial)
        db = _policy_db(policy, owner)
        known = Keyring()
        for name, key in dict(known_principals or {}).items():
            known.add(name, key)
        known.add(owner.name, owner.public)
        slot, tm = self._compartment()
        id_key = KeyPair.generate("ed25519", seed=tm.random_bytes(32))
        host = (self.name, service or owner.name)
        capsule = Capsule(
            self, slot, tm, id_key, Principal(owner.name, owner.public), host, db, layer, known, crowd, [host],
        )
        return self._install(capsule)

    # -- invocation ------------------------------------------------------------

    def invoke(self, capsule_id: bytes, request_frame: bytes) -> bytes:
        capsule = self.capsules.get(capsule_id)
        if capsule is None:
            raise ProtocolError("no such capsule on this machine")
        return capsule.handle(request_frame)

    # -- hosting: destination side ----------------------------------------------

    def install_begin(self, step1: bytes) -> bytes:
        """Step 1 in, Step 2 out: fresh compartment, key and attestation."""
        self.tap.record(IN, "hosting", b"", step1)
        _, body = unframe(step1, MsgType.INSTALL1)
        try:
            k_c, nonce, source, service = body["k_c"], body["nonce"], body["source"], body["service"]
            if not (isinstance(k_c, bytes) and isinstance(nonce, bytes) and isinstance(service, str)):
                raise TypeError("bad field types")
        except (KeyError, TypeError) as exc:
            raise FramingError(f"malformed hosting step 1: {exc}") from exc
        slot, tm = self._compartment()
        dh = DHKey.generate(tm.random_bytes)
        id_key = KeyPair.generate("ed25519", seed=tm.random_bytes(32))
        output = encoding.encode([dh.public, id_key.public.der])
        attestation = tm.attest(self.code_id, nonce, encoding.encode(body), output)
        self.sessions[dh.public] = InstallSession(dh, k_c, nonce, source, service, slot, tm, id_key)
        cert = self.certificate.to_record() if self.certificate is not None else None
        step2 = frame(
            MsgType.INSTALL2,
            {"k_c2": dh.public, "id": id_key.public.der, "attestation": attestation.to_record(), "cert": cert},
        )
        self.tap.record(OUT, "hosting", b"", step2)
        return step2

    def install_complete(self, step3: bytes) -> Capsule:
        """Step 3 in: authenticate, check the counter binding, instantiate."""
        from .hosting import transfer_transcript, unseal

        self.tap.record(IN, "hosting", b"", step3)
        sealed = SealedCapsule.from_frame(step3)
        session = self.sessions.get(sealed.receiver_key)
        if session is None:
            raise ProtocolError("no hosting session for this receiver key")
        if sealed.sender_key != session.sender_key:
            raise ProtocolError("sender key does not match step 1")
        secret = session.dh.exchange(sealed.sender_key)
        transcript = transfer_transcript(session.nonce, sealed.sender_key, sealed.receiver_key)
        if session.done:
            # Authenticate first so the error says what happened.
            unseal(sealed, secret, None, transcript)
            raise ReplayError("sealed capsule already consumed")
        parts = unseal(sealed, secret, self.tm, transcript)
        host = (self.name, session.service)
        capsule = Capsule(
            self,
            session.slot,
            session.tm,
            session.id_key,
            parts["owner"],
            host,
            parts["policy_db"],
            parts["layer"],
            parts["known_principals"],
            parts["crowd"],
            [*parts["lineage"], host],
            parts["countersigners"],
        )
        session.done = True
        session.capsule = capsule
        return self._install(capsule)

    # -- restart ----------------------------------------------------------------

    def reboot(self) -> dict[bytes, Capsule]:
        """Forget volatile state and reload every capsule from sealed storage.

        Raises :class:`ReplayError` if stored state does not match the
        trust-module counter it is bound to (rollback).
        """
        self.capsules = {}
        self.sessions = {}
        slots = sorted({p.name.split(".")[0] for p in self.state_dir.glob("*.nv")})
        for slot in slots:
            _, tm = self._compartment(slot)
            store = SealedStore(self.state_dir, slot, self.tap, tm.random_bytes)
            rec = store.read("state") or store.read("intent")
            if rec is None:
                continue
            parts = Capsule.parse_portable(rec)
            capsule = Capsule(
                self, slot, tm, KeyPair.from_pem(rec["id_key"]), parts["owner"], tuple(rec["host"]),
                parts["policy_db"], parts["layer"], parts["known_principals"], parts["crowd"],
                parts["lineage"], parts["countersigners"],
            )
            store.capsule_id = capsule.id
            capsule.store = store
            capsule.recover()
            self.capsules[capsule.id] = capsule
        return self.capsules


def create_capsule(
    owner: Identity,
    policy_text="",
    data_layer_kind: str = "dummy",
    initial_data=None,
    known_principals=None,
    *,
    machine: Machine | None = None,
    **kwargs,
) -> Capsule:
    """Create ``C_U@[M_U,U]``; without ``machine`` a private one is made."""
    machine = machine or Machine(f"{owner.name}-machine")
    return machine.create_capsule(owner, policy_text, data_layer_kind, initial_data, known_principals, **kwargs)
