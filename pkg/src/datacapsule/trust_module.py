"""Simulated trust module: isolation id, durable counter, RNG, attestation.

One :class:`TrustModule` guards one isolation compartment.  Its attestation
key is certified to a machine name by a :class:`CertificationAuthority`;
verifiers hold an :class:`AttestationVerifier` built from those records.
"""

from __future__ import annotations

import hashlib
import os
import struct
import threading
from dataclasses import dataclass, replace
from pathlib import Path

from . import encoding
from .crypto import KeyPair, PublicKey, sha256
from .errors import CounterPersistenceError, TrustModuleError, UnknownAttestationKey

SEED_ENV = "CAPSULE_TEST_SEED"
_U64 = struct.Struct(">Q")


# -- certification ------------------------------------------------------------


@dataclass(frozen=True)
class Certificate:
    """CA statement binding a machine name to an attestation key."""

    machine: str
    key: bytes
    signature: bytes

    @staticmethod
    def signing_bytes(machine: str, key: bytes) -> bytes:
        return encoding.encode(["tm-cert/v1", machine, key])

    def to_record(self) -> list:
        return [self.machine, self.key, self.signature]

    @classmethod
    def from_record(cls, rec) -> "Certificate":
        return cls(rec[0], rec[1], rec[2])


class CertificationAuthority:
    def __init__(self, name: str = "CA", key: KeyPair | None = None):
        self.name = name
        self.key = key or KeyPair.generate()

    @property
    def public(self) -> PublicKey:
        return self.key.public

    def certify(self, machine: str, attestation_key: PublicKey) -> Certificate:
        sig = self.key.sign(Certificate.signing_bytes(machine, attestation_key.der))
        return Certificate(machine, attestation_key.der, sig)


class AttestationVerifier:
    """Attestation keys a verifier trusts, each checked against the CA."""

    def __init__(self, ca_public: PublicKey, certificates=()):
        self.ca_public = ca_public
        self._by_key: dict[bytes, str] = {}
        for cert in certificates:
            self.add(cert)

    def add(self, cert: Certificate) -> None:
        if not self.ca_public.verify(cert.signature, Certificate.signing_bytes(cert.machine, cert.key)):
            raise TrustModuleError(f"certificate for {cert.machine} not signed by the CA")
        self._by_key[cert.key] = cert.machine

    def machine_for(self, key_der: bytes) -> str:
        try:
            return self._by_key[key_der]
        except KeyError:
            raise UnknownAttestationKey("attestation key not vouched for by the CA") from None


# -- attestations -----------------------------------------------------------


@dataclass(frozen=True)
class Attestation:
    code_id: bytes
    nonce: bytes
    input_digest: bytes
    output_digest: bytes
    counter_snapshot: int
    key: bytes  # DER of the attesting module's public key
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return encoding.encode(
            [
                "attestation/v1",
                self.code_id,
                self.nonce,
                self.input_digest,
                self.output_digest,
                self.counter_snapshot,
                self.key,
            ]
        )

    def to_record(self) -> list:
        return [
            self.code_id,
            self.nonce,
            self.input_digest,
            self.output_digest,
            self.counter_snapshot,
            self.key,
            self.signature,
        ]

    @classmethod
    def from_record(cls, rec) -> "Attestation":
        code_id, nonce, i, o, counter, key, sig = rec
        return cls(code_id, nonce, i, o, counter, key, sig)


def verify_attestation(
    att: Attestation,
    expected_code_id: bytes,
    expected_nonce: bytes,
    verifier: AttestationVerifier,
    expected_machine: str | None = None,
) -> bool:
    """True iff signed by a certified key and code/nonce (and machine) match.

    Raises :class:`UnknownAttestationKey` when the key has no certificate.
    """
    machine = verifier.machine_for(att.key)
    try:
        key = PublicKey(att.key)
    except ValueError:
        return False
    if not key.verify(att.signature, att.signing_bytes()):
        return False
    if expected_machine is not None and machine != expected_machine:
        return False
    return att.code_id == expected_code_id and att.nonce == expected_nonce


# -- randomness -------------------------------------------------------------


class _Drbg:
    """SHA-256 counter-mode stream; reproducible from a seed (tests only)."""

    def __init__(self, seed: bytes):
        self._key = sha256(b"drbg", seed)
        self._block = 0
        self._buf = b""

    def read(self, n: int) -> bytes:
        while len(self._buf) < n:
            self._buf += hashlib.sha256(self._key + _U64.pack(self._block)).digest()
            self._block += 1
        out, self._buf = self._buf[:n], self._buf[n:]
        return out


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return None
    return int(raw)


# -- the module -------------------------------------------------------------


class TrustModule:
    def __init__(
        self,
        machine: str,
        counter_path: str | os.PathLike | None = None,
        seed: int | None = None,
        boundary_id: str | None = None,
        key_kind: str | None = None,
        attestation_key: KeyPair | None = None,
    ):
        self.machine = machine
        self._lock = threading.RLock()
        seed = _env_seed() if seed is None else seed
        self._seed = seed
        if seed is not None:
            self._rng = _Drbg(f"{seed}|{machine}|{boundary_id or ''}".encode())
        else:
            self._rng = None
        self.boundary_id = boundary_id or self.random_bytes(8).hex()
        if attestation_key is None:
            if seed is not None and (key_kind or "ed25519") == "ed25519":
                attestation_key = KeyPair.generate("ed25519", seed=self.random_bytes(32))
            else:
                attestation_key = KeyPair.generate(key_kind)
        self._attestation_key = attestation_key
        self.counter_path = Path(counter_path) if counter_path is not None else None
        self._failed = False
        self._counter = self._load_counter()
        self._high_water: dict[bytes, int] = self._load_high_water()

    @property
    def attestation_public(self) -> PublicKey:
        return self._attestation_key.public

    def compartment(self, boundary_id: str, counter_path: str | os.PathLike | None = None) -> "TrustModule":
        """Another isolation compartment on the same hardware.

        It shares the attestation key but has its own counter and RNG stream.
        """
        return TrustModule(
            self.machine, counter_path, seed=self._seed, boundary_id=boundary_id,
            attestation_key=self._attestation_key,
        )

    # -- randomness ---------------------------------------------------------

    def random_bytes(self, n: int) -> bytes:
        if n < 1:
            raise ValueError("n must be >= 1")
        with self._lock:
            if self._rng is not None:
                return self._rng.read(n)
            return os.urandom(n)

    @property
    def deterministic(self) -> bool:
        return self._rng is not None

    # -- counter ------------------------------------------------------------

    def _load_counter(self) -> int:
        if self.counter_path is None or not self.counter_path.exists():
            return 0
        raw = self.counter_path.read_bytes()
        if len(raw) != 8:
            raise CounterPersistenceError(f"corrupt counter file {self.counter_path}")
        return _U64.unpack(raw)[0]

    def _durable_write(self, path: Path, data: bytes) -> None:
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    def _check_alive(self) -> None:
        if self._failed:
            raise CounterPersistenceError("counter storage failed; module refuses service")

    def counter_read(self) -> int:
        with self._lock:
            self._check_alive()
            return self._counter

    def counter_advance(self) -> int:
        with self._lock:
            self._check_alive()
            value = self._counter + 1
            if self.counter_path is not None:
                try:
                    self._durable_write(self.counter_path, _U64.pack(value))
                except OSError as exc:
                    self._failed = True
                    raise CounterPersistenceError(str(exc)) from exc
            self._counter = value
            return value

    # -- anti-replay high-water marks -----------------------------------------

    def _hw_path(self) -> Path | None:
        if self.counter_path is None:
            return None
        return self.counter_path.with_name(self.counter_path.name + ".hw")

    def _load_high_water(self) -> dict[bytes, int]:
        path = self._hw_path()
        if path is None or not path.exists():
            return {}
        return dict(encoding.decode(path.read_bytes()))

    def high_water(self, source: bytes) -> int:
        with self._lock:
            return self._high_water.get(source, -1)

    def accept_binding(self, source: bytes, counter: int) -> bool:
        """Record ``counter`` for ``source`` iff it exceeds every earlier one."""
        with self._lock:
            self._check_alive()
            if counter <= self._high_water.get(source, -1):
                return False
            updated = {**self._high_water, source: counter}
            path = self._hw_path()
            if path is not None:
                try:
                    self._durable_write(path, encoding.encode(updated))
                except OSError as exc:
                    self._failed = True
                    raise CounterPersistenceError(str(exc)) from exc
            self._high_water = updated
            return True

    # -- attestation --------------------------------------------------------

    def attest(self, code_id: bytes, nonce: bytes, input: bytes, output: bytes) -> Attestation:
        with self._lock:
            counter = self.counter_advance()
            draft = Attestation(code_id, nonce, sha256(input), sha256(output), counter, self.attestation_public.der)
            return replace(draft, signature=self._attestation_key.sign(draft.signing_bytes()))

    def __repr__(self) -> str:
        return f"TrustModule({self.machine}, boundary={self.boundary_id}, counter={self._counter})"
