"""Signing keys, Diffie-Hellman, KDF and symmetric sealing.

Principals default to 2048-bit RSA-PSS keys.  Ed25519 is accepted as a
second key kind; it is much faster to generate, which matters for test
harnesses that instantiate thousands of capsules.
"""

from __future__ import annotations

import hashlib
import hmac
import os
from dataclasses import dataclass
from typing import Callable

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ed25519, padding, rsa, x25519
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import TamperError

RSA_BITS = 2048
DEFAULT_KEY_KIND = "rsa"

_PSS = padding.PSS(mgf=padding.MGF1(hashes.SHA256()), salt_length=32)


def sha256(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(part)
    return h.digest()


class PublicKey:
    """Verification half of a signing key, identified by its DER bytes."""

    def __init__(self, der: bytes):
        self.der = bytes(der)
        key = serialization.load_der_public_key(self.der)
        if isinstance(key, rsa.RSAPublicKey):
            self.kind = "rsa"
        elif isinstance(key, ed25519.Ed25519PublicKey):
            self.kind = "ed25519"
        else:
            raise ValueError("unsupported public key type")
        self._key = key

    def verify(self, signature: bytes, message: bytes) -> bool:
        try:
            if self.kind == "rsa":
                self._key.verify(signature, message, _PSS, hashes.SHA256())
            else:
                self._key.verify(signature, message)
        except InvalidSignature:
            return False
        return True

    @property
    def fingerprint(self) -> bytes:
        return sha256(self.der)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, PublicKey) and other.der == self.der

    def __hash__(self) -> int:
        return hash(self.der)

    def __repr__(self) -> str:
        return f"PublicKey({self.kind}, {self.fingerprint[:6].hex()})"


class KeyPair:
    def __init__(self, private_key):
        self._key = private_key
        if isinstance(private_key, rsa.RSAPrivateKey):
            self.kind = "rsa"
        elif isinstance(private_key, ed25519.Ed25519PrivateKey):
            self.kind = "ed25519"
        else:
            raise ValueError("unsupported private key type")
        der = private_key.public_key().public_bytes(
            serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
        )
        self.public = PublicKey(der)

    @classmethod
    def generate(cls, kind: str | None = None, seed: bytes | None = None) -> "KeyPair":
        kind = kind or DEFAULT_KEY_KIND
        if kind == "rsa":
            return cls(rsa.generate_private_key(public_exponent=65537, key_size=RSA_BITS))
        if kind == "ed25519":
            if seed is not None:
                return cls(ed25519.Ed25519PrivateKey.from_private_bytes(sha256(seed)))
            return cls(ed25519.Ed25519PrivateKey.generate())
        raise ValueError(f"unknown key kind {kind!r}")

    def sign(self, message: bytes) -> bytes:
        if self.kind == "rsa":
            return self._key.sign(message, _PSS, hashes.SHA256())
        return self._key.sign(message)

    def private_pem(self) -> bytes:
        return self._key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )

    @classmethod
    def from_pem(cls, pem: bytes) -> "KeyPair":
        return cls(serialization.load_pem_private_key(pem, password=None))


# -- Diffie-Hellman ---------------------------------------------------------


class DHKey:
    """Ephemeral X25519 key for one protocol run."""

    def __init__(self, private_bytes: bytes):
        self._key = x25519.X25519PrivateKey.from_private_bytes(private_bytes)
        self.public = self._key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )

    @classmethod
    def generate(cls, randbytes: Callable[[int], bytes] = os.urandom) -> "DHKey":
        return cls(randbytes(32))

    def exchange(self, peer_public: bytes) -> bytes:
        try:
            peer = x25519.X25519PublicKey.from_public_bytes(peer_public)
            return self._key.exchange(peer)
        except ValueError as exc:
            raise TamperError("invalid Diffie-Hellman public value") from exc


def derive_keys(secret: bytes, info: bytes, transcript: bytes = b"") -> tuple[bytes, bytes]:
    """HKDF-SHA256 -> (256-bit encryption key, 256-bit MAC key)."""
    okm = HKDF(algorithm=hashes.SHA256(), length=64, salt=sha256(transcript), info=info).derive(
        secret
    )
    return okm[:32], okm[32:]


# -- symmetric --------------------------------------------------------------


@dataclass(frozen=True)
class SealedBox:
    """AES-256-CTR then HMAC-SHA256 over ``aad | iv | ciphertext``."""

    iv: bytes
    ciphertext: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return self.iv + self.tag + self.ciphertext

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SealedBox":
        if len(raw) < 48:
            raise TamperError("sealed box too short")
        return cls(iv=raw[:16], tag=raw[16:48], ciphertext=raw[48:])


def seal(enc_key: bytes, mac_key: bytes, plaintext: bytes, aad: bytes = b"", iv: bytes | None = None) -> SealedBox:
    iv = iv if iv is not None else os.urandom(16)
    enc = Cipher(algorithms.AES(enc_key), modes.CTR(iv)).encryptor()
    ct = enc.update(plaintext) + enc.finalize()
    tag = hmac.new(mac_key, aad + iv + ct, hashlib.sha256).digest()
    return SealedBox(iv, ct, tag)


def open_box(enc_key: bytes, mac_key: bytes, box: SealedBox, aad: bytes = b"") -> bytes:
    expected = hmac.new(mac_key, aad + box.iv + box.ciphertext, hashlib.sha256).digest()
    if not hmac.compare_digest(expected, box.tag):
        raise TamperError("MAC verification failed")
    dec = Cipher(algorithms.AES(enc_key), modes.CTR(box.iv)).decryptor()
    return dec.update(box.ciphertext) + dec.finalize()


def aead_encrypt(key: bytes, nonce: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    return AESGCM(key).encrypt(nonce, plaintext, aad)


def aead_decrypt(key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes = b"") -> bytes:
    try:
        return AESGCM(key).decrypt(nonce, ciphertext, aad)
    except InvalidTag as exc:
        raise TamperError("AEAD authentication failed") from exc
