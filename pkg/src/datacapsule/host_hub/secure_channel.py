"""Capsule-terminated secure channel tunnelled through the untrusted hub.

Handshake (client = capsule, server = e.g. the payment gateway)::

    C -> S  hello    [eph_c, nonce_c]
    S -> C  reply    [eph_s, nonce_s, cert, sig_S(transcript)]

``cert`` binds the server name to its static signing key under the channel
CA; the client pins the expected name.  Both sides derive directional
AES-GCM keys from the X25519 secret and the transcript.  Records are
``len(4) | seq(8) | ciphertext`` with the sequence number as nonce.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .. import encoding
from ..crypto import DHKey, KeyPair, PublicKey, aead_decrypt, aead_encrypt, derive_keys
from ..errors import FramingError, SecureChannelError, TamperError

_HDR = struct.Struct(">IQ")
_LEN = struct.Struct(">I")


@dataclass(frozen=True)
class ServerCertificate:
    name: str
    key: bytes
    signature: bytes

    @staticmethod
    def signing_bytes(name: str, key: bytes) -> bytes:
        return encoding.encode(["channel-cert/v1", name, key])

    @classmethod
    def issue(cls, ca: KeyPair, name: str, key: PublicKey) -> "ServerCertificate":
        return cls(name, key.der, ca.sign(cls.signing_bytes(name, key.der)))


def _msg(data) -> bytes:
    body = encoding.encode(data)
    return _LEN.pack(len(body)) + body


def _take_message(buf: bytearray):
    if len(buf) < 4:
        return None
    (n,) = _LEN.unpack_from(buf, 0)
    if len(buf) < 4 + n:
        return None
    body = bytes(buf[4 : 4 + n])
    del buf[: 4 + n]
    return encoding.decode(body)


class _RecordLayer:
    def __init__(self, send_key: bytes, recv_key: bytes):
        self._send_key = send_key
        self._recv_key = recv_key
        self._send_seq = 0
        self._recv_seq = 0

    def seal(self, plaintext: bytes) -> bytes:
        seq = self._send_seq
        self._send_seq += 1
        nonce = seq.to_bytes(12, "big")
        ct = aead_encrypt(self._send_key, nonce, plaintext, _HDR.pack(0, seq)[4:])
        return _HDR.pack(len(ct), seq) + ct

    def open(self, buf: bytearray) -> bytes | None:
        if len(buf) < _HDR.size:
            return None
        n, seq = _HDR.unpack_from(buf, 0)
        if len(buf) < _HDR.size + n:
            return None
        ct = bytes(buf[_HDR.size : _HDR.size + n])
        del buf[: _HDR.size + n]
        if seq != self._recv_seq:
            raise SecureChannelError(f"record out of sequence ({seq} != {self._recv_seq})")
        nonce = seq.to_bytes(12, "big")
        try:
            plaintext = aead_decrypt(self._recv_key, nonce, ct, _HDR.pack(0, seq)[4:])
        except TamperError as exc:
            raise SecureChannelError("record authentication failed") from exc
        self._recv_seq += 1
        return plaintext


def _keys(secret: bytes, transcript: bytes) -> tuple[bytes, bytes]:
    return derive_keys(secret, b"secure-channel/v1", transcript)


def _transcript(eph_c, nonce_c, eph_s, nonce_s, cert: ServerCertificate) -> bytes:
    return encoding.encode([eph_c, nonce_c, eph_s, nonce_s, cert.name, cert.key])


class ClientChannel:
    """Capsule side.  ``transport`` offers ``send(bytes)`` and ``recv() -> bytes``."""

    def __init__(self, transport, pinned_name: str, ca_public: PublicKey, randbytes):
        self.transport = transport
        self.pinned_name = pinned_name
        self.ca_public = ca_public
        self._rand = randbytes
        self._records: _RecordLayer | None = None
        self._buf = bytearray()

    def handshake(self) -> None:
        eph = DHKey.generate(self._rand)
        nonce_c = self._rand(16)
        self.transport.send(_msg([eph.public, nonce_c]))
        reply = self._read_message()
        try:
            eph_s, nonce_s, cert_rec, sig = reply
            cert = ServerCertificate(*cert_rec)
        except (TypeError, ValueError) as exc:
            raise SecureChannelError("malformed server hello") from exc
        if cert.name != self.pinned_name:
            raise SecureChannelError(f"server identity {cert.name!r} does not match pinned {self.pinned_name!r}")
        if not self.ca_public.verify(cert.signature, ServerCertificate.signing_bytes(cert.name, cert.key)):
            raise SecureChannelError("server certificate not issued by the pinned CA")
        transcript = _transcript(eph.public, nonce_c, eph_s, nonce_s, cert)
        try:
            server_key = PublicKey(cert.key)
        except ValueError as exc:
            raise SecureChannelError("bad server key") from exc
        if not server_key.verify(sig, transcript):
            raise SecureChannelError("server hello signature invalid")
        try:
            secret = eph.exchange(eph_s)
        except TamperError as exc:
            raise SecureChannelError(str(exc)) from exc
        c2s, s2c = _keys(secret, transcript)
        self._records = _RecordLayer(c2s, s2c)

    def _read_message(self):
        while True:
            try:
                msg = _take_message(self._buf)
            except FramingError as exc:
                raise SecureChannelError("malformed handshake message") from exc
            if msg is not None:
                return msg
            self._buf += self.transport.recv()

    def send(self, data: bytes) -> None:
        if self._records is None:
            raise SecureChannelError("handshake not complete")
        self.transport.send(self._records.seal(data))

    def recv(self) -> bytes:
        if self._records is None:
            raise SecureChannelError("handshake not complete")
        while True:
            out = self._records.open(self._buf)
            if out is not None:
                return out
            self._buf += self.transport.recv()


class ServerChannel:
    """Server side as a network session: ``feed(bytes) -> bytes``."""

    def __init__(self, name: str, key: KeyPair, cert: ServerCertificate, app, randbytes):
        self.name = name
        self._key = key
        self._cert = cert
        self._app = app  # bytes -> bytes request handler
        self._rand = randbytes
        self._records: _RecordLayer | None = None
        self._buf = bytearray()

    def feed(self, data: bytes) -> bytes:
        self._buf += data
        out = b""
        try:
            if self._records is None:
                hello = _take_message(self._buf)
                if hello is None:
                    return b""
                eph_c, nonce_c = hello
                eph = DHKey.generate(self._rand)
                nonce_s = self._rand(16)
                transcript = _transcript(eph_c, nonce_c, eph.public, nonce_s, self._cert)
                c2s, s2c = _keys(eph.exchange(eph_c), transcript)
                self._records = _RecordLayer(s2c, c2s)
                out += _msg(
                    [eph.public, nonce_s, [self._cert.name, self._cert.key, self._cert.signature],
                     self._key.sign(transcript)]
                )
            while True:
                request = self._records.open(self._buf)
                if request is None:
                    break
                out += self._records.seal(self._app(request))
        except (FramingError, SecureChannelError, TamperError, ValueError, TypeError):
            # A corrupted stream is dropped; the client times out or fails its MAC.
            self._buf.clear()
        return out
