"""Block storage: a dumb hub-side store and the capsule-side sealing layer."""

from __future__ import annotations

import struct

from .. import encoding
from ..crypto import aead_decrypt, aead_encrypt
from ..errors import ReplayError, TamperError

BLOCK_SIZE = 4096
EMPTY = b""  # marker returned for never-written indices
_HEADER = struct.Struct(">QQQ")  # index, epoch, version


class BlockStore:
    """Hub side: keeps whatever bytes it is given.  Trusted for nothing."""

    def __init__(self):
        self.blocks: dict[tuple[bytes, int], bytes] = {}

    def read(self, owner: bytes, index: int) -> bytes:
        return self.blocks.get((owner, index), EMPTY)

    def write(self, owner: bytes, index: int, data: bytes) -> None:
        self.blocks[(owner, index)] = bytes(data)


class SecureBlocks:
    """Capsule side.  Each block is AES-GCM sealed and bound to
    (capsule id, index, epoch, version); the version map never leaves the
    capsule, so a stale block of the current epoch is caught too."""

    def __init__(self, io, key: bytes, capsule_id: bytes, epoch: int, randbytes):
        self._io = io  # callable(op, index, data=None)
        self._key = key
        self.capsule_id = capsule_id
        self.epoch = epoch
        self._rand = randbytes
        self.versions: dict[int, int] = {}

    def _aad(self, index: int, epoch: int, version: int) -> bytes:
        return encoding.encode(["block/v1", self.capsule_id, index, epoch, version])

    def write(self, index: int, data: bytes) -> bytes:
        if len(data) > BLOCK_SIZE:
            raise ValueError(f"block larger than {BLOCK_SIZE} bytes")
        plain = struct.pack(">H", len(data)) + data + bytes(BLOCK_SIZE - len(data))
        version = self.versions.get(index, 0) + 1
        nonce = self._rand(12)
        ct = aead_encrypt(self._key, nonce, plain, self._aad(index, self.epoch, version))
        blob = _HEADER.pack(index, self.epoch, version) + nonce + ct
        self._io("write", index, blob)
        self.versions[index] = version
        return blob

    def read(self, index: int) -> bytes:
        blob = self._io("read", index)
        if blob == EMPTY:
            if index in self.versions:
                raise ReplayError(f"block {index} missing (rolled back)")
            return EMPTY
        if len(blob) < _HEADER.size + 12 + 16:
            raise TamperError("short block")
        b_index, b_epoch, b_version = _HEADER.unpack_from(blob, 0)
        if b_index != index:
            raise TamperError(f"block index binding violated ({b_index} served for {index})")
        if b_epoch < self.epoch:
            raise ReplayError(f"block from stale epoch {b_epoch} (current {self.epoch})")
        if b_epoch != self.epoch or b_version != self.versions.get(index, 0):
            raise ReplayError(f"block {index} version {b_version} is not the latest")
        nonce = blob[_HEADER.size : _HEADER.size + 12]
        plain = aead_decrypt(self._key, nonce, blob[_HEADER.size + 12 :], self._aad(index, b_epoch, b_version))
        (n,) = struct.unpack_from(">H", plain, 0)
        return plain[2 : 2 + n]

    def new_epoch(self, epoch: int) -> None:
        """After a transfer: earlier blocks must no longer be accepted."""
        if epoch <= self.epoch:
            raise ValueError("epoch must increase")
        self.epoch = epoch
        self.versions = {}
