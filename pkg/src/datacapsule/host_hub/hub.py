"""The host hub: availability-only services for capsules on one machine."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from ..errors import HubError, HubTimeout
from .block import BlockStore
from .network import Connection, Faults, SimNetwork, check_open
from .timeauth import SignedTime, TimeAuthority


@dataclass
class HubChannel:
    channel_id: int
    peer: str
    bytes_in: int = 0
    bytes_out: int = 0


class HostHub:
    """Relays marshalled socket calls, fetches time, stores blocks.

    The hub never interprets capsule payloads; an adversarial configuration
    may drop, corrupt, duplicate or reorder relayed chunks.
    """

    def __init__(
        self,
        network: SimNetwork | None = None,
        time_authority: TimeAuthority | None = None,
        faults: Faults | None = None,
        blocks: BlockStore | None = None,
    ):
        self.network = network or SimNetwork()
        self.time_authority = time_authority
        self.faults = faults or Faults()
        self.blocks = blocks or BlockStore()
        self._fds = itertools.count(3)
        self._conns: dict[int, Connection] = {}
        self.channels: dict[int, HubChannel] = {}
        self.bytes_in = 0
        self.bytes_out = 0
        self.delay_ms = 0.0
        # Adversarial knobs for the time service.
        self.time_mode = "honest"  # honest | unsigned | replay
        self._time_cache: SignedTime | None = None

    # -- socket relay --------------------------------------------------------

    def hub_socket(self, op: str, **params):
        if op == "connect":
            address = params["address"]
            session = self.network.open(address)
            fd = next(self._fds)
            self._conns[fd] = Connection(fd, address, session)
            self.channels[fd] = HubChannel(fd, address)
            return fd
        fd = params["fd"]
        conn = check_open(self._conns.get(fd), fd)
        if op == "send":
            data = bytes(params["data"])
            chan = self.channels[fd]
            chan.bytes_out += len(data)
            self.bytes_out += len(data)
            self.delay_ms += self.faults.delay_ms
            for chunk in self.faults.apply([data]):
                reply = conn.session.feed(chunk)
                if reply:
                    conn.inbound.extend(self.faults.apply([reply]))
            return len(data)
        if op == "recv":
            if not conn.inbound:
                raise HubTimeout(f"no data on descriptor {fd}")
            data = conn.inbound.popleft()
            chan = self.channels[fd]
            chan.bytes_in += len(data)
            self.bytes_in += len(data)
            return data
        if op == "close":
            conn.closed = True
            return 0
        raise HubError(f"unknown socket op {op!r}")

    # -- time ---------------------------------------------------------------

    def hub_time(self, nonce: bytes) -> SignedTime:
        if self.time_authority is None:
            raise HubError("no time authority configured")
        if self.time_mode == "unsigned":
            st = self.time_authority.now(nonce)
            return SignedTime(st.time, nonce, None)
        if self.time_mode == "replay" and self._time_cache is not None:
            return self._time_cache
        st = self.time_authority.now(nonce)
        self._time_cache = st
        return st

    # -- blocks -------------------------------------------------------------

    def hub_block(self, op: str, owner: bytes, index: int, data: bytes | None = None):
        if op == "read":
            return self.blocks.read(owner, index)
        if op == "write":
            self.blocks.write(owner, index, data)
            return len(data)
        raise HubError(f"unknown block op {op!r}")
