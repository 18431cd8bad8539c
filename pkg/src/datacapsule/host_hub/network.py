"""In-process simulated network with fault injection on relayed bytes."""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol

from ..errors import ConnectionRefused, HubError


class Service(Protocol):
    def open(self) -> "Session": ...


class Session(Protocol):
    def feed(self, data: bytes) -> bytes:
        """Consume bytes from the client and return bytes to send back."""
        ...


@dataclass
class Faults:
    """Adversarial hub behaviour.  Probabilities apply per relayed chunk."""

    drop: float = 0.0
    corrupt: float = 0.0
    duplicate: float = 0.0
    reorder: float = 0.0
    delay_ms: float = 0.0
    seed: int = 0
    _rng: random.Random = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._rng = random.Random(self.seed)

    @classmethod
    def parse(cls, spec: str | None, seed: int = 0) -> "Faults":
        """Parse ``drop:0.1,corrupt:0.05,delay:20`` style flags."""
        f = cls(seed=seed)
        if not spec:
            return f
        for part in spec.split(","):
            name, _, value = part.partition(":")
            name = name.strip()
            if name == "delay":
                f.delay_ms = float(value)
            elif name in ("drop", "corrupt", "duplicate", "reorder"):
                setattr(f, name, float(value))
            else:
                raise ValueError(f"unknown hub fault {name!r}")
        return f

    @property
    def active(self) -> bool:
        return any((self.drop, self.corrupt, self.duplicate, self.reorder))

    def apply(self, chunks: list[bytes]) -> list[bytes]:
        if not self.active:
            return chunks
        out = []
        for chunk in chunks:
            if self._rng.random() < self.drop:
                continue
            if chunk and self._rng.random() < self.corrupt:
                buf = bytearray(chunk)
                bit = self._rng.randrange(len(buf) * 8)
                buf[bit // 8] ^= 1 << (bit % 8)
                chunk = bytes(buf)
            out.append(chunk)
            if self._rng.random() < self.duplicate:
                out.append(chunk)
        if len(out) > 1 and self._rng.random() < self.reorder:
            i = self._rng.randrange(len(out) - 1)
            out[i], out[i + 1] = out[i + 1], out[i]
        return out


class SimNetwork:
    """Named endpoints reachable by ``host:port`` strings."""

    def __init__(self):
        self._services: dict[str, Service] = {}
        self._redirects: dict[str, str] = {}

    def register(self, address: str, service: Service) -> None:
        self._services[address] = service

    def redirect(self, address: str, to: str) -> None:
        """Adversarial routing: connections to ``address`` reach ``to``."""
        self._redirects[address] = to

    def open(self, address: str) -> Session:
        address = self._redirects.get(address, address)
        service = self._services.get(address)
        if service is None:
            raise ConnectionRefused(f"no service at {address}")
        return service.open()


@dataclass
class Connection:
    fd: int
    address: str
    session: Session
    inbound: deque = field(default_factory=deque)
    bytes_out: int = 0
    bytes_in: int = 0
    closed: bool = False


class FunctionService:
    """Adapts a ``bytes -> bytes`` callable into a one-session service."""

    def __init__(self, handler: Callable[[], Session]):
        self._handler = handler

    def open(self) -> Session:
        return self._handler()


class EchoService:
    class _S:
        def feed(self, data: bytes) -> bytes:
            return data

    def open(self) -> Session:
        return self._S()


def check_open(conn: Connection | None, fd: int) -> Connection:
    if conn is None or conn.closed:
        raise HubError(f"bad descriptor {fd}")
    return conn
