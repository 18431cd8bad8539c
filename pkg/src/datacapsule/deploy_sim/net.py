"""Wide-area network model: TCP segments, slow start, header accounting.

Only what moves latency and byte counts at the scale of the benchmarks is
modelled: a three-way handshake, slow start from ``initcwnd`` segments with
one delayed ACK per two segments, link serialisation, and a FIN exchange.
There is no loss and no congestion; the round-trip is fixed, as with a
DummyNet delay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

from .events import EventLoop

MSS = 1448
HEADER_BYTES = 52  # IPv4 + TCP with timestamps
INITCWND = 3
HANDSHAKE_PACKETS = 3
TEARDOWN_PACKETS = 4


@dataclass(frozen=True)
class LinkModel:
    rtt_us: float
    bandwidth_bps: float = 100e6
    mss: int = MSS
    header: int = HEADER_BYTES
    initcwnd: int = INITCWND

    def __post_init__(self):
        if self.rtt_us < 0:
            raise ValueError("round-trip time must be non-negative")

    def segments(self, nbytes: int) -> int:
        return math.ceil(nbytes / self.mss) if nbytes > 0 else 0

    def tx_us(self, nbytes: int) -> float:
        return nbytes * 8 / self.bandwidth_bps * 1e6

    def wire_bytes(self, nbytes: int) -> int:
        """Bytes on the wire for one message: data segments plus their ACKs."""
        n = self.segments(nbytes)
        return nbytes + n * self.header + math.ceil(n / 2) * self.header


@dataclass
class Traffic:
    bytes: int = 0
    packets: int = 0

    def add(self, nbytes: int, packets: int) -> None:
        self.bytes += nbytes
        self.packets += packets


@dataclass
class TcpConnection:
    """One connection between a client and a server over ``link``."""

    loop: EventLoop
    link: LinkModel
    traffic: Traffic = field(default_factory=Traffic)
    established: bool = False
    cwnd: dict = field(default_factory=dict)

    def open(self, then: Callable[[], None]) -> None:
        self.traffic.add(HANDSHAKE_PACKETS * self.link.header, HANDSHAKE_PACKETS)
        self.cwnd = {"up": self.link.initcwnd, "down": self.link.initcwnd}

        def ready():
            self.established = True
            then()

        # The client's ACK carries the first data, so one round-trip.
        self.loop.after(self.link.rtt_us, ready)

    def send(self, direction: str, nbytes: int, delivered: Callable[[], None]) -> None:
        if not self.established:
            raise RuntimeError("send on a connection that is not open")
        link = self.link
        total = link.segments(nbytes)
        self.traffic.add(link.wire_bytes(nbytes), total + math.ceil(total / 2))
        size = [link.mss] * total
        if total:
            size[-1] = nbytes - link.mss * (total - 1)

        def flight(start: int):
            n = min(self.cwnd[direction], total - start)
            chunk = sum(size[start : start + n])
            arrival = link.rtt_us / 2 + link.tx_us(chunk)
            if start + n >= total:
                self.cwnd[direction] += n
                self.loop.after(arrival, delivered)
            else:
                # Slow start: the window grows by one segment per ACKed segment.
                self.cwnd[direction] += n
                self.loop.after(max(link.rtt_us, link.tx_us(chunk)), lambda: flight(start + n))

        if total == 0:
            self.loop.after(0, delivered)
        else:
            flight(0)

    def close(self) -> None:
        self.traffic.add(TEARDOWN_PACKETS * self.link.header, TEARDOWN_PACKETS)
        self.established = False


def exchange_us(link: LinkModel, request: int, response: int, processing_us: float, *, fresh: bool = True) -> float:
    """Closed form for one request/response on an idle link (used as a check)."""

    def one_way(nbytes: int) -> float:
        total, cwnd, sent, t = link.segments(nbytes), link.initcwnd, 0, 0.0
        if total == 0:
            return 0.0
        while True:
            n = min(cwnd, total - sent)
            chunk = min(n * link.mss, nbytes - sent * link.mss)
            if sent + n >= total:
                return t + link.rtt_us / 2 + link.tx_us(chunk)
            t += max(link.rtt_us, link.tx_us(chunk))
            sent += n
            cwnd += n

    return (link.rtt_us if fresh else 0.0) + one_way(request) + processing_us + one_way(response)
