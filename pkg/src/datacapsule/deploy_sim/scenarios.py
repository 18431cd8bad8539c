"""The three deployments: base (plain server-side database), ttp (capsule on
a remote host reached over the wide area) and colocated (capsule on the
service's machine behind an isolation boundary).

Every benchmark drives real capsules to obtain the exact framed messages
and, in ``measured`` mode, real compute time.  Latency itself is virtual:
the event loop advances simulated time for network flights and processing.
In ``model`` mode compute costs come from :class:`CostModel`, which makes
runs bit-identical for a fixed seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from ..base_layer import Identity, Machine, Response
from ..data_layers.dummy import DummyLayer
from ..data_layers.base import InvocationContext
from ..transformations import CrowdMembership
from .events import EventLoop
from .metrics import Metrics
from .net import LinkModel, TcpConnection, Traffic

MODES = ("base", "ttp", "colocated")
DEFAULT_SIZES = tuple(256 << i for i in range(8))  # 256 B .. 32 KB
RPC_HEADER_BYTES = 128  # RPC/HTTP framing added to each message on the wire


@dataclass(frozen=True)
class CostModel:
    """Compute costs in microseconds for ``model`` mode.

    The split follows the component measurements reported for a 1 KB
    invocation: about 100 us in the hub, 165 us verifying the signature and
    110 us checking policy.
    """

    service_us: float = 170.0  # service <-> data process hand-off
    data_fixed_us: float = 120.0
    data_per_kb_us: float = 90.0
    policy_us: float = 275.0  # signature check plus resolution
    hub_us: float = 100.0
    jitter: float = 0.08  # lognormal sigma on processing components
    sched_probability: float = 0.2  # chance the capsule compartment is descheduled
    sched_mean_us: float = 1500.0

    def data_layer_us(self, request: int, response: int) -> float:
        return self.data_fixed_us + self.data_per_kb_us * (request + response) / 1024


@dataclass(frozen=True)
class ScenarioConfig:
    mode: str = "colocated"
    rtt_ms: float = 10.0
    payload_req: int = 1024
    payload_resp: int = 1024
    kind: str = "dummy"
    repetitions: int = 100
    boundary_overhead_us: float = 800.0
    seed: int = 0
    compute: str = "model"  # model | measured
    keepalive: bool | None = None  # None: the benchmark's own default
    bandwidth_mbps: float = 100.0
    cost: CostModel = field(default_factory=CostModel)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, not {self.mode!r}")
        if self.rtt_ms < 0:
            raise ValueError("rtt_ms must be non-negative")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if self.compute not in ("model", "measured"):
            raise ValueError("compute must be 'model' or 'measured'")
        if self.payload_req < 0 or self.payload_resp < 0:
            raise ValueError("payload sizes must be non-negative")

    @property
    def link(self) -> LinkModel:
        return LinkModel(self.rtt_ms * 1000.0, self.bandwidth_mbps * 1e6)


# -- traces of real invocations ------------------------------------------------------


@dataclass(frozen=True)
class Step:
    """One invocation as executed: wire sizes and measured compute."""

    request: int
    response: int
    policy_s: float = 0.0
    data_layer_s: float = 0.0
    base_s: float = 0.0  # the same data-layer call with no capsule around it


def _policy_for(owner: str, service: str, ops) -> str:
    return "".join(f'{owner} says CanInvoke("{op}", {service}, n?A)\n' for op in ops)


def _run(machine, capsule, service: Identity, op: str, args, base_call=None) -> tuple[Step, bytes]:
    req = service.request(capsule.id, op, list(args))
    resp = machine.invoke(capsule.id, req)
    t = capsule.last_timing
    base_s = 0.0
    if base_call is not None:
        t0 = time.perf_counter()
        base_call()
        base_s = time.perf_counter() - t0
    return Step(len(req), len(resp), t.get("policy", 0.0), t.get("data_layer", 0.0), base_s), resp


def dummy_trace(cfg: ScenarioConfig, n: int) -> list[Step]:
    machine = Machine("SVC-HOST", seed=cfg.seed)
    owner, service = Identity.generate("USER"), Identity.generate("SVC")
    initial = {"data": bytes(1024), "response_size": cfg.payload_resp}
    capsule = machine.create_capsule(owner, _policy_for("USER", "SVC", ["Fetch"]), "dummy", initial, {"SVC": service.public})
    plain = DummyLayer(bytes(1024), cfg.payload_resp)
    ctx = InvocationContext("SVC", "USER", b"")
    payload = bytes(cfg.payload_req)
    return [
        _run(machine, capsule, service, "Fetch", [payload], lambda: plain.call("Fetch", [payload], ctx))[0]
        for _ in range(n)
    ]


STOCK_STRATEGY = """\
symbols: ACME
quantity: 10
ma_window: 20
entry: (and (= POS 0) (> LP MA))
exit: (or (and (> POS 0) (<= LP (- POSAV 1))) (and (> POS 0) (>= LP (+ POSAV 2))))
"""


def ticker_prices(n: int, seed: int) -> list[str]:
    rng = np.random.default_rng(seed)
    steps = rng.choice([-25, -10, 0, 10, 25], size=n)  # cents
    cents = np.maximum(100, 10_000 + np.cumsum(steps))
    return [f"{c // 100}.{c % 100:02d}" for c in cents.tolist()]


def stock_trace(cfg: ScenarioConfig, n: int) -> list[Step]:
    machine = Machine("BROKER-HOST", seed=cfg.seed)
    owner, broker = Identity.generate("TRADER"), Identity.generate("BROKER")
    capsule = machine.create_capsule(
        owner, _policy_for("TRADER", "BROKER", ["TickerEvent"]), "stock", STOCK_STRATEGY, {"BROKER": broker.public}
    )
    return [_run(machine, capsule, broker, "TickerEvent", ["ACME", p])[0] for p in ticker_prices(n, cfg.seed)]


# -- the timing model -----------------------------------------------------------------


def _processing(cfg: ScenarioConfig, steps: list[Step], rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Per-step compute components in microseconds (no network)."""
    c = cfg.cost
    n = len(steps)
    if cfg.compute == "model":
        data = np.array([c.data_layer_us(s.request, s.response) for s in steps])
        policy = np.full(n, c.policy_us)
    else:
        data = np.array([(s.base_s if cfg.mode == "base" else s.data_layer_s) * 1e6 for s in steps])
        policy = np.array([s.policy_s * 1e6 for s in steps])
    jit = lambda: rng.lognormal(0.0, c.jitter, n) if c.jitter else np.ones(n)  # noqa: E731
    parts = {"service": c.service_us * jit(), "data_layer": data * jit()}
    if cfg.mode == "base":
        return parts
    parts["policy"] = policy * jit()
    if cfg.mode == "colocated":
        parts["hub"] = c.hub_us * jit()
        sched = rng.random(n) < c.sched_probability
        parts["boundary"] = cfg.boundary_overhead_us * jit() + sched * rng.exponential(c.sched_mean_us, n)
    return parts


def _wire(step: Step) -> tuple[int, int]:
    return step.request + RPC_HEADER_BYTES, step.response + RPC_HEADER_BYTES


def _network(cfg: ScenarioConfig, steps, server_us: np.ndarray, keepalive: bool) -> tuple[np.ndarray, Traffic]:
    """Simulate the steps back to back over the wide area.

    Returns each step's network time (latency minus remote processing) and
    the total traffic.  ``keepalive`` reuses one connection for the batch;
    otherwise each step pays its own handshake.
    """
    loop = EventLoop()
    traffic = Traffic()
    conn: TcpConnection | None = None
    network = np.zeros(len(steps))

    def start(i: int):
        nonlocal conn
        if i == len(steps):
            if conn is not None and conn.established:
                conn.close()
            return
        t0 = loop.now
        request, response = _wire(steps[i])

        def finish():
            network[i] = loop.now - t0 - server_us[i]
            if not keepalive:
                conn.close()
            start(i + 1)

        def respond():
            loop.after(server_us[i], lambda: conn.send("down", response, finish))

        def send():
            conn.send("up", request, respond)

        if conn is None or not conn.established:
            conn = TcpConnection(loop, cfg.link, traffic)
            conn.open(send)
        else:
            send()

    start(0)
    loop.run()
    return network, traffic


def _simulate(cfg: ScenarioConfig, steps: list[Step], rng, keepalive: bool) -> tuple[dict[str, np.ndarray], int]:
    parts = _processing(cfg, steps, rng)
    if cfg.mode != "ttp":
        parts["network"] = np.zeros(len(steps))
        return parts, 0
    server = parts["policy"] + parts["data_layer"]
    parts["network"], traffic = _network(cfg, steps, server, keepalive)
    return parts, traffic.bytes


# -- benchmarks -------------------------------------------------------------------------


def run_invocation_bench(cfg: ScenarioConfig) -> Metrics:
    """Fixed-payload invocations of a dummy capsule, one sample per repetition."""
    if cfg.kind != "dummy":
        raise ValueError("the invocation benchmark uses the dummy data layer")
    steps = dummy_trace(cfg, cfg.repetitions)
    rng = np.random.default_rng(cfg.seed)
    keepalive = bool(cfg.keepalive)
    parts, total_bytes = _simulate(cfg, steps, rng, keepalive)
    m = Metrics.from_components(cfg.mode, f"{cfg.payload_req}/{cfg.payload_resp}", parts)
    m.ops = len(steps)
    m.bytes_per_op = total_bytes / len(steps)
    m.extra = {"request_frame": steps[0].request, "response_frame": steps[0].response}
    return m


def run_payload_sweep(cfg: ScenarioConfig, sizes=DEFAULT_SIZES) -> list[Metrics]:
    if any(s <= 0 for s in sizes):
        raise ValueError("payload sizes must be positive")
    return [run_invocation_bench(replace(cfg, payload_req=s, payload_resp=s)) for s in sizes]


def run_stock_burst(cfg: ScenarioConfig, n_events: int) -> Metrics:
    """``n_events`` back-to-back ticker events; one sample per repetition is
    the latency of the whole burst.

    Over the wide area the burst shares one connection unless
    ``cfg.keepalive`` is False, in which case each event opens its own.
    """
    if n_events < 0:
        raise ValueError("n_events must be non-negative")
    keepalive = True if cfg.keepalive is None else cfg.keepalive
    param = f"{n_events} events"
    if n_events == 0:
        zeros = np.zeros(cfg.repetitions)
        return Metrics.from_components(cfg.mode, param, {"network": zeros}, ops=0)
    steps = stock_trace(cfg, n_events)
    rng = np.random.default_rng(cfg.seed)
    totals: dict[str, list[float]] = {}
    total_bytes = 0
    for _ in range(cfg.repetitions):
        parts, total_bytes = _simulate(cfg, steps, rng, keepalive)
        for k, v in parts.items():
            totals.setdefault(k, []).append(float(np.sum(v)))
    m = Metrics.from_components(cfg.mode, param, {k: np.array(v) for k, v in totals.items()})
    m.ops = n_events
    m.bytes_per_op = float(total_bytes)  # per burst
    return m


# -- aggregation -----------------------------------------------------------------------


def hub_and_spoke(n: int) -> list[tuple[int, int]]:
    """Users 0..n-2 each push their contribution to user n-1."""
    return [(i, n - 1) for i in range(n - 1)]


def chain(n: int) -> list[tuple[int, int]]:
    return [(i, i + 1) for i in range(n - 1)]


def balanced(n: int) -> list[tuple[int, int]]:
    schedule, live = [], list(range(n))
    while len(live) > 1:
        nxt = []
        for a, b in zip(live[0::2], live[1::2]):
            schedule.append((a, b))
            nxt.append(b)
        if len(live) % 2:
            nxt.append(live[-1])
        live = nxt
    return schedule


@dataclass
class AggregationResult:
    n_users: int
    scenario: str
    bytes_total: int
    pulls: int = 0
    pushes: int = 0
    releases: int = 0
    denials: int = 0
    remote_exchanges: int = 0
    released: list = field(default_factory=list)

    @property
    def kilobytes(self) -> float:
        return self.bytes_total / 1000


def synthetic_history(user: int, target_bytes: int, seed: int) -> str:
    rng = np.random.default_rng([seed, user])
    lines, size, i = [], 0, 0
    while size < target_bytes:
        site = f"user{user:03d}-site{i:05d}.example.com"
        line = f"{site}\t{int(rng.integers(1, 40))}\tmusic:1"
        lines.append(line)
        size += len(line) + 1
        i += 1
    return "\n".join(lines)


def _exchange_bytes(link: LinkModel, request: int, response: int) -> int:
    loop = EventLoop()
    conn = TcpConnection(loop, link)
    conn.open(lambda: conn.send("up", request + RPC_HEADER_BYTES, lambda: conn.send("down", response + RPC_HEADER_BYTES, conn.close)))
    loop.run()
    return conn.traffic.bytes


def run_aggregation_bench(
    n_users: int,
    scenario: str,
    *,
    history_bytes: int = 15 * 1024,
    strategy: Callable[[int], list[tuple[int, int]]] = hub_and_spoke,
    a_min: int | None = None,
    probe_release: bool = False,
    rtt_ms: float = 10.0,
    seed: int = 0,
) -> AggregationResult:
    """Bandwidth of pooling ``n_users`` histories into one released aggregate.

    ``strategy(n)`` returns the merge schedule as ``(source, destination)``
    pairs; the last destination releases.  Every push between capsules
    crosses machines.  Pulls are local to the host hub except in ``ttp``,
    where each capsule sits with a different party and the service reaches
    it over the wide area.  With ``probe_release`` the service also asks for
    the aggregate after every merge; early attempts count as denials.
    """
    if scenario not in MODES:
        raise ValueError(f"scenario must be one of {MODES}")
    if n_users < 2:
        raise ValueError("aggregation needs at least two users")
    a_min = n_users if a_min is None else a_min
    key = np.random.default_rng(seed).bytes(32)
    machines = [Machine(f"DC{i:03d}", seed=seed * 1000 + i) for i in range(n_users)]
    service = Identity.generate("SVC")
    capsules = []
    for i, m in enumerate(machines):
        owner = Identity.generate(f"U{i:03d}")
        capsules.append(
            m.create_capsule(
                owner,
                _policy_for(owner.name, "SVC", ["ExportContribution", "Merge"]),
                "ads",
                synthetic_history(i, history_bytes, seed),
                {"SVC": service.public},
                crowd=CrowdMembership(key, a_min),
            )
        )
    link = LinkModel(rtt_ms * 1000.0)
    result = AggregationResult(n_users, scenario, 0)

    def call(i: int, op: str, args=()):
        req = service.request(capsules[i].id, op, list(args))
        resp = machines[i].invoke(capsules[i].id, req)
        return req, resp

    def remote(req: bytes, resp: bytes):
        result.bytes_total += _exchange_bytes(link, len(req), len(resp))
        result.remote_exchanges += 1

    def release(i: int) -> bool:
        req, resp = call(i, "ReleaseAggregate")
        result.releases += 1
        r = Response.from_frame(resp)
        if r.status != "ok":
            result.denials += 1
            return False
        remote(req, resp)  # the aggregate travels to the requester
        result.released = r.result
        return True

    schedule = strategy(n_users)
    for src, dst in schedule:
        req, resp = call(src, "ExportContribution")
        result.pulls += 1
        if scenario == "ttp":
            remote(req, resp)
        blob = Response.from_frame(resp).unwrap()
        req = service.request(capsules[dst].id, "Merge", [blob])
        resp = machines[dst].invoke(capsules[dst].id, req)
        Response.from_frame(resp).unwrap()
        result.pushes += 1
        remote(req, resp)
        if probe_release:
            release(dst)
    if not (probe_release and result.releases > result.denials):
        release(schedule[-1][1])
    return result

