"""Worlds shared by the capsule-level tests."""

from __future__ import annotations

from dataclasses import dataclass

from datacapsule.base_layer import Identity, Machine, Response
from datacapsule.data_layers import PaymentSecret
from datacapsule.host_hub import DEFAULT_ADDRESS, Faults, HostHub, PaymentGateway, SimNetwork, TimeAuthority
from datacapsule.policy import parse_assertion
from datacapsule.trust_module import CertificationAuthority

from test_policy_parser import ALICE_HOSTING

CARD = "4556737586899855"
MERCHANT = "shop-1"

BUDGET_POLICY = 'ALICE says CanInvoke("Charge", AMAZON, n?A) where n?A < n?Limit state (n?Limit={limit}, update(n?Limit, n?Limit - n?A))\n'


@dataclass
class PaymentWorld:
    ca: CertificationAuthority
    network: SimNetwork
    gateway: PaymentGateway
    hub: HostHub
    machine: Machine
    alice: Identity
    amazon: Identity
    capsule: object

    def charge(self, amount, merchant=MERCHANT, who=None, capsule=None, machine=None):
        who = who or self.amazon
        capsule = capsule or self.capsule
        machine = machine or self.machine
        return Response.from_frame(machine.invoke(capsule.id, who.request(capsule.id, "Charge", [amount, merchant])))


def gateway_hub(seed=1, balance=10**6, faults=None):
    """A hub whose network reaches a gateway certified by a fresh CA."""
    ca = CertificationAuthority("CA")
    net = SimNetwork()
    gw = PaymentGateway(merchants=[MERCHANT], seed=seed)
    gw.install_certificate(ca.key)
    gw.open_account(CARD, balance)
    net.register(DEFAULT_ADDRESS, gw)
    return ca, gw, HostHub(net, TimeAuthority(), faults or Faults())


def payment_world(state_dir=None, policy=None, limit=100, faults=None, seed=1, balance=10**6, extra_known=None):
    ca, gw, hub = gateway_hub(seed, balance, faults)
    net = hub.network
    machine = Machine("MU", ca, hub=hub, seed=seed, state_dir=state_dir)
    alice, amazon = Identity.generate("ALICE"), Identity.generate("AMAZON")
    known = {"AMAZON": amazon.public, **(extra_known or {})}
    text = policy if policy is not None else BUDGET_POLICY.format(limit=limit)
    capsule = machine.create_capsule(alice, text, "payment", PaymentSecret(CARD, ca_public=ca.public.der), known)
    return PaymentWorld(ca, net, gw, hub, machine, alice, amazon, capsule)


@dataclass
class HostingWorld:
    ca: CertificationAuthority
    source: Machine
    target: Machine
    alice: Identity
    amazon: Identity
    ca_principal: Identity
    capsule: object
    supporting: tuple


def hosting_world(limit=100, kind="dummy", initial=b"alice-private-data", tmp=None, seed=11, op="Fetch", hub=None, pin=None):
    ca = CertificationAuthority("CA")
    alice, amazon, cap = Identity.generate("ALICE"), Identity.generate("AMAZON"), Identity.generate("CA")
    src = Machine("MU", ca, seed=seed, hub=hub, state_dir=None if tmp is None else tmp / "MU")
    dst = Machine("M1", ca, seed=seed + 1, hub=hub, state_dir=None if tmp is None else tmp / "M1")
    policy = ALICE_HOSTING + (
        f'ALICE says CanInvoke("{op}", AMAZON, n?A) where n?A < n?Limit '
        f"state (n?Limit={limit}, update(n?Limit, n?Limit - n?A))\n"
    )
    if kind == "payment" and initial is None:
        initial = PaymentSecret(CARD, ca_public=pin or ca.public.der)
    c = src.create_capsule(alice, policy, kind, initial, {"AMAZON": amazon.public, "CA": cap.public})
    supporting = (
        amazon.sign(parse_assertion("AMAZON says OwnsMachine(AMAZON, M1)")),
        cap.sign(parse_assertion("CA says HasTPM(M1)")),
    )
    return HostingWorld(ca, src, dst, alice, amazon, cap, c, supporting)


def limit_of(capsule, op="Fetch") -> int:
    for a in capsule.policy_db:
        if a.state is not None and op in str(a):
            return a.state.value("Limit")
    raise LookupError(op)


def flip(data: bytes, bit: int) -> bytes:
    buf = bytearray(data)
    buf[bit // 8] ^= 1 << (bit % 8)
    return bytes(buf)


class _Hold(Exception):
    pass


def tamper_aborts(step: int, bits=None, seed=11) -> tuple[int, int]:
    """Flip each listed bit of one hosting message; returns (aborted, tried).

    An abort counts only if it is a framework error raised before the data
    is exposed: for Steps 1 and 2 the sealed capsule is never sent, for
    Step 3 the destination instantiates nothing.
    """
    from datacapsule.base_layer import HostingRequest, host_transfer
    from datacapsule.errors import CapsuleError

    w = hosting_world(seed=seed)
    req = HostingRequest("M1", "AMAZON", w.supporting)
    captured = {}

    def hold(s, data):
        captured[s] = data
        if s == step:
            raise _Hold
        return data

    try:
        host_transfer(w.capsule, req, w.target, tamper=hold)
    except _Hold:
        pass
    original = captured[step]
    bits = range(len(original) * 8) if bits is None else bits
    aborted = tried = 0
    installed = len(w.target.capsules)

    for bit in bits:
        tried += 1
        mutated = flip(original, bit)
        if step == 3:
            try:
                w.target.install_complete(mutated)
            except CapsuleError:
                aborted += len(w.target.capsules) == installed
            continue
        reached = []

        def relay(s, data):
            reached.append(s)
            return mutated if s == step else data

        try:
            host_transfer(w.capsule, req, w.target, tamper=relay)
        except CapsuleError:
            aborted += 3 not in reached and len(w.target.capsules) == installed
    if step == 3:
        # The untouched message still installs: the rejections were not a dead session.
        w.target.install_complete(original)
        assert len(w.target.capsules) == installed + 1
    return aborted, tried


# -- stock reference interpreter -----------------------------------------------------
#
# Written against the predicate grammar only, with its own tree type (lists),
# so it shares no code with the capsule's parser or evaluator.

STOCK_VARS = ("LP", "MA", "POS", "POSAV")


def random_value(rng, depth=0):
    roll = rng.random()
    if depth < 2 and roll < 0.25:
        return [rng.choice("+-"), random_value(rng, depth + 1), random_value(rng, depth + 1)]
    if roll < 0.7:
        return rng.choice(STOCK_VARS)
    return str(rng.randint(0, 30))


def random_predicate(rng, depth=0):
    roll = rng.random()
    if depth < 3 and roll < 0.35:
        return [rng.choice(("and", "or")), *[random_predicate(rng, depth + 1) for _ in range(rng.randint(1, 3))]]
    if depth < 3 and roll < 0.45:
        return ["not", random_predicate(rng, depth + 1)]
    return [rng.choice(("<", "<=", ">", ">=", "=")), random_value(rng), random_value(rng)]


def to_text(tree) -> str:
    return tree if isinstance(tree, str) else "(" + " ".join(to_text(t) for t in tree) + ")"


def _ref_value(v, env):
    from fractions import Fraction

    if isinstance(v, list):
        a, b = _ref_value(v[1], env), _ref_value(v[2], env)
        if a is None or b is None:
            return None
        return a + b if v[0] == "+" else a - b
    return env[v] if v in STOCK_VARS else Fraction(v)


def ref_holds(tree, env) -> bool:
    op = tree[0]
    if op == "and":
        return all(ref_holds(t, env) for t in tree[1:])
    if op == "or":
        return any(ref_holds(t, env) for t in tree[1:])
    if op == "not":
        return not ref_holds(tree[1], env)
    a, b = _ref_value(tree[1], env), _ref_value(tree[2], env)
    if a is None or b is None:
        return False
    return {"<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b, "=": a == b}[op]


def ref_orders(entry, exit_, quantity, window, symbols, ticks):
    """[(action, symbol, qty, price)] for the non-NONE ticks."""
    from fractions import Fraction

    book, out = {}, []
    for symbol, price in ticks:
        if symbol not in symbols:
            continue
        price = Fraction(price)
        pos, posav, hist = book.get(symbol, (0, None, []))
        hist = (hist + [price])[-window:]
        env = {"LP": price, "MA": sum(hist) / len(hist), "POS": Fraction(pos), "POSAV": posav}
        if pos > 0:
            if ref_holds(exit_, env):
                out.append(("SELL", symbol, pos, price))
                pos, posav = 0, None
        elif ref_holds(entry, env):
            out.append(("BUY", symbol, quantity, price))
            pos, posav = quantity, price
        book[symbol] = (pos, posav, hist)
    return out
