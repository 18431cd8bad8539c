import os

import pytest

from datacapsule.crypto import KeyPair
from datacapsule.errors import (
    ConnectionRefused,
    HubError,
    HubTimeout,
    ReplayError,
    SecureChannelError,
    TamperError,
    TimeVerificationError,
)
from datacapsule.host_hub import (
    DEFAULT_ADDRESS,
    DEFAULT_NAME,
    EchoService,
    Faults,
    FixedClock,
    HostHub,
    PaymentGateway,
    SecureBlocks,
    SimNetwork,
    TimeAuthority,
    TimeVerifier,
    http_body,
)
from datacapsule.host_hub.secure_channel import ClientChannel


class HubTransport:
    def __init__(self, hub, address=DEFAULT_ADDRESS):
        self.hub = hub
        self.fd = hub.hub_socket("connect", address=address)

    def send(self, data):
        self.hub.hub_socket("send", fd=self.fd, data=data)

    def recv(self):
        return self.hub.hub_socket("recv", fd=self.fd)


def _post(amount, merchant="m1", card="c1"):
    body = f"amount={amount}&merchant={merchant}&card={card}".encode()
    return b"POST /charge HTTP/1.1\r\nHost: gateway.sim\r\nContent-Length: %d\r\n\r\n" % len(body) + body


@pytest.fixture
def gateway_world():
    ca = KeyPair.generate("ed25519")
    gw = PaymentGateway(merchants=["m1"], seed=3)
    gw.install_certificate(ca)
    gw.open_account("c1", 1000)
    net = SimNetwork()
    net.register(DEFAULT_ADDRESS, gw)
    return ca, gw, net


def _client(hub, ca, name=DEFAULT_NAME):
    ch = ClientChannel(HubTransport(hub), name, ca.public, os.urandom)
    ch.handshake()
    return ch


# -- socket relay -------------------------------------------------------------------


def test_echo_and_byte_counters():
    net = SimNetwork()
    net.register("echo:7", EchoService())
    hub = HostHub(net)
    fd = hub.hub_socket("connect", address="echo:7")
    assert hub.hub_socket("send", fd=fd, data=b"hello") == 5
    assert hub.hub_socket("send", fd=fd, data=b"world!") == 6
    assert hub.hub_socket("recv", fd=fd) == b"hello"
    assert hub.hub_socket("recv", fd=fd) == b"world!"
    assert (hub.bytes_out, hub.bytes_in) == (11, 11)
    assert (hub.channels[fd].bytes_out, hub.channels[fd].bytes_in) == (11, 11)
    with pytest.raises(HubTimeout):
        hub.hub_socket("recv", fd=fd)
    hub.hub_socket("close", fd=fd)
    with pytest.raises(HubError):
        hub.hub_socket("send", fd=fd, data=b"x")


def test_unknown_address_and_op():
    hub = HostHub(SimNetwork())
    with pytest.raises(ConnectionRefused):
        hub.hub_socket("connect", address="nowhere:1")
    with pytest.raises(HubError):
        hub.hub_socket("bogus", fd=99)


def test_fault_parsing():
    f = Faults.parse("drop:0.1,corrupt:0.2,delay:20")
    assert (f.drop, f.corrupt, f.delay_ms) == (0.1, 0.2, 20.0)
    assert Faults.parse(None) == Faults()
    with pytest.raises(ValueError):
        Faults.parse("explode:1")


def test_drop_all():
    net = SimNetwork()
    net.register("echo:7", EchoService())
    hub = HostHub(net, faults=Faults(drop=1.0))
    fd = hub.hub_socket("connect", address="echo:7")
    hub.hub_socket("send", fd=fd, data=b"abc")
    with pytest.raises(HubTimeout):
        hub.hub_socket("recv", fd=fd)


# -- secure channel -----------------------------------------------------------------


def test_charge_through_channel(gateway_world):
    ca, gw, net = gateway_world
    ch = _client(HostHub(net), ca)
    ch.send(_post(50))
    status, body = http_body(ch.recv())
    assert status == 200 and body.startswith("conf_code=")
    assert gw.accounts["c1"].balance == 950


@pytest.mark.parametrize("seed", range(8))
def test_corrupting_hub_breaks_channel(gateway_world, seed):
    ca, gw, net = gateway_world
    hub = HostHub(net, faults=Faults(corrupt=1.0, seed=seed))
    with pytest.raises((SecureChannelError, TamperError, HubTimeout)):
        ch = _client(hub, ca)
        ch.send(_post(50))
        ch.recv()
    assert gw.accounts["c1"].balance == 1000


def test_pinning_rejects_other_name(gateway_world):
    ca, _, net = gateway_world
    with pytest.raises(SecureChannelError, match="pinned"):
        _client(HostHub(net), ca, name="other.sim")


def test_pinning_rejects_other_ca(gateway_world):
    _, _, net = gateway_world
    with pytest.raises(SecureChannelError, match="CA"):
        _client(HostHub(net), KeyPair.generate("ed25519"))


def test_redirect_to_impostor(gateway_world):
    ca, _, net = gateway_world
    evil = PaymentGateway(name=DEFAULT_NAME)
    evil.install_certificate(KeyPair.generate("ed25519"))
    net.register("evil:443", evil)
    net.redirect(DEFAULT_ADDRESS, "evil:443")
    with pytest.raises(SecureChannelError):
        _client(HostHub(net), ca)


# -- gateway semantics --------------------------------------------------------------


def test_gateway_rules(gateway_world):
    _, gw, _ = gateway_world
    assert http_body(gw.gateway_charge(_post(0)))[1] == "error=invalid_amount"
    assert http_body(gw.gateway_charge(_post(-5)))[1] == "error=invalid_amount"
    assert http_body(gw.gateway_charge(_post(10, merchant="zz")))[1] == "error=unknown_merchant"
    assert http_body(gw.gateway_charge(_post(10, card="nope")))[0] == 402
    assert http_body(gw.gateway_charge(b"GET / HTTP/1.0\r\n\r\n"))[0] == 400
    codes = set()
    for _ in range(20):
        status, body = http_body(gw.gateway_charge(_post(50)))
        assert status == 200
        codes.add(body)
    assert len(codes) == 20
    assert http_body(gw.gateway_charge(_post(50)))[1] == "error=insufficient_funds"
    acct = gw.accounts["c1"]
    assert (acct.balance, acct.charged, len(acct.log)) == (0, 1000, 20)


# -- time ---------------------------------------------------------------------------


def test_time_honest_unsigned_replay():
    clock = FixedClock(1_000_000)
    hub = HostHub(time_authority=TimeAuthority(clock=clock))
    v = TimeVerifier(hub.time_authority.public)
    assert v.verify(hub.hub_time(b"n1"), b"n1") == 1_000_000

    hub.time_mode = "unsigned"
    with pytest.raises(TimeVerificationError, match="unsigned"):
        v.verify(hub.hub_time(b"n2"), b"n2")

    hub.time_mode = "replay"
    clock.advance(10)
    with pytest.raises(TimeVerificationError, match="nonce"):
        v.verify(hub.hub_time(b"n3"), b"n3")


def test_time_wrong_authority_and_rollback():
    clock = FixedClock(5_000)
    ta = TimeAuthority(clock=clock)
    with pytest.raises(TimeVerificationError, match="signature"):
        TimeVerifier(TimeAuthority().public).verify(ta.now(b"n"), b"n")
    v = TimeVerifier(ta.public, skew=60)
    v.verify(ta.now(b"a"), b"a")
    clock.t = 5_000 - 61
    with pytest.raises(TimeVerificationError, match="skew"):
        v.verify(ta.now(b"b"), b"b")
    clock.t = 5_000 - 30
    assert v.verify(ta.now(b"c"), b"c") == 4_970


def test_no_time_authority():
    with pytest.raises(HubError):
        HostHub().hub_time(b"n")


# -- blocks -------------------------------------------------------------------------


def _blocks(hub, owner=b"cap", epoch=1):
    return SecureBlocks(lambda op, i, d=None: hub.hub_block(op, owner, i, d), b"k" * 32, owner, epoch, os.urandom)


def test_block_round_trip():
    hub = HostHub()
    b = _blocks(hub)
    b.write(0, b"zero")
    b.write(1, b"one")
    assert (b.read(0), b.read(1), b.read(2)) == (b"zero", b"one", b"")
    raw = hub.blocks.blocks[(b"cap", 0)]
    assert b"zero" not in raw


def test_block_swap_is_tamper():
    hub = HostHub()
    b = _blocks(hub)
    b.write(0, b"zero")
    b.write(1, b"one")
    store = hub.blocks.blocks
    store[(b"cap", 0)], store[(b"cap", 1)] = store[(b"cap", 1)], store[(b"cap", 0)]
    with pytest.raises(TamperError):
        b.read(0)


def test_block_bit_flip_is_tamper():
    hub = HostHub()
    b = _blocks(hub)
    b.write(0, b"zero")
    raw = bytearray(hub.blocks.blocks[(b"cap", 0)])
    raw[-1] ^= 1
    hub.blocks.blocks[(b"cap", 0)] = bytes(raw)
    with pytest.raises(TamperError):
        b.read(0)


def test_block_stale_version_and_epoch():
    hub = HostHub()
    b = _blocks(hub)
    old = b.write(0, b"v1")
    b.write(0, b"v2")
    hub.blocks.write(b"cap", 0, old)
    with pytest.raises(ReplayError):
        b.read(0)

    b.write(0, b"v3")
    before = hub.blocks.read(b"cap", 0)
    b.new_epoch(2)
    hub.blocks.write(b"cap", 0, before)
    with pytest.raises(ReplayError, match="stale epoch"):
        b.read(0)
    with pytest.raises(ValueError):
        b.new_epoch(2)


def test_block_deleted_is_replay():
    hub = HostHub()
    b = _blocks(hub)
    b.write(3, b"x")
    del hub.blocks.blocks[(b"cap", 3)]
    with pytest.raises(ReplayError):
        b.read(3)
