import random
import shutil

import pytest

from datacapsule.base_layer import CRASH_POINTS, Identity, Machine, Response, SimulatedCrash, create_capsule
from datacapsule.errors import CapsuleError, DataLayerError, PolicyError, ReplayError, RequestRejected, UnknownOperation
from datacapsule.host_hub import Faults
from datacapsule.policy import parse_assertion

from support import CARD, MERCHANT, limit_of, payment_world


def test_empty_policy_denies_everything():
    alice, bob = Identity.generate("ALICE"), Identity.generate("BOB")
    c = create_capsule(alice, "", "dummy", b"secret", {"BOB": bob.public})
    for op in ("Echo", "Fetch"):
        r = Response.from_frame(c.machine.invoke(c.id, bob.request(c.id, op, [b"x"])))
        assert r.status == "denied"


def test_unknown_kind():
    with pytest.raises(DataLayerError, match="unknown data layer kind"):
        create_capsule(Identity.generate("ALICE"), "", "spreadsheet")


def test_foreign_unsigned_assertion_refused():
    with pytest.raises(PolicyError):
        create_capsule(Identity.generate("ALICE"), 'BOB says CanInvoke("Echo", BOB, 0)\n')


def test_charge_granted_and_recorded():
    w = payment_world()
    r = w.charge(60)
    assert r.ok and isinstance(r.result, str) and len(r.result) == 16
    assert w.gateway.accounts[CARD].log == [(60, MERCHANT, r.result)]
    assert limit_of(w.capsule, "Charge") == 40


def test_budget_denies_second_charge():
    w = payment_world(limit=100)
    assert w.charge(60).ok
    second = w.charge(60)
    assert second.status == "denied"
    assert w.gateway.accounts[CARD].charged == 60
    assert w.charge(39).ok
    assert w.charge(1).status == "denied"


def test_unsigned_and_tampered_requests_rejected():
    w = payment_world()
    stranger = Identity("AMAZON", Identity.generate("X").key)
    r = Response.from_frame(w.machine.invoke(w.capsule.id, stranger.request(w.capsule.id, "Charge", [10, MERCHANT])))
    assert r.status == "rejected"
    with pytest.raises(RequestRejected):
        r.unwrap()
    frame = bytearray(w.amazon.request(w.capsule.id, "Charge", [10, MERCHANT]))
    frame[-3] ^= 1
    assert Response.from_frame(w.machine.invoke(w.capsule.id, bytes(frame))).status == "rejected"
    assert w.gateway.accounts[CARD].charged == 0


def test_replayed_request_rejected():
    w = payment_world()
    frame = w.amazon.request(w.capsule.id, "Charge", [10, MERCHANT])
    assert Response.from_frame(w.machine.invoke(w.capsule.id, frame)).ok
    r = Response.from_frame(w.machine.invoke(w.capsule.id, frame))
    assert (r.status, r.reason) == ("rejected", "replayed nonce")


def test_unknown_op_is_not_a_denial():
    w = payment_world()
    r = Response.from_frame(w.machine.invoke(w.capsule.id, w.amazon.request(w.capsule.id, "Refund", [10])))
    assert (r.status, r.kind) == ("error", "unknown_op")
    with pytest.raises(UnknownOperation):
        r.unwrap()


def test_owner_only_audit_log():
    w = payment_world()
    r = Response.from_frame(w.machine.invoke(w.capsule.id, w.amazon.request(w.capsule.id, "AuditLog")))
    assert (r.status, r.reason) == ("denied", "owner_only")


def test_data_layer_error_rolls_back_budget():
    w = payment_world()
    r = w.charge(10, merchant="bad merchant!")
    assert (r.status, r.kind) == ("error", "data_layer")
    assert limit_of(w.capsule, "Charge") == 100


def test_audit_matches_gateway():
    w = payment_world(limit=500)
    rng = random.Random(4)
    granted = []
    for _ in range(30):
        amount = rng.randint(1, 60)
        r = w.charge(amount)
        if r.ok:
            granted.append(amount)
    r = Response.from_frame(w.machine.invoke(w.capsule.id, w.alice.request(w.capsule.id, "AuditLog")))
    log = r.unwrap()
    charges = [e for e in log if e["op"] == "Charge"]
    assert len(charges) == len(granted) == len(w.gateway.accounts[CARD].log)
    assert all(e["invoker"] == "AMAZON" and e["basis"] == "granted" and e["proof"] for e in charges)
    counters = [e["counter"] for e in log]
    assert counters == sorted(set(counters))
    assert sum(granted) == w.gateway.accounts[CARD].charged <= 500


@pytest.mark.parametrize("seed", range(4))
def test_confinement_under_faults(seed):
    faults = Faults(drop=0.05, corrupt=0.1, duplicate=0.1, reorder=0.1, seed=seed)
    w = payment_world(limit=10_000, faults=faults, seed=seed)
    rng = random.Random(seed)
    for _ in range(25):
        w.charge(rng.randint(-5, 400), merchant=rng.choice([MERCHANT, "shop-2", MERCHANT]))
    assert w.machine.tap.outbound()
    assert w.machine.tap.find_leaks(CARD.encode()) == []
    # Ledger and budget stay consistent whatever the hub did.
    assert w.gateway.accounts[CARD].charged + limit_of(w.capsule, "Charge") <= 10_000


@pytest.mark.parametrize("point", CRASH_POINTS)
def test_crash_recovery(tmp_path, point):
    w = payment_world(state_dir=tmp_path, limit=100)
    assert w.charge(30).ok
    w.capsule.crash_at = {point}
    with pytest.raises(SimulatedCrash):
        w.charge(20)
    with pytest.raises(CapsuleError):
        w.charge(1)

    restarted = Machine("MU", w.ca, hub=w.hub, state_dir=tmp_path)
    capsule = restarted.reboot()[w.capsule.id]
    remaining = limit_of(capsule, "Charge")
    charged = w.gateway.accounts[CARD].charged
    assert remaining in (70, 50)
    if point == "after_intent":
        assert remaining == 70 and charged == 30
    else:
        assert remaining == 50
    # Never more charged than was taken from the budget.
    assert charged + remaining <= 100
    r = w.charge(remaining - 1, capsule=capsule, machine=restarted)
    assert r.ok
    assert w.charge(1, capsule=capsule, machine=restarted).status == "denied"


def test_rollback_detected(tmp_path):
    w = payment_world(state_dir=tmp_path, limit=100)
    assert w.charge(10).ok
    saved = tmp_path / "saved"
    saved.mkdir()
    for f in tmp_path.glob(f"{w.capsule.slot}.state"):
        shutil.copy(f, saved / f.name)
    assert w.charge(80).ok
    for f in saved.iterdir():
        shutil.copy(f, tmp_path / f.name)
    with pytest.raises(ReplayError):
        Machine("MU", w.ca, hub=w.hub, state_dir=tmp_path).reboot()


def test_reboot_keeps_state(tmp_path):
    w = payment_world(state_dir=tmp_path, limit=100)
    frame = w.amazon.request(w.capsule.id, "Charge", [25, MERCHANT])
    assert Response.from_frame(w.machine.invoke(w.capsule.id, frame)).ok
    m = Machine("MU", w.ca, hub=w.hub, state_dir=tmp_path)
    c = m.reboot()[w.capsule.id]
    assert limit_of(c, "Charge") == 75 and len(c.audit) == 1
    # The nonce window survives a restart.
    assert Response.from_frame(m.invoke(c.id, frame)).reason == "replayed nonce"


def test_storage_tampering_detected(tmp_path):
    w = payment_world(state_dir=tmp_path)
    path = tmp_path / f"{w.capsule.slot}.state"
    blob = bytearray(path.read_bytes())
    blob[40] ^= 1
    path.write_bytes(bytes(blob))
    with pytest.raises(CapsuleError):
        Machine("MU", w.ca, hub=w.hub, state_dir=tmp_path).reboot()


def test_supporting_assertion_delegation():
    policy = 'ALICE says BANK can say CanInvoke("Charge", p?S, n?A)\n'
    bank = Identity.generate("BANK")
    w = payment_world(policy=policy, extra_known={"BANK": bank.public})
    grant = bank.sign(parse_assertion('BANK says CanInvoke("Charge", AMAZON, 5)'))
    req = w.amazon.request(w.capsule.id, "Charge", [5, MERCHANT], [grant])
    assert Response.from_frame(w.machine.invoke(w.capsule.id, req)).ok
    req = w.amazon.request(w.capsule.id, "Charge", [6, MERCHANT], [grant])
    assert Response.from_frame(w.machine.invoke(w.capsule.id, req)).status == "denied"


def test_rollback_after_audited_calls():
    w = payment_world()
    assert w.charge(10).ok
    assert w.charge(10, merchant="bad merchant!").status == "error"
    assert w.charge(10).ok
    log = Response.from_frame(w.machine.invoke(w.capsule.id, w.alice.request(w.capsule.id, "AuditLog"))).unwrap()
    assert [e["op"] for e in log] == ["Charge", "Charge"]
