import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datacapsule.crypto import KeyPair
from datacapsule.errors import PolicyTypeError, ResolutionError, SignatureError
from datacapsule.policy import (
    CanSay,
    Keyring,
    Predicate,
    apply_state_updates,
    number,
    parse_policy,
    principal,
    resolve,
    string,
    to_datalog,
)
from datacapsule.policy.datalog import atom_is_ground
from datacapsule.policy.resolver import DELEGATION

from policy_support import domain_of, fixpoint, herbrand_queries, oracle_holds, random_database
from test_policy_parser import ALICE_HOSTING, CCN

SUPPORT = "AMAZON says OwnsMachine(AMAZON, M1)\nCA says HasTPM(M1)"
JAN_2010 = 1263000000  # mid January 2010


def can_host(m):
    return Predicate("CanHost", (principal(m),))


def charge(who, amount):
    return Predicate("CanInvoke", (string("Charge"), principal(who), number(amount)))


# -- translation --------------------------------------------------------------


def test_single_fact_one_ground_clause():
    cs = to_datalog(parse_policy("CA says HasTPM(M1)"))
    assert len(cs) == 1
    (clause,) = cs.clauses
    assert clause.body == () and clause.constraints == ()
    assert atom_is_ground(clause.head)


def test_rule_clause_has_two_body_literals():
    cs = to_datalog(parse_policy(ALICE_HOSTING))
    assert len(cs) == 6
    rule = cs.clauses[0]
    assert [b[4] for b in rule.body] == ["OwnsMachine", "HasTPM"]
    assert rule.constraints == ()


def test_delegation_matches_hand_fixpoint():
    db = parse_policy("ALICE says CA can say HasTPM(p?X)\nCA says HasTPM(M1)")
    facts = fixpoint(db, domain_of(db))
    assert oracle_holds(facts, "ALICE", Predicate("HasTPM", (principal("M1"),)))
    decision = resolve(db, (), Predicate("HasTPM", (principal("M1"),)), speaker="ALICE")
    assert decision.granted
    assert decision.tree.source == DELEGATION


def test_bad_signature_reports_index():
    alice, ca = KeyPair.generate("ed25519"), KeyPair.generate("ed25519")
    ring = Keyring(ALICE=alice.public, CA=ca.public)
    db = parse_policy("ALICE says CA can say HasTPM(p?X)").signed({"ALICE": alice})
    forged = parse_policy("CA says HasTPM(M1)")[0].signed_by(alice)
    with pytest.raises(SignatureError) as info:
        to_datalog(db, [forged], keyring=ring)
    assert info.value.index == 1
    good = parse_policy("CA says HasTPM(M1)")[0].signed_by(ca)
    assert len(to_datalog(db, [good], keyring=ring)) == 2


def test_unsigned_rejected_when_keyring_given():
    db = parse_policy("ALICE says P(X)")
    with pytest.raises(SignatureError):
        to_datalog(db, keyring=Keyring())


# -- worked examples -----------------------------------------------------------


def test_hosting_scenario_granted():
    db = parse_policy(ALICE_HOSTING)
    sup = parse_policy(SUPPORT).assertions
    d = resolve(db, sup, can_host("M1"), speaker="ALICE")
    assert d.granted
    assert d.proof[0] == db[0]
    assert set(sup) <= set(d.proof)


@pytest.mark.parametrize("keep", [0, 1])
def test_hosting_scenario_needs_both_supports(keep):
    db = parse_policy(ALICE_HOSTING)
    sup = parse_policy(SUPPORT).assertions
    d = resolve(db, [sup[keep]], can_host("M1"), speaker="ALICE")
    assert not d.granted and d.reason == "no_proof"


def test_empty_db_denies():
    d = resolve(parse_policy(""), (), can_host("M1"), speaker="ALICE")
    assert not d.granted


def test_amount_over_limit_denied_by_constraint():
    db = parse_policy(CCN)
    d = resolve(db, (), charge("AMAZON", 150), speaker="ALICE")
    assert d.reason == "constraint"
    assert resolve(db, (), charge("AMAZON", 50), speaker="ALICE").granted


def test_time_window():
    db = parse_policy(CCN)
    assert resolve(db, (), charge("DOUBLECLICK", 20), speaker="ALICE", current_time=JAN_2010)
    assert not resolve(db, (), charge("DOUBLECLICK", 20), speaker="ALICE", current_time=JAN_2010 + 10**7)
    # No verified time at all: time-conditioned rules deny.
    assert not resolve(db, (), charge("DOUBLECLICK", 20), speaker="ALICE")


def test_vouched_principal_uses_shared_budget():
    db = parse_policy(CCN)
    sup = parse_policy('AMAZON says CanInvoke("Charge", BOB, n?A)').assertions
    d = resolve(db, sup, charge("BOB", 40), speaker="ALICE")
    assert d.granted
    (m,) = d.matched_state
    assert m.assertion == db[2] and m.index == 2
    db2 = apply_state_updates(db, d.matched_state)
    assert db2[2].state.value("Limit") == 110


def test_binding_argument():
    db = parse_policy(CCN)
    q = Predicate("CanInvoke", (string("Charge"), principal("AMAZON"), parse_policy("X says T(n?A)")[0].fact.args[0]))
    assert resolve(db, (), q, {"A": 10}, speaker="ALICE").granted
    with pytest.raises(ResolutionError):
        resolve(db, (), q, speaker="ALICE")


def test_query_type_mismatch():
    db = parse_policy(ALICE_HOSTING)
    with pytest.raises(PolicyTypeError):
        resolve(db, (), Predicate("CanHost", (number(1),)), speaker="ALICE")


def test_countersigned_descendant_accepted():
    alice, capsule = KeyPair.generate("ed25519"), KeyPair.generate("ed25519")
    ring = Keyring(ALICE=alice.public)
    db = parse_policy(CCN).signed({"ALICE": alice})
    d = resolve(db, (), charge("DOUBLECLICK", 20), speaker="ALICE", keyring=ring, current_time=JAN_2010)
    db2 = apply_state_updates(db, d.matched_state, capsule)
    assert db2[1].countersigner == capsule.public.fingerprint
    assert db2[1].origin == db[1].digest()
    d2 = resolve(
        db2, (), charge("DOUBLECLICK", 20), speaker="ALICE", keyring=ring,
        countersigners=[capsule.public], current_time=JAN_2010,
    )
    assert d2.granted
    with pytest.raises(SignatureError):
        resolve(db2, (), charge("DOUBLECLICK", 20), speaker="ALICE", keyring=ring)
    # A capsule key cannot vouch for outside assertions.
    smuggled = db2[1]
    with pytest.raises(SignatureError):
        to_datalog(db, [smuggled], keyring=ring, countersigners=(capsule.public,))


def test_tie_break_prefers_first_assertion():
    db = parse_policy("A says P(X)\nA says P(p?x)\nA says P(X) if Q(Y)\nA says Q(Y)")
    d = resolve(db, (), Predicate("P", (principal("X"),)), speaker="A")
    assert d.proof == (db[0],)


def test_recursive_policy_terminates():
    db = parse_policy("A says Reach(p?x, p?y) if Edge(p?x, p?y)\n"
                      "A says Reach(p?x, p?z) if Reach(p?x, p?y), Edge(p?y, p?z)\n"
                      "A says Edge(N1, N2)\nA says Edge(N2, N3)\nA says Edge(N3, N1)")
    d = resolve(db, (), Predicate("Reach", (principal("N1"), principal("N1"))), speaker="A")
    assert d.granted
    assert not resolve(db, (), Predicate("Reach", (principal("N1"), principal("N4"))), speaker="A")


# -- properties ----------------------------------------------------------------


def _agree(seed, count):
    rng = random.Random(seed)
    checked = 0
    for _ in range(count):
        db = random_database(rng)
        now = rng.choice([None, 150])
        cs = to_datalog(db)
        dom = domain_of(db)
        facts = fixpoint(db, dom, now)
        for speaker, q in herbrand_queries(cs.signatures, dom):
            d = resolve(db, (), q, speaker=speaker, current_time=now, clauses=cs)
            assert bool(d) == oracle_holds(facts, speaker, q), (str(db), speaker, q)
            checked += 1
    return checked


def test_oracle_agreement_sample():
    assert _agree(7, 60) > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=2**32))
def test_oracle_agreement_property(seed):
    _agree(seed, 1)


def _delegation_hops(node):
    """Max number of delegation steps stacked along any path."""
    own = 1 if node.source == DELEGATION else 0
    return own + max((_delegation_hops(c) for c in node.children), default=0)


def test_single_hop_delegation():
    rng = random.Random(3)
    for _ in range(150):
        db = random_database(rng)
        cs = to_datalog(db)
        dom = domain_of(db)
        for speaker, q in herbrand_queries(cs.signatures, dom):
            d = resolve(db, (), q, speaker=speaker, clauses=cs)
            if d:
                for node in d.tree.walk():
                    if node.source == DELEGATION:
                        said = node.children[1]
                        assert said.atom[2] == 0
                        assert all(n.source != DELEGATION for n in said.walk())


def test_determinism():
    db = parse_policy(ALICE_HOSTING)
    sup = parse_policy(SUPPORT).assertions
    runs = {str(resolve(db, sup, can_host("M1"), speaker="ALICE").tree) for _ in range(5)}
    assert len(runs) == 1


def test_cansay_query():
    db = parse_policy(ALICE_HOSTING)
    q = CanSay(principal("CA"), Predicate("HasTPM", (principal("M9"),)))
    assert resolve(db, (), q, speaker="ALICE").granted
