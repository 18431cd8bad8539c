"""Translation of signed assertions into Datalog clauses.

Atoms are tuples ``(kind, issuer, depth, delegatee, name, args)``:

* ``("says", A, k, None, P, args)``  -- A says_k P(args)
* ``("cansay", A, k, B, P, args)``   -- A says_k (B can say_0 P(args))

``k`` is ``0`` (derived without delegation) or ``INF``.  Each assertion
becomes one clause whose atoms carry the depth variable ``K``, shared by
head and body; a single generic rule

    says(A, INF, P) :- cansay(A, INF, B, P), says(B, 0, P)

reifies delegation, so a delegated fact is vouched for by exactly one hop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..crypto import PublicKey
from ..errors import PolicyTypeError, SignatureError
from .ast import (
    Assertion,
    CanSay,
    Const,
    Fact,
    PolicyDatabase,
    Predicate,
    TermType,
    Var,
)
from .parser import check_assertion, check_signatures

ZERO = 0
INF = 1
K = "k"  # depth variable of a clause schema

Atom = tuple


def fact_atom(issuer: str, depth: int, fact: Fact) -> Atom:
    if isinstance(fact, CanSay):
        inner = fact.fact
        return ("cansay", issuer, depth, fact.delegatee, inner.name, inner.args)
    return ("says", issuer, depth, None, fact.name, fact.args)


def atom_terms(atom: Atom):
    if atom[3] is not None:
        yield atom[3]
    yield from atom[5]


def atom_is_ground(atom: Atom) -> bool:
    return not any(isinstance(t, Var) for t in atom_terms(atom))


def format_atom(atom: Atom) -> str:
    kind, issuer, depth, delegatee, name, args = atom
    k = {INF: "inf", ZERO: "0"}.get(depth, depth)
    body = f"{name}({', '.join(str(a) for a in args)})"
    if kind == "cansay":
        return f"{issuer} says_{k} {delegatee} can say_0 {body}"
    return f"{issuer} says_{k} {body}"


@dataclass(frozen=True)
class Clause:
    head: Atom
    body: tuple[Atom, ...]
    constraints: tuple
    state: dict
    source: int  # index into ClauseSet.assertions

    def at_depth(self, depth: int) -> tuple[Atom, tuple[Atom, ...]]:
        def inst(atom):
            return atom[:2] + (depth,) + atom[3:]

        return inst(self.head), tuple(inst(b) for b in self.body)

    def __str__(self) -> str:
        out = format_atom(self.head)
        if self.body:
            out += " :- " + ", ".join(format_atom(b) for b in self.body)
        if self.constraints:
            out += " | " + " and ".join(str(c) for c in self.constraints)
        return out


@dataclass
class ClauseSet:
    clauses: list[Clause]
    assertions: list[Assertion]
    db_size: int
    domain: dict[TermType, list[Const]] = field(default_factory=dict)
    signatures: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.clauses)

    def for_assertion(self, index: int) -> Clause:
        return self.clauses[index]

    def with_query_constants(self, atom: Atom) -> "ClauseSet":
        extra = [t for t in atom_terms(atom) if isinstance(t, Const)]
        extra.append(Const(TermType.PRINCIPAL, atom[1]))
        domain = {t: list(v) for t, v in self.domain.items()}
        for c in extra:
            bucket = domain.setdefault(c.type, [])
            if c not in bucket:
                bucket.append(c)
        for bucket in domain.values():
            bucket.sort()
        return ClauseSet(self.clauses, self.assertions, self.db_size, domain, self.signatures)


def verify_assertion(
    a: Assertion,
    keyring,
    countersigners: tuple[PublicKey, ...] = (),
    allow_countersigned: bool = True,
) -> bool:
    if a.signature is None:
        return False
    if a.countersigner is not None:
        if not allow_countersigned or a.origin is None:
            return False
        for key in countersigners:
            if key.fingerprint == a.countersigner:
                return key.verify(a.signature, a.signing_bytes())
        return False
    key = keyring.get(a.issuer) if keyring is not None else None
    if key is None:
        return False
    return key.verify(a.signature, a.signing_bytes())


def active_domain(assertions) -> dict[TermType, list[Const]]:
    seen: dict[TermType, set] = {t: set() for t in TermType}
    for a in assertions:
        seen[TermType.PRINCIPAL].add(Const(TermType.PRINCIPAL, a.issuer))
        for f in (a.fact, *a.conditions):
            atom = fact_atom(a.issuer, ZERO, f)
            for t in atom_terms(atom):
                if isinstance(t, Const):
                    seen[t.type].add(t)
    return {t: sorted(v) for t, v in seen.items()}


def to_datalog(
    db: PolicyDatabase,
    supporting=(),
    keyring=None,
    countersigners: tuple[PublicKey, ...] = (),
) -> ClauseSet:
    """Translate ``db`` plus supporting assertions into clauses.

    With ``keyring=None`` signatures are not checked (trusted local use).
    Supporting assertions must be user-signed; countersigned descendants are
    only accepted from the database itself.
    """
    assertions = list(db) + list(supporting)
    signatures: dict = {}
    for i, a in enumerate(assertions):
        is_db = i < len(db)
        if keyring is not None and not verify_assertion(a, keyring, countersigners, allow_countersigned=is_db):
            where = "policy" if is_db else "supporting"
            raise SignatureError(f"{where} assertion signature invalid", i)
        try:
            check_assertion(a)
            check_signatures(a, signatures)
        except PolicyTypeError as exc:
            raise PolicyTypeError(f"{exc} (assertion {i})") from exc

    clauses = []
    for i, a in enumerate(assertions):
        state = a.state.as_dict() if a.state else {}
        clauses.append(
            Clause(
                head=fact_atom(a.issuer, K, a.fact),
                body=tuple(fact_atom(a.issuer, K, c) for c in a.conditions),
                constraints=tuple(a.constraints),
                state=state,
                source=i,
            )
        )
    return ClauseSet(clauses, assertions, len(db), active_domain(assertions), signatures)


def check_query(cs: ClauseSet, fact: Fact) -> None:
    pred = fact.fact if isinstance(fact, CanSay) else fact
    known = cs.signatures.get(pred.name)
    if known is None:
        return
    sig = tuple(t.type for t in pred.args)
    if sig != known:
        raise PolicyTypeError(f"query {pred} does not match predicate signature of {pred.name}")


__all__ = [
    "INF",
    "K",
    "ZERO",
    "Clause",
    "ClauseSet",
    "Predicate",
    "active_domain",
    "atom_is_ground",
    "fact_atom",
    "format_atom",
    "to_datalog",
    "verify_assertion",
]
