"""Policy language data model: terms, facts, constraints, assertions.

An assertion is the 5-tuple (issuer, fact, conditions, constraints, state).
Everything here is immutable; a :class:`PolicyDatabase` mutation returns a
new database with ``version + 1``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Union

from .. import encoding
from ..crypto import KeyPair, PublicKey, sha256
from ..errors import PolicyError


class TermType(str, enum.Enum):
    PRINCIPAL = "principal"
    STRING = "string"
    NUMBER = "number"


VAR_PREFIX = {TermType.PRINCIPAL: "p?", TermType.NUMBER: "n?", TermType.STRING: "s?"}
PREFIX_TYPE = {v: k for k, v in VAR_PREFIX.items()}


@dataclass(frozen=True, order=True)
class Const:
    type: TermType
    value: Union[str, int]

    def __str__(self) -> str:
        if self.type is TermType.STRING:
            escaped = str(self.value).replace("\\", "\\\\").replace('"', '\\"')
            return f'"{escaped}"'
        return str(self.value)


@dataclass(frozen=True, order=True)
class Var:
    type: TermType
    name: str

    def __str__(self) -> str:
        return VAR_PREFIX[self.type] + self.name


Term = Union[Const, Var]


def principal(name: str) -> Const:
    return Const(TermType.PRINCIPAL, name)


def number(value: int) -> Const:
    return Const(TermType.NUMBER, int(value))


def string(value: str) -> Const:
    return Const(TermType.STRING, value)


@dataclass(frozen=True)
class Predicate:
    name: str
    args: tuple[Term, ...]

    def __str__(self) -> str:
        return f"{self.name}({', '.join(str(a) for a in self.args)})"

    def variables(self) -> set[Var]:
        return {a for a in self.args if isinstance(a, Var)}


@dataclass(frozen=True)
class CanSay:
    """``delegatee can say fact``; the inner fact is never itself a CanSay."""

    delegatee: Term
    fact: Predicate

    def __str__(self) -> str:
        return f"{self.delegatee} can say {self.fact}"

    def variables(self) -> set[Var]:
        out = self.fact.variables()
        if isinstance(self.delegatee, Var):
            out.add(self.delegatee)
        return out


Fact = Union[Predicate, CanSay]


# -- constraints ------------------------------------------------------------


@dataclass(frozen=True)
class CurrentTime:
    def __str__(self) -> str:
        return "CurrentTime"


@dataclass(frozen=True)
class Arith:
    op: str  # "+" | "-"
    left: "Expr"
    right: "Expr"

    def __str__(self) -> str:
        return f"{self.left} {self.op} {self.right}"


Expr = Union[Const, Var, CurrentTime, Arith]


@dataclass(frozen=True)
class Compare:
    """``LessThan`` / ``GreaterThan`` / ``Equals`` written as ``<``/``>``/``=``."""

    op: str
    left: Expr
    right: Expr

    def __str__(self) -> str:
        return f"{self.left} {self.op} {self.right}"


@dataclass(frozen=True)
class Between:
    subject: Expr
    low: Expr
    high: Expr

    def __str__(self) -> str:
        return f"between({self.subject}, {self.low}, {self.high})"


@dataclass(frozen=True)
class BoolOp:
    op: str  # "and" | "or"
    left: "Constraint"
    right: "Constraint"

    def __str__(self) -> str:
        return f"({self.left} {self.op} {self.right})"


Constraint = Union[Compare, Between, BoolOp]


def expr_variables(expr) -> set[Var]:
    if isinstance(expr, Var):
        return {expr}
    if isinstance(expr, Arith):
        return expr_variables(expr.left) | expr_variables(expr.right)
    if isinstance(expr, Compare):
        return expr_variables(expr.left) | expr_variables(expr.right)
    if isinstance(expr, Between):
        return expr_variables(expr.subject) | expr_variables(expr.low) | expr_variables(expr.high)
    if isinstance(expr, BoolOp):
        return expr_variables(expr.left) | expr_variables(expr.right)
    return set()


def uses_current_time(expr) -> bool:
    if isinstance(expr, CurrentTime):
        return True
    if isinstance(expr, (Arith, Compare)):
        return uses_current_time(expr.left) or uses_current_time(expr.right)
    if isinstance(expr, Between):
        return any(uses_current_time(e) for e in (expr.subject, expr.low, expr.high))
    if isinstance(expr, BoolOp):
        return uses_current_time(expr.left) or uses_current_time(expr.right)
    return False


@dataclass(frozen=True)
class StateSpec:
    """State variables with their current values plus update rules."""

    bindings: tuple[tuple[str, int], ...]
    updates: tuple[tuple[str, Expr], ...] = ()

    def value(self, name: str) -> int:
        for var, val in self.bindings:
            if var == name:
                return val
        raise KeyError(name)

    def as_dict(self) -> dict[str, int]:
        return dict(self.bindings)

    def with_values(self, values: dict[str, int]) -> "StateSpec":
        return replace(self, bindings=tuple((n, int(values.get(n, v))) for n, v in self.bindings))

    def decomposable(self) -> list[str]:
        """Variables whose update only ever subtracts from themselves (budgets, counts)."""
        out = []
        for var, expr in self.updates:
            if (
                isinstance(expr, Arith)
                and expr.op == "-"
                and isinstance(expr.left, Var)
                and expr.left.name == var
                and var not in {n.name for n in expr_variables(expr.right)}
            ):
                out.append(var)
        return out

    def __str__(self) -> str:
        parts = [f"n?{n}={v}" for n, v in self.bindings]
        parts += [f"update(n?{n}, {e})" for n, e in self.updates]
        return f"state ({', '.join(parts)})"


# -- assertions -------------------------------------------------------------


@dataclass(frozen=True)
class Principal:
    """A name bound to a signing key."""

    name: str
    key: PublicKey

    def __post_init__(self):
        if not self.name:
            raise PolicyError("principal name must be nonempty")


class Keyring(dict):
    """Trusted name -> :class:`PublicKey` bindings."""

    def add(self, name: str, key: PublicKey) -> None:
        existing = self.get(name)
        if existing is not None and existing != key:
            raise PolicyError(f"conflicting key for principal {name}")
        for other, k in self.items():
            if k == key and other != name:
                raise PolicyError(f"key already bound to principal {other}")
        self[name] = key

    def to_record(self) -> dict[str, bytes]:
        return {name: key.der for name, key in self.items()}

    @classmethod
    def from_record(cls, record: dict) -> "Keyring":
        ring = cls()
        for name, der in record.items():
            ring.add(name, PublicKey(der))
        return ring


@dataclass(frozen=True)
class Assertion:
    issuer: str
    fact: Fact
    conditions: tuple[Fact, ...] = ()
    constraints: tuple[Constraint, ...] = ()
    state: StateSpec | None = None
    signature: bytes | None = None
    # Set on capsule-countersigned descendants of a user-signed original.
    countersigner: bytes | None = None
    origin: bytes | None = None

    def __str__(self) -> str:
        out = f"{self.issuer} says {self.fact}"
        if self.conditions:
            out += " if " + ", ".join(str(c) for c in self.conditions)
        if self.constraints:
            cs = self.constraints[0]
            for extra in self.constraints[1:]:
                cs = BoolOp("and", cs, extra)
            out += f" where {cs}"
        if self.state is not None:
            out += f" {self.state}"
        return out

    def body(self) -> "Assertion":
        """The assertion stripped of signature and lineage."""
        return Assertion(self.issuer, self.fact, self.conditions, self.constraints, self.state)

    def signing_bytes(self) -> bytes:
        return encoding.encode(["assertion/v1", assertion_record(self.body()), self.origin])

    def encoded(self) -> bytes:
        return encoding.encode(assertion_record(self))

    def digest(self) -> bytes:
        return sha256(self.encoded())

    def signed_by(self, key: KeyPair) -> "Assertion":
        unsigned = replace(self, signature=None, countersigner=None, origin=None)
        return replace(unsigned, signature=key.sign(unsigned.signing_bytes()))

    def countersigned(self, key: KeyPair, origin: bytes) -> "Assertion":
        draft = replace(self, signature=None, countersigner=key.public.fingerprint, origin=origin)
        return replace(draft, signature=key.sign(draft.signing_bytes()))

    def lineage_origin(self) -> bytes:
        """Digest of the user-signed root this assertion descends from."""
        return self.origin if self.origin is not None else self.digest()

    def variables(self) -> set[Var]:
        out = self.fact.variables()
        for c in self.conditions:
            out |= c.variables()
        for c in self.constraints:
            out |= expr_variables(c)
        return out

    @property
    def is_delegation(self) -> bool:
        return isinstance(self.fact, CanSay)


# -- canonical records ------------------------------------------------------


def _term_rec(t) -> list:
    if isinstance(t, Const):
        return ["c", t.type.value, t.value]
    if isinstance(t, Var):
        return ["v", t.type.value, t.name]
    if isinstance(t, CurrentTime):
        return ["now"]
    if isinstance(t, Arith):
        return ["ar", t.op, _term_rec(t.left), _term_rec(t.right)]
    raise TypeError(t)


def _term_from(rec):
    tag = rec[0]
    if tag == "c":
        return Const(TermType(rec[1]), rec[2])
    if tag == "v":
        return Var(TermType(rec[1]), rec[2])
    if tag == "now":
        return CurrentTime()
    if tag == "ar":
        return Arith(rec[1], _term_from(rec[2]), _term_from(rec[3]))
    raise PolicyError(f"bad term record {tag!r}")


def _fact_rec(f: Fact) -> list:
    if isinstance(f, CanSay):
        return ["cansay", _term_rec(f.delegatee), _fact_rec(f.fact)]
    return ["pred", f.name, [_term_rec(a) for a in f.args]]


def _fact_from(rec) -> Fact:
    if rec[0] == "cansay":
        inner = _fact_from(rec[2])
        if not isinstance(inner, Predicate):
            raise PolicyError("nested delegation in record")
        return CanSay(_term_from(rec[1]), inner)
    return Predicate(rec[1], tuple(_term_from(a) for a in rec[2]))


def _constraint_rec(c: Constraint) -> list:
    if isinstance(c, Compare):
        return ["cmp", c.op, _term_rec(c.left), _term_rec(c.right)]
    if isinstance(c, Between):
        return ["btw", _term_rec(c.subject), _term_rec(c.low), _term_rec(c.high)]
    return ["bool", c.op, _constraint_rec(c.left), _constraint_rec(c.right)]


def _constraint_from(rec) -> Constraint:
    if rec[0] == "cmp":
        return Compare(rec[1], _term_from(rec[2]), _term_from(rec[3]))
    if rec[0] == "btw":
        return Between(_term_from(rec[1]), _term_from(rec[2]), _term_from(rec[3]))
    return BoolOp(rec[1], _constraint_from(rec[2]), _constraint_from(rec[3]))


def assertion_record(a: Assertion) -> list:
    state = None
    if a.state is not None:
        state = [
            [[n, v] for n, v in a.state.bindings],
            [[n, _term_rec(e)] for n, e in a.state.updates],
        ]
    return [
        a.issuer,
        _fact_rec(a.fact),
        [_fact_rec(c) for c in a.conditions],
        [_constraint_rec(c) for c in a.constraints],
        state,
        a.signature,
        a.countersigner,
        a.origin,
    ]


def assertion_from_record(rec) -> Assertion:
    issuer, fact, conds, cons, state, sig, csig, origin = rec
    spec = None
    if state is not None:
        spec = StateSpec(
            tuple((n, int(v)) for n, v in state[0]),
            tuple((n, _term_from(e)) for n, e in state[1]),
        )
    return Assertion(
        issuer,
        _fact_from(fact),
        tuple(_fact_from(c) for c in conds),
        tuple(_constraint_from(c) for c in cons),
        spec,
        sig,
        csig,
        origin,
    )


# -- database ---------------------------------------------------------------


@dataclass(frozen=True)
class PolicyDatabase:
    assertions: tuple[Assertion, ...] = ()
    version: int = 0

    def __post_init__(self):
        seen = set()
        for a in self.assertions:
            enc = a.encoded()
            if enc in seen:
                raise PolicyError("duplicate assertion in database")
            seen.add(enc)

    def __iter__(self) -> Iterator[Assertion]:
        return iter(self.assertions)

    def __len__(self) -> int:
        return len(self.assertions)

    def __getitem__(self, index: int) -> Assertion:
        return self.assertions[index]

    def index(self, assertion: Assertion) -> int:
        enc = assertion.encoded()
        for i, a in enumerate(self.assertions):
            if a.encoded() == enc:
                return i
        raise PolicyError("assertion not in database")

    def add(self, *new: Assertion) -> "PolicyDatabase":
        return PolicyDatabase(self.assertions + tuple(new), self.version + 1)

    def extend(self, new: Iterable[Assertion]) -> "PolicyDatabase":
        return self.add(*tuple(new))

    def replace_at(self, index: int, assertion: Assertion) -> "PolicyDatabase":
        items = list(self.assertions)
        items[index] = assertion
        return PolicyDatabase(tuple(items), self.version + 1)

    def bump(self) -> "PolicyDatabase":
        return PolicyDatabase(self.assertions, self.version + 1)

    def signed(self, keys: dict[str, KeyPair]) -> "PolicyDatabase":
        """Sign every pending assertion with its issuer's key (one mutation)."""
        items = tuple(
            a if a.signature is not None else a.signed_by(keys[a.issuer]) for a in self.assertions
        )
        return PolicyDatabase(items, self.version + 1 if items != self.assertions else self.version)

    def to_record(self) -> list:
        return [self.version, [assertion_record(a) for a in self.assertions]]

    @classmethod
    def from_record(cls, rec) -> "PolicyDatabase":
        version, items = rec
        return cls(tuple(assertion_from_record(r) for r in items), version)

    def __str__(self) -> str:
        return "\n".join(str(a) for a in self.assertions)


__all__ = [
    "Arith",
    "Assertion",
    "Between",
    "BoolOp",
    "CanSay",
    "Compare",
    "Const",
    "Constraint",
    "CurrentTime",
    "Expr",
    "Fact",
    "Keyring",
    "PolicyDatabase",
    "Predicate",
    "Principal",
    "StateSpec",
    "Term",
    "TermType",
    "Var",
    "assertion_from_record",
    "assertion_record",
    "number",
    "principal",
    "string",
]
