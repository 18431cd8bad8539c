"""Top-down tabled resolution over the clause set.

Tables are keyed by call variant and only ever hold ground answers; a head
variable the body leaves unbound is enumerated over the typed active domain.
Evaluation repeats whole passes from the query until no table grows, which
is a single pass for non-recursive policies.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Union

from ..errors import ResolutionError
from .ast import (
    Arith,
    Assertion,
    Between,
    BoolOp,
    CanSay,
    Compare,
    Const,
    CurrentTime,
    Fact,
    PolicyDatabase,
    Predicate,
    StateSpec,
    TermType,
    Var,
)
from .datalog import INF, ZERO, Atom, ClauseSet, atom_is_ground, check_query, fact_atom, format_atom, to_datalog

DELEGATION = -1


# -- constraints ------------------------------------------------------------


class _NoTime(Exception):
    pass


def eval_expr(expr, theta: dict, now: int | None) -> int:
    if isinstance(expr, Const):
        if expr.type is not TermType.NUMBER:
            raise ResolutionError(f"non-numeric constant {expr} in constraint")
        return int(expr.value)
    if isinstance(expr, Var):
        value = theta.get(expr)
        if value is None:
            raise ResolutionError(f"unbound variable {expr} in constraint")
        return int(value.value)
    if isinstance(expr, CurrentTime):
        if now is None:
            raise _NoTime()
        return now
    if isinstance(expr, Arith):
        left = eval_expr(expr.left, theta, now)
        right = eval_expr(expr.right, theta, now)
        return left + right if expr.op == "+" else left - right
    raise ResolutionError(f"bad expression {expr!r}")


def eval_constraint(c, theta: dict, now: int | None) -> bool:
    """Without a verified time every comparison touching CurrentTime is false."""
    if isinstance(c, BoolOp):
        left = eval_constraint(c.left, theta, now)
        if c.op == "and":
            return left and eval_constraint(c.right, theta, now)
        return left or eval_constraint(c.right, theta, now)
    try:
        if isinstance(c, Between):
            x = eval_expr(c.subject, theta, now)
            return eval_expr(c.low, theta, now) <= x <= eval_expr(c.high, theta, now)
        if isinstance(c, Compare):
            left = eval_expr(c.left, theta, now)
            right = eval_expr(c.right, theta, now)
            if c.op == "<":
                return left < right
            if c.op == ">":
                return left > right
            return left == right
    except _NoTime:
        return False
    raise ResolutionError(f"bad constraint {c!r}")


# -- decisions --------------------------------------------------------------


@dataclass(frozen=True)
class ProofNode:
    atom: Atom
    source: int  # assertion index, or DELEGATION for the generic rule
    assertion: Assertion | None
    binding: tuple
    children: tuple["ProofNode", ...] = ()

    def __str__(self) -> str:
        return self.render()

    def render(self, indent: int = 0) -> str:
        label = "delegation" if self.assertion is None else str(self.assertion.body())
        lines = ["  " * indent + f"{format_atom(self.atom)}  <- {label}"]
        for child in self.children:
            lines.append(child.render(indent + 1))
        return "\n".join(lines)

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass(frozen=True)
class StateMatch:
    assertion: Assertion
    state: StateSpec
    binding: tuple  # ((Var, Const), ...)
    index: int  # position in the combined db+supporting list

    def values(self) -> dict:
        return {v: c for v, c in self.binding}


@dataclass(frozen=True)
class Granted:
    proof: tuple[Assertion, ...]
    matched_state: tuple[StateMatch, ...] = ()
    tree: ProofNode | None = None

    granted = True

    def __bool__(self) -> bool:
        return True


@dataclass(frozen=True)
class Denied:
    reason: str  # "no_proof" | "constraint"

    granted = False

    def __bool__(self) -> bool:
        return False


Decision = Union[Granted, Denied]


# -- engine -----------------------------------------------------------------


def _walk(t, theta):
    while isinstance(t, Var) and t in theta:
        t = theta[t]
    return t


def _unify_terms(a, b, theta) -> dict | None:
    a = _walk(a, theta)
    b = _walk(b, theta)
    if a == b:
        return theta
    if a.type is not b.type:
        return None
    if isinstance(a, Var):
        return {**theta, a: b}
    if isinstance(b, Var):
        return {**theta, b: a}
    return None


def _unify(pattern: Atom, other: Atom, theta: dict) -> dict | None:
    if pattern[0] != other[0] or pattern[1] != other[1] or pattern[2] != other[2]:
        return None
    if pattern[4] != other[4] or len(pattern[5]) != len(other[5]):
        return None
    if pattern[3] is not None:
        theta = _unify_terms(pattern[3], other[3], theta)
        if theta is None:
            return None
    for x, y in zip(pattern[5], other[5]):
        theta = _unify_terms(x, y, theta)
        if theta is None:
            return None
    return theta


def _subst(atom: Atom, theta: dict) -> Atom:
    d = atom[3]
    if d is not None:
        d = _walk(d, theta)
    return (atom[0], atom[1], atom[2], d, atom[4], tuple(_walk(t, theta) for t in atom[5]))


def _variant_key(atom: Atom) -> tuple[Atom, dict]:
    """Rename variables to ``#0, #1, ...`` in order of first appearance."""
    mapping: dict[Var, Var] = {}

    def canon(t):
        if isinstance(t, Var):
            if t not in mapping:
                mapping[t] = Var(t.type, f"#{len(mapping)}")
            return mapping[t]
        return t

    d = canon(atom[3]) if atom[3] is not None else None
    return (atom[0], atom[1], atom[2], d, atom[4], tuple(canon(t) for t in atom[5])), mapping


def _rename(atom: Atom, tag: str) -> Atom:
    def r(t):
        return Var(t.type, f"{t.name}{tag}") if isinstance(t, Var) else t

    d = r(atom[3]) if atom[3] is not None else None
    return (atom[0], atom[1], atom[2], d, atom[4], tuple(r(t) for t in atom[5]))


@dataclass
class _Justification:
    order: int
    source: int
    body: tuple[Atom, ...]
    binding: tuple


@dataclass
class _Table:
    answers: list[Atom] = field(default_factory=list)
    seen: set = field(default_factory=set)


class Engine:
    def __init__(self, cs: ClauseSet, current_time: int | None = None, check_constraints: bool = True):
        self.cs = cs
        self.now = current_time
        self.check_constraints = check_constraints
        self.tables: dict[Atom, _Table] = {}
        self.rank: dict[Atom, int] = {}
        self.justs: dict[Atom, list[_Justification]] = {}
        self._by_head: dict[tuple, list] = {}
        for ci, clause in enumerate(cs.clauses):
            h = clause.head
            self._by_head.setdefault((h[0], h[1], h[4]), []).append((ci, clause))
        self._changed = False
        self._visited: set = set()
        self.passes = 0

    # answers ---------------------------------------------------------------

    def _record(self, table: _Table, answer: Atom, just: _Justification) -> None:
        if answer not in self.rank:
            self.rank[answer] = len(self.rank)
        js = self.justs.setdefault(answer, [])
        # Keep the first justification per originating assertion.
        if all(j.order != just.order for j in js):
            js.append(just)
        if answer not in table.seen:
            table.seen.add(answer)
            table.answers.append(answer)
            self._changed = True

    def query(self, goal: Atom) -> list[Atom]:
        while True:
            self._changed = False
            self._visited = set()
            self.passes += 1
            answers = self.solve(goal)
            if not self._changed:
                return answers

    def solve(self, goal: Atom) -> list[Atom]:
        key, _ = _variant_key(goal)
        table = self.tables.get(key)
        if table is None:
            table = self.tables[key] = _Table()
        if key in self._visited:
            return list(table.answers)
        self._visited.add(key)
        self._evaluate(key, table)
        return list(table.answers)

    def _evaluate(self, goal: Atom, table: _Table) -> None:
        kind, issuer, depth, _, name, _ = goal
        for ci, clause in self._by_head.get((kind, issuer, name), ()):
            tag = f"@{ci}"
            head, body = clause.at_depth(depth)
            head = _rename(head, tag)
            theta = _unify(goal, head, {})
            if theta is None:
                continue
            state_theta = {
                Var(TermType.NUMBER, f"{n}{tag}"): Const(TermType.NUMBER, v) for n, v in clause.state.items()
            }
            body = [_rename(b, tag) for b in body]
            for theta2, used in self._solve_body(body, {**theta, **state_theta}, ()):
                for theta3 in self._ground(head, theta2):
                    if self.check_constraints and clause.constraints:
                        renamed = _rename_theta_view(theta3, tag)
                        if not all(eval_constraint(c, renamed, self.now) for c in clause.constraints):
                            continue
                    answer = _subst(head, theta3)
                    binding = _clause_binding(theta3, tag)
                    self._record(table, answer, _Justification(clause.source, clause.source, used, binding))
        if kind == "says" and depth == INF:
            self._delegation(goal, table)

    def _delegation(self, goal: Atom, table: _Table) -> None:
        x = Var(TermType.PRINCIPAL, "#delegatee")
        cansay_goal = ("cansay", goal[1], INF, x, goal[4], goal[5])
        for cs_answer in self.solve(cansay_goal):
            delegatee = cs_answer[3].value
            inner = ("says", delegatee, ZERO, None, cs_answer[4], cs_answer[5])
            for answer in self.solve(inner):
                fact = ("says", goal[1], INF, None, answer[4], answer[5])
                order = self._first_order(cs_answer)
                self._record(table, fact, _Justification(order, DELEGATION, (cs_answer, answer), ()))

    def _first_order(self, atom: Atom) -> int:
        js = self.justs.get(atom)
        return js[0].order if js else 0

    def _solve_body(self, body: list[Atom], theta: dict, used: tuple):
        if not body:
            yield theta, used
            return
        first, rest = body[0], body[1:]
        pattern = _subst(first, theta)
        for answer in self.solve(pattern):
            theta2 = _unify(pattern, answer, theta)
            if theta2 is not None:
                yield from self._solve_body(rest, theta2, used + (answer,))

    def _ground(self, head: Atom, theta: dict):
        inst = _subst(head, theta)
        free = []
        for t in ([inst[3]] if inst[3] is not None else []) + list(inst[5]):
            if isinstance(t, Var) and t not in free:
                free.append(t)
        # Constraint-only variables were rejected statically, so grounding the
        # head grounds everything the constraints mention except state vars.
        if not free:
            yield theta
            return
        pools = [self.cs.domain.get(v.type, []) for v in free]
        for combo in itertools.product(*pools):
            yield {**theta, **dict(zip(free, combo))}

    # proofs ----------------------------------------------------------------

    def proof(self, answer: Atom, _stack=None) -> ProofNode:
        rank = self.rank[answer]
        candidates = [j for j in self.justs[answer] if all(self.rank[b] < rank for b in j.body)]
        just = min(candidates, key=lambda j: (j.order, j.source < 0))
        children = tuple(self.proof(b) for b in just.body)
        assertion = self.cs.assertions[just.source] if just.source >= 0 else None
        return ProofNode(answer, just.source, assertion, just.binding, children)


def _rename_theta_view(theta: dict, tag: str) -> dict:
    """Map a clause's own variable names to their current (walked) values."""
    out = {}
    for var in theta:
        if var.name.endswith(tag):
            value = _walk(var, theta)
            if isinstance(value, Const):
                out[Var(var.type, var.name[: -len(tag)])] = value
    return out


def _clause_binding(theta: dict, tag: str) -> tuple:
    view = _rename_theta_view(theta, tag)
    return tuple(sorted(view.items()))


# -- public API --------------------------------------------------------------


def _bind_query(query: Fact, binding: dict | None) -> Fact:
    if not binding:
        return query
    values = {}
    for k, v in binding.items():
        name = k[2:] if len(k) > 2 and k[1] == "?" else k
        values[name] = v

    def bind(t):
        if isinstance(t, Var) and t.name in values:
            v = values[t.name]
            return v if isinstance(v, Const) else Const(t.type, int(v) if t.type is TermType.NUMBER else v)
        return t

    if isinstance(query, CanSay):
        return CanSay(bind(query.delegatee), Predicate(query.fact.name, tuple(bind(a) for a in query.fact.args)))
    return Predicate(query.name, tuple(bind(a) for a in query.args))


def resolve(
    db: PolicyDatabase,
    supporting=(),
    query: Fact | None = None,
    binding: dict | None = None,
    *,
    speaker: str,
    keyring=None,
    countersigners=(),
    current_time: int | None = None,
    clauses: ClauseSet | None = None,
):
    """Decide whether ``speaker says query`` follows from db ∪ supporting."""
    if query is None:
        raise ResolutionError("query required")
    query = _bind_query(query, binding)
    goal = fact_atom(speaker, INF, query)
    if not atom_is_ground(goal):
        raise ResolutionError(f"query {query} is not ground")
    cs = clauses if clauses is not None else to_datalog(db, supporting, keyring, tuple(countersigners))
    check_query(cs, query)
    cs = cs.with_query_constants(goal)

    engine = Engine(cs, current_time)
    if goal in engine.query(goal):
        tree = engine.proof(goal)
        return _granted(tree)

    relaxed = Engine(cs, current_time, check_constraints=False)
    if goal in relaxed.query(goal):
        return Denied("constraint")
    return Denied("no_proof")


def _granted(tree: ProofNode) -> Granted:
    used: list[Assertion] = []
    seen = set()
    matches: list[StateMatch] = []
    for node in tree.walk():
        if node.assertion is None:
            continue
        if node.source not in seen:
            seen.add(node.source)
            used.append(node.assertion)
        if node.assertion.state is not None:
            m = StateMatch(node.assertion, node.assertion.state, node.binding, node.source)
            if m not in matches:
                matches.append(m)
    return Granted(tuple(used), tuple(matches), tree)


__all__ = [
    "DELEGATION",
    "Denied",
    "Engine",
    "Granted",
    "ProofNode",
    "StateMatch",
    "eval_constraint",
    "eval_expr",
    "resolve",
]
