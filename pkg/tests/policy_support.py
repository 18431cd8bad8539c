"""Bottom-up reference semantics and random policy generators for tests.

The oracle grounds every assertion over the active domain and iterates the
immediate-consequence operator naively.  It shares only the AST with the
engine under test.
"""

from __future__ import annotations

import itertools
import random

from datacapsule.policy.ast import (
    Arith,
    Assertion,
    Between,
    BoolOp,
    CanSay,
    Compare,
    Const,
    CurrentTime,
    PolicyDatabase,
    Predicate,
    StateSpec,
    TermType,
    Var,
)

P, N = TermType.PRINCIPAL, TermType.NUMBER


def domain_of(assertions, extra=()):
    dom = {t: set() for t in TermType}
    for a in assertions:
        dom[P].add(Const(P, a.issuer))
        for f in (a.fact, *a.conditions):
            terms = list(f.fact.args) + [f.delegatee] if isinstance(f, CanSay) else list(f.args)
            for t in terms:
                if isinstance(t, Const):
                    dom[t.type].add(t)
    for c in extra:
        dom[c.type].add(c)
    return {t: sorted(v) for t, v in dom.items()}


def _val(e, env, now):
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        return env[e.name]
    if isinstance(e, CurrentTime):
        if now is None:
            raise LookupError
        return now
    if isinstance(e, Arith):
        l, r = _val(e.left, env, now), _val(e.right, env, now)
        return l + r if e.op == "+" else l - r
    raise TypeError(e)


def _holds(c, env, now):
    if isinstance(c, BoolOp):
        if c.op == "and":
            return _holds(c.left, env, now) and _holds(c.right, env, now)
        return _holds(c.left, env, now) or _holds(c.right, env, now)
    try:
        if isinstance(c, Between):
            return _val(c.low, env, now) <= _val(c.subject, env, now) <= _val(c.high, env, now)
        l, r = _val(c.left, env, now), _val(c.right, env, now)
    except LookupError:
        return False
    return {"<": l < r, ">": l > r, "=": l == r}[c.op]


def _ground_fact(f, env):
    def g(t):
        return Const(t.type, env[t.name]) if isinstance(t, Var) else t

    if isinstance(f, CanSay):
        return ("cansay", g(f.delegatee), f.fact.name, tuple(g(t) for t in f.fact.args))
    return ("pred", None, f.name, tuple(g(t) for t in f.args))


def fixpoint(assertions, domain, now=None) -> set:
    """All derivable (issuer, depth, ground-fact) triples; depth 0 or 1."""
    rules = []
    for a in assertions:
        state = dict(a.state.bindings) if a.state else {}
        names = {}
        for f in (a.fact, *a.conditions):
            vs = f.variables()
            for v in vs:
                names[v.name] = v.type
        for c in a.constraints:
            for v in _vars(c):
                if v.name not in state:
                    names[v.name] = v.type
        order = sorted(names)
        for combo in itertools.product(*[domain[names[n]] for n in order]):
            env = {n: c.value for n, c in zip(order, combo)}
            env.update(state)
            if not all(_holds(c, env, now) for c in a.constraints):
                continue
            head = _ground_fact(a.fact, env)
            body = [_ground_fact(f, env) for f in a.conditions]
            rules.append((a.issuer, head, body))
    facts: set = set()
    while True:
        new = set()
        for depth in (0, 1):
            for issuer, head, body in rules:
                if all((issuer, depth, b) in facts for b in body):
                    new.add((issuer, depth, head))
        for issuer, depth, f in facts:
            if depth == 1 and f[0] == "cansay":
                inner = ("pred", None, f[2], f[3])
                if (f[1].value, 0, inner) in facts:
                    new.add((issuer, 1, inner))
        if new <= facts:
            return facts
        facts |= new


def _vars(c):
    if isinstance(c, Var):
        return {c}
    if isinstance(c, (Compare, Arith, BoolOp)):
        return _vars(c.left) | _vars(c.right)
    if isinstance(c, Between):
        return _vars(c.subject) | _vars(c.low) | _vars(c.high)
    return set()


def herbrand_queries(signatures, domain):
    """Every ground (speaker, fact) query over the active domain."""
    for speaker in domain[P]:
        for name, sig in sorted(signatures.items()):
            for args in itertools.product(*[domain[t] for t in sig]):
                yield speaker.value, Predicate(name, tuple(args))
                for d in domain[P]:
                    yield speaker.value, CanSay(d, Predicate(name, tuple(args)))


def oracle_holds(facts, speaker, query) -> bool:
    if isinstance(query, CanSay):
        key = ("cansay", query.delegatee, query.fact.name, query.fact.args)
    else:
        key = ("pred", None, query.name, query.args)
    return (speaker, 1, key) in facts


# -- random databases --------------------------------------------------------

PRINCIPALS = ["A", "B", "C"]
NUMBERS = [1, 2, 3]
SIGNATURES = {"P": (P,), "Q": (P, P), "R": (N,), "S": (P, N)}


def _rand_term(rng, typ, vars_):
    pool = [v for v in vars_ if v.type is typ]
    if pool and rng.random() < 0.55:
        return rng.choice(pool)
    if typ is P:
        return Const(P, rng.choice(PRINCIPALS))
    return Const(N, rng.choice(NUMBERS))


def _rand_pred(rng, vars_, names):
    name = rng.choice(names)
    return Predicate(name, tuple(_rand_term(rng, t, vars_) for t in SIGNATURES[name]))


def random_assertion(rng: random.Random, names=None) -> Assertion:
    names = names or sorted(SIGNATURES)
    n_vars = rng.randint(0, 2)
    pool = [Var(P, "x"), Var(P, "y"), Var(N, "n"), Var(N, "m")]
    vars_ = rng.sample(pool, n_vars)
    issuer = rng.choice(PRINCIPALS)
    fact = _rand_pred(rng, vars_, names)
    if rng.random() < 0.35:
        fact = CanSay(_rand_term(rng, P, vars_), fact)
    conditions = []
    for _ in range(rng.choice([0, 0, 1, 1, 2])):
        c = _rand_pred(rng, vars_, names)
        if rng.random() < 0.15:
            c = CanSay(_rand_term(rng, P, vars_), c)
        conditions.append(c)
    bound = set()
    for f in (fact, *conditions):
        bound |= f.variables()
    num_vars = sorted(v for v in bound if v.type is N)
    constraints = ()
    state = None
    if num_vars and rng.random() < 0.5:
        v = rng.choice(num_vars)
        roll = rng.random()
        if roll < 0.3:
            state = StateSpec((("L", rng.randint(1, 4)),), ((("L"), Arith("-", Var(N, "L"), v)),))
            constraints = (Compare("<", v, Var(N, "L")),)
        elif roll < 0.5:
            constraints = (BoolOp("or", Compare(">", v, Const(N, 2)), Compare("=", v, Const(N, 1))),)
        elif roll < 0.6:
            constraints = (Between(CurrentTime(), Const(N, 100), Const(N, 200)),)
        else:
            constraints = (Compare(rng.choice("<>="), v, Const(N, rng.choice(NUMBERS))),)
    return Assertion(issuer, fact, tuple(conditions), constraints, state)


def random_database(rng: random.Random, max_assertions: int = 8) -> PolicyDatabase:
    names = rng.sample(sorted(SIGNATURES), rng.randint(1, 3))
    items = []
    seen = set()
    for _ in range(rng.randint(1, max_assertions)):
        a = random_assertion(rng, names)
        if a.encoded() not in seen:
            seen.add(a.encoded())
            items.append(a)
    return PolicyDatabase(tuple(items))
