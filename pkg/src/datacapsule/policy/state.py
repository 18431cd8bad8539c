"""Stateful assertions: post-grant updates and exo-lease splitting."""

from __future__ import annotations

from dataclasses import replace

from ..crypto import KeyPair
from ..errors import ResolutionError, SplitError, StateUpdateError
from .ast import Assertion, Const, PolicyDatabase, TermType, Var
from .resolver import StateMatch, eval_expr


def _reissue(old: Assertion, new: Assertion, key: KeyPair | None) -> Assertion:
    if key is None:
        return replace(new, signature=None, countersigner=None, origin=None)
    return new.countersigned(key, old.lineage_origin())


def updated_values(assertion: Assertion, binding) -> dict[str, int]:
    """Evaluate every update against the pre-update values."""
    state = assertion.state
    theta = {Var(TermType.NUMBER, n): Const(TermType.NUMBER, v) for n, v in state.bindings}
    for var, value in (binding.items() if isinstance(binding, dict) else binding):
        if var.name not in state.as_dict():
            theta[var] = value
    values = state.as_dict()
    for name, expr in state.updates:
        try:
            values[name] = eval_expr(expr, theta, None)
        except ResolutionError as exc:
            raise StateUpdateError(f"cannot evaluate update of {name}: {exc}") from exc
    return values


def apply_state_updates(
    db: PolicyDatabase,
    matched,
    countersigner: KeyPair | None = None,
) -> PolicyDatabase:
    """Replace each matched stateful assertion by its updated descendant.

    ``matched`` is one :class:`StateMatch` or a sequence of them.  Matches
    whose index lies outside ``db`` (supporting assertions) carry no durable
    state and are skipped.  The database version advances exactly once.
    """
    matches = [matched] if isinstance(matched, StateMatch) else list(matched)
    items = list(db.assertions)
    for m in matches:
        if m.index >= len(items):
            continue
        current = items[m.index]
        if current.body() != m.assertion.body() and current.encoded() != m.assertion.encoded():
            raise StateUpdateError(f"matched assertion {m.index} is no longer in the database")
        values = updated_values(current, m.binding)
        negative = sorted(n for n, v in values.items() if v < 0)
        if negative:
            raise StateUpdateError(f"update would drive {', '.join(negative)} below zero")
        new = replace(current, state=current.state.with_values(values))
        items[m.index] = _reissue(current, new, countersigner)
    return PolicyDatabase(tuple(items), db.version + 1)


def split_constraint(
    a: Assertion,
    amount: int,
    var: str | None = None,
    countersigner: KeyPair | None = None,
) -> tuple[Assertion, Assertion]:
    """Split a decomposable state variable into (retained, transferred)."""
    if a.state is None:
        raise SplitError("assertion has no state")
    candidates = a.state.decomposable()
    if var is None:
        if len(candidates) != 1:
            raise SplitError(f"need exactly one decomposable variable, found {candidates}")
        var = candidates[0]
    elif var not in candidates:
        raise SplitError(f"state variable {var} is not decomposable")
    total = a.state.value(var)
    amount = int(amount)
    if not 0 <= amount <= total:
        raise SplitError(f"transfer amount {amount} outside [0, {total}]")
    retained = replace(a, state=a.state.with_values({var: total - amount}))
    transferred = replace(a, state=a.state.with_values({var: amount}))
    return _reissue(a, retained, countersigner), _reissue(a, transferred, countersigner)


def splittable(a: Assertion) -> bool:
    return a.state is not None and len(a.state.decomposable()) == 1
