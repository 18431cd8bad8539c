"""Policy language: parsing, Datalog translation, resolution and state."""

from .ast import (
    Assertion,
    CanSay,
    Const,
    Keyring,
    PolicyDatabase,
    Predicate,
    Principal,
    StateSpec,
    TermType,
    Var,
    number,
    principal,
    string,
)
from .datalog import ClauseSet, to_datalog
from .parser import format_policy, parse_assertion, parse_policy
from .resolver import Denied, Granted, StateMatch, resolve
from .state import apply_state_updates, split_constraint

__all__ = [
    "Assertion",
    "CanSay",
    "ClauseSet",
    "Const",
    "Denied",
    "Granted",
    "Keyring",
    "PolicyDatabase",
    "Predicate",
    "Principal",
    "StateMatch",
    "StateSpec",
    "TermType",
    "Var",
    "apply_state_updates",
    "format_policy",
    "number",
    "parse_assertion",
    "parse_policy",
    "principal",
    "resolve",
    "split_constraint",
    "string",
]
