"""Parser for the textual policy language.

One assertion per line (``\\`` continues a line, ``#`` starts a comment)::

    ALICE says CanHost(p?M) if OwnsMachine(AMAZON, p?M), HasTPM(p?M)
    ALICE says CA can say HasTPM(p?X)
    ALICE says CanInvoke("Charge", DOUBLECLICK, n?A) \\
        where (n?A < n?Limit and between(CurrentTime, 1262304000, 1264982399)) \\
        state (n?Limit=5000, update(n?Limit, n?Limit - n?A))

Variables carry a type prefix: ``p?`` principal, ``n?`` number, ``s?`` string.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..errors import DelegationNestingError, PolicySyntaxError, PolicyTypeError
from .ast import (
    PREFIX_TYPE,
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
    expr_variables,
)

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<var>[pns]\?[A-Za-z_][A-Za-z0-9_]*)
  | (?P<int>-?\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[(),<>=+\-])
    """,
    re.VERBOSE,
)

KEYWORDS = {"says", "if", "where", "state", "can", "say", "and", "or", "update", "between"}


@dataclass
class Token:
    kind: str
    text: str
    line: int
    column: int


def _logical_lines(text: str):
    """Yield (line_no, text) after joining ``\\`` continuations and dropping comments."""
    buf = ""
    start = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not buf:
            start = lineno
        if line.rstrip().endswith("\\"):
            buf += line.rstrip()[:-1] + " "
            continue
        buf += line
        if buf.strip():
            yield start, buf
        buf = ""
    if buf.strip():
        yield start, buf


def _strip_comment(line: str) -> str:
    in_str = False
    escaped = False
    for i, ch in enumerate(line):
        if escaped:
            escaped = False
        elif ch == "\\" and in_str:
            escaped = True
        elif ch == '"':
            in_str = not in_str
        elif ch == "#" and not in_str:
            return line[:i]
    return line


def tokenize(line: str, lineno: int = 1) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(line):
        m = _TOKEN.match(line, pos)
        if m is None:
            raise PolicySyntaxError(f"unexpected character {line[pos]!r}", lineno, pos + 1)
        kind = m.lastgroup
        text = m.group()
        if kind != "ws":
            if kind == "ident" and text in KEYWORDS:
                kind = "kw"
            tokens.append(Token(kind, text, lineno, pos + 1))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, tokens: list[Token], lineno: int):
        self.tokens = tokens
        self.pos = 0
        self.lineno = lineno

    # -- helpers -----------------------------------------------------------

    def peek(self, offset: int = 0) -> Token | None:
        i = self.pos + offset
        return self.tokens[i] if i < len(self.tokens) else None

    def error(self, message: str, tok: Token | None = None, cls=PolicySyntaxError):
        tok = tok or self.peek()
        if tok is None:
            last = self.tokens[-1] if self.tokens else None
            col = (last.column + len(last.text)) if last else 1
            return cls(message + " at end of line", self.lineno, col)
        return cls(f"{message}, found {tok.text!r}", tok.line, tok.column)

    def accept(self, kind: str, text: str | None = None) -> Token | None:
        tok = self.peek()
        if tok is not None and tok.kind == kind and (text is None or tok.text == text):
            self.pos += 1
            return tok
        return None

    def expect(self, kind: str, text: str | None = None) -> Token:
        tok = self.accept(kind, text)
        if tok is None:
            raise self.error(f"expected {text or kind}")
        return tok

    # -- grammar -----------------------------------------------------------

    def assertion(self) -> Assertion:
        issuer = self.expect("ident").text
        self.expect("kw", "says")
        fact = self.fact()
        conditions: list[Fact] = []
        if self.accept("kw", "if"):
            conditions.append(self.fact())
            while self.accept("op", ","):
                conditions.append(self.fact())
        constraints = ()
        if self.accept("kw", "where"):
            constraints = (self.constraint(),)
        state = None
        if self.accept("kw", "state"):
            state = self.state_spec()
        if self.peek() is not None:
            raise self.error("unexpected trailing input")
        return Assertion(issuer, fact, tuple(conditions), constraints, state)

    def fact(self, nested: bool = False) -> Fact:
        tok = self.peek()
        nxt = self.peek(1)
        if tok is None:
            raise self.error("expected fact")
        if tok.kind in ("ident", "var") and nxt is not None and nxt.kind == "kw" and nxt.text == "can":
            if nested:
                raise self.error("recursive delegation is not supported", tok, DelegationNestingError)
            delegatee = self.term()
            if delegatee.type is not TermType.PRINCIPAL:
                raise self.error("delegatee must be a principal", tok, PolicyTypeError)
            self.expect("kw", "can")
            self.expect("kw", "say")
            inner = self.fact(nested=True)
            return CanSay(delegatee, inner)
        if tok.kind != "ident":
            raise self.error("expected predicate name")
        self.pos += 1
        self.expect("op", "(")
        args = []
        if not self.accept("op", ")"):
            args.append(self.term())
            while self.accept("op", ","):
                args.append(self.term())
            self.expect("op", ")")
        return Predicate(tok.text, tuple(args))

    def term(self):
        tok = self.peek()
        if tok is None:
            raise self.error("expected term")
        self.pos += 1
        if tok.kind == "var":
            return Var(PREFIX_TYPE[tok.text[:2]], tok.text[2:])
        if tok.kind == "int":
            return Const(TermType.NUMBER, int(tok.text))
        if tok.kind == "string":
            return Const(TermType.STRING, _unescape(tok.text[1:-1]))
        if tok.kind == "ident":
            if tok.text == "CurrentTime":
                raise self.error("CurrentTime may only appear in constraints", tok)
            return Const(TermType.PRINCIPAL, tok.text)
        raise self.error("expected term", tok)

    def constraint(self):
        left = self.constraint_atom()
        while True:
            tok = self.peek()
            if tok is not None and tok.kind == "kw" and tok.text in ("and", "or"):
                self.pos += 1
                left = BoolOp(tok.text, left, self.constraint_atom())
            else:
                return left

    def constraint_atom(self):
        if self.accept("op", "("):
            inner = self.constraint()
            self.expect("op", ")")
            return inner
        if self.accept("kw", "between"):
            self.expect("op", "(")
            subject = self.expr()
            self.expect("op", ",")
            low = self.expr()
            self.expect("op", ",")
            high = self.expr()
            self.expect("op", ")")
            return Between(subject, low, high)
        left = self.expr()
        tok = self.peek()
        if tok is None or tok.kind != "op" or tok.text not in "<>=":
            raise self.error("expected comparison operator")
        self.pos += 1
        return Compare(tok.text, left, self.expr())

    def expr(self):
        left = self.expr_atom()
        while True:
            tok = self.peek()
            if tok is not None and tok.kind == "op" and tok.text in "+-":
                self.pos += 1
                left = Arith(tok.text, left, self.expr_atom())
            elif tok is not None and tok.kind == "int" and tok.text.startswith("-"):
                # "n?L -5" tokenizes the minus into the integer.
                self.pos += 1
                left = Arith("-", left, Const(TermType.NUMBER, -int(tok.text)))
            else:
                return left

    def expr_atom(self):
        tok = self.peek()
        if tok is not None and tok.kind == "ident" and tok.text == "CurrentTime":
            self.pos += 1
            return CurrentTime()
        term = self.term()
        if term.type is not TermType.NUMBER:
            raise self.error("constraint operands must be numeric", tok, PolicyTypeError)
        return term

    def state_spec(self) -> StateSpec:
        self.expect("op", "(")
        bindings: list[tuple[str, int]] = []
        updates: list[tuple[str, object]] = []
        while True:
            if self.accept("kw", "update"):
                self.expect("op", "(")
                var = self.term()
                if not isinstance(var, Var) or var.type is not TermType.NUMBER:
                    raise self.error("update target must be a number variable", cls=PolicyTypeError)
                self.expect("op", ",")
                updates.append((var.name, self.expr()))
                self.expect("op", ")")
            else:
                if updates:
                    raise self.error("state bindings must precede updates")
                tok = self.peek()
                var = self.term()
                if not isinstance(var, Var) or var.type is not TermType.NUMBER:
                    raise self.error("state variable must be a number variable", tok, PolicyTypeError)
                self.expect("op", "=")
                value = self.expect("int")
                bindings.append((var.name, int(value.text)))
            if not self.accept("op", ","):
                break
        self.expect("op", ")")
        names = [n for n, _ in bindings]
        if len(set(names)) != len(names):
            raise self.error("duplicate state variable", cls=PolicyTypeError)
        for var, _ in updates:
            if var not in names:
                raise self.error(f"update of undeclared state variable {var}", cls=PolicyTypeError)
        return StateSpec(tuple(bindings), tuple(updates))


def _unescape(raw: str) -> str:
    return re.sub(r"\\(.)", r"\1", raw)


def parse_assertion(line: str, lineno: int = 1) -> Assertion:
    tokens = tokenize(line, lineno)
    if not tokens:
        raise PolicySyntaxError("empty assertion", lineno, 1)
    assertion = _Parser(tokens, lineno).assertion()
    check_assertion(assertion, lineno)
    return assertion


def parse_policy(text: str) -> PolicyDatabase:
    """Parse policy source into an (unsigned) database at version 0."""
    assertions = []
    signatures: dict = {}
    for lineno, line in _logical_lines(text):
        a = parse_assertion(line, lineno)
        assertions.append(a)
        check_signatures(a, signatures, lineno)
    return PolicyDatabase(tuple(assertions), 0)


# -- static checks ----------------------------------------------------------


def _iter_predicates(a: Assertion):
    for fact in (a.fact, *a.conditions):
        yield fact.fact if isinstance(fact, CanSay) else fact


def check_assertion(a: Assertion, lineno: int = 0) -> None:
    """Variable typing and range restriction of constraint/state variables."""
    types: dict[str, TermType] = {}
    for var in a.variables():
        seen = types.setdefault(var.name, var.type)
        if seen is not var.type:
            raise PolicyTypeError(f"variable {var.name} used with types {seen.value} and {var.type.value}")
    state_vars = set(a.state.as_dict()) if a.state else set()
    bound = set()
    for fact in (a.fact, *a.conditions):
        bound |= {v.name for v in fact.variables()}
    for c in a.constraints:
        for v in expr_variables(c):
            if v.name not in bound and v.name not in state_vars:
                raise PolicyTypeError(f"constraint variable {v} not bound by fact, conditions or state (line {lineno})")
            if v.name in state_vars and v.type is not TermType.NUMBER:
                raise PolicyTypeError(f"state variable {v.name} must be numeric")
    if a.state:
        for var, expr in a.state.updates:
            for v in expr_variables(expr):
                if v.name not in bound and v.name not in state_vars:
                    raise PolicyTypeError(f"update expression variable {v} is unbound (line {lineno})")
        clash = state_vars & bound
        if clash:
            raise PolicyTypeError(f"state variable(s) {sorted(clash)} also bound by facts")


def _term_type(t) -> TermType:
    return t.type


def check_signatures(a: Assertion, signatures: dict, lineno: int = 0) -> None:
    """Predicate arity and argument types must be fixed per predicate name."""
    for pred in _iter_predicates(a):
        sig = tuple(_term_type(t) for t in pred.args)
        known = signatures.setdefault(pred.name, sig)
        if len(known) != len(sig):
            raise PolicyTypeError(
                f"predicate {pred.name} used with arity {len(sig)} and {len(known)} (line {lineno})"
            )
        if known != sig:
            raise PolicyTypeError(f"predicate {pred.name} argument types mismatch (line {lineno})")


def check_database_types(assertions) -> None:
    signatures: dict = {}
    for a in assertions:
        check_signatures(a, signatures)


def format_policy(db: PolicyDatabase) -> str:
    return "\n".join(str(a) for a in db) + ("\n" if len(db) else "")
