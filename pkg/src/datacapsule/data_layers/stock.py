"""Stock-trading capsule: a private strategy evaluated against public ticks.

Strategies are s-expression predicate trees over LP (last price), MA
(moving average, current tick included), POS (shares held) and POSAV
(average fill price, undefined while flat).  A comparison touching an
undefined POSAV is false.
"""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction

from ..errors import DataLayerError
from .base import DataLayer, OpSpec, require

VARIABLES = ("LP", "MA", "POS", "POSAV")
COMPARISONS = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
    "=": lambda a, b: a == b,
}
ARITHMETIC = {"+": lambda a, b: a + b, "-": lambda a, b: a - b}

_TOKEN = re.compile(r"\s*(?:(\()|(\))|([^\s()]+))")


# -- s-expressions ------------------------------------------------------------


def parse_sexpr(text: str):
    """Parse into nested tuples of str / Fraction atoms."""
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise DataLayerError(f"bad strategy syntax at offset {pos}")
        tokens.append(m.group(1) or m.group(2) or m.group(3))
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1

    def atom(tok):
        if tok in VARIABLES or tok in COMPARISONS or tok in ARITHMETIC or tok in ("and", "or", "not"):
            return tok
        try:
            return Fraction(tok)
        except ValueError:
            raise DataLayerError(f"unknown strategy token {tok!r}") from None

    def read(i):
        if i >= len(tokens):
            raise DataLayerError("unexpected end of strategy")
        tok = tokens[i]
        if tok == ")":
            raise DataLayerError("unbalanced ')' in strategy")
        if tok != "(":
            return atom(tok), i + 1
        items = []
        i += 1
        while i < len(tokens) and tokens[i] != ")":
            item, i = read(i)
            items.append(item)
        if i >= len(tokens):
            raise DataLayerError("unbalanced '(' in strategy")
        return tuple(items), i + 1

    tree, end = read(0)
    if end != len(tokens):
        raise DataLayerError("trailing tokens after strategy")
    check_predicate(tree)
    return tree


def check_predicate(tree) -> None:
    if not isinstance(tree, tuple) or not tree:
        raise DataLayerError("strategy must be a predicate form")
    head, *rest = tree
    if head in ("and", "or"):
        require(len(rest) >= 1, f"{head} needs operands")
        for r in rest:
            check_predicate(r)
    elif head == "not":
        require(len(rest) == 1, "not takes one operand")
        check_predicate(rest[0])
    elif head in COMPARISONS:
        require(len(rest) == 2, f"{head} takes two operands")
        for r in rest:
            _check_value(r)
    else:
        raise DataLayerError(f"unknown predicate operator {head!r}")


def _check_value(v) -> None:
    if isinstance(v, Fraction) or v in VARIABLES:
        return
    if isinstance(v, tuple) and v and v[0] in ARITHMETIC and len(v) == 3:
        _check_value(v[1])
        _check_value(v[2])
        return
    raise DataLayerError(f"bad numeric operand {v!r}")


def format_sexpr(tree) -> str:
    if isinstance(tree, tuple):
        return "(" + " ".join(format_sexpr(t) for t in tree) + ")"
    if isinstance(tree, Fraction):
        return str(tree.numerator) if tree.denominator == 1 else f"{tree.numerator}/{tree.denominator}"
    return str(tree)


def _value(v, env):
    if isinstance(v, Fraction):
        return v
    if isinstance(v, str):
        return env[v]
    a, b = _value(v[1], env), _value(v[2], env)
    if a is None or b is None:
        return None
    return ARITHMETIC[v[0]](a, b)


def evaluate(tree, env: dict) -> bool:
    head, *rest = tree
    if head == "and":
        return all(evaluate(r, env) for r in rest)
    if head == "or":
        return any(evaluate(r, env) for r in rest)
    if head == "not":
        return not evaluate(rest[0], env)
    a, b = _value(rest[0], env), _value(rest[1], env)
    if a is None or b is None:
        return False
    return COMPARISONS[head](a, b)


# -- strategy and positions ----------------------------------------------------


def to_price(value) -> Fraction:
    try:
        price = Fraction(str(value))
    except (ValueError, ZeroDivisionError):
        raise DataLayerError(f"bad price {value!r}") from None
    require(price > 0, "price must be positive")
    return price


@dataclass(frozen=True)
class TradingStrategy:
    symbols: frozenset
    entry: tuple
    exit: tuple
    quantity: int
    ma_window: int = 20

    def __post_init__(self):
        require(self.quantity > 0, "quantity must be positive")
        require(self.ma_window > 0, "ma_window must be positive")

    def serialize(self) -> str:
        return "\n".join(
            [
                "symbols: " + " ".join(sorted(self.symbols)),
                f"quantity: {self.quantity}",
                f"ma_window: {self.ma_window}",
                "entry: " + format_sexpr(self.entry),
                "exit: " + format_sexpr(self.exit),
            ]
        )

    @classmethod
    def parse(cls, text: str) -> "TradingStrategy":
        fields: dict[str, str] = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition(":")
            require(bool(sep), f"bad strategy line {raw!r}")
            fields[key.strip().lower()] = value.strip()
        missing = {"symbols", "quantity", "entry", "exit"} - fields.keys()
        require(not missing, f"strategy missing {sorted(missing)}")
        return cls(
            frozenset(fields["symbols"].replace(",", " ").split()),
            parse_sexpr(fields["entry"]),
            parse_sexpr(fields["exit"]),
            int(fields["quantity"]),
            int(fields.get("ma_window", 20)),
        )


@dataclass
class Position:
    pos: int = 0
    posav: Fraction | None = None
    prices: deque = field(default_factory=deque)


@dataclass(frozen=True)
class Order:
    action: str  # NONE | BUY | SELL
    symbol: str
    quantity: int = 0
    price: Fraction = Fraction(0)

    def to_record(self) -> dict:
        return {"action": self.action, "symbol": self.symbol, "quantity": self.quantity, "price": str(self.price)}

    @classmethod
    def from_record(cls, rec) -> "Order":
        return cls(rec["action"], rec["symbol"], rec["quantity"], Fraction(rec["price"]))


class StockLayer(DataLayer):
    kind = "stock"
    ops = {
        "TickerEvent": OpSpec("TickerEvent"),
        "RetrieveMatches": OpSpec("RetrieveMatches", owner_only=True),
    }

    def __init__(self, strategy: TradingStrategy):
        self.strategy = strategy
        self.positions: dict[str, Position] = {}
        self.matches: list[Order] = []

    def _position(self, symbol: str) -> Position:
        if symbol not in self.positions:
            self.positions[symbol] = Position(prices=deque(maxlen=self.strategy.ma_window))
        return self.positions[symbol]

    def ticker_event(self, symbol: str, price) -> Order:
        price = to_price(price)
        if symbol not in self.strategy.symbols:
            return Order("NONE", symbol)
        p = self._position(symbol)
        p.prices.append(price)
        env = {"LP": price, "MA": sum(p.prices) / len(p.prices), "POS": Fraction(p.pos), "POSAV": p.posav}
        order = Order("NONE", symbol)
        q = self.strategy.quantity
        if p.pos > 0:
            if evaluate(self.strategy.exit, env):
                order = Order("SELL", symbol, p.pos, price)
                p.pos, p.posav = 0, None
        elif p.pos < q and evaluate(self.strategy.entry, env):
            buy = q - p.pos
            order = Order("BUY", symbol, buy, price)
            p.posav = ((p.posav or 0) * p.pos + price * buy) / q
            p.pos = q
        if order.action != "NONE":
            self.matches.append(order)
        return order

    def op_TickerEvent(self, ctx, symbol, price):
        return self.ticker_event(symbol, price).to_record()

    def op_RetrieveMatches(self, ctx):
        out = [m.to_record() for m in self.matches]
        self.matches = []
        return out

    # -- persistence --------------------------------------------------------

    def to_record(self):
        return {
            "strategy": self.strategy.serialize(),
            "positions": {
                s: [p.pos, None if p.posav is None else str(p.posav), [str(x) for x in p.prices]]
                for s, p in sorted(self.positions.items())
            },
            "matches": [m.to_record() for m in self.matches],
        }

    @classmethod
    def from_record(cls, rec):
        layer = cls(TradingStrategy.parse(rec["strategy"]))
        for symbol, (pos, posav, prices) in rec["positions"].items():
            layer.positions[symbol] = Position(
                pos,
                None if posav is None else Fraction(posav),
                deque((Fraction(x) for x in prices), maxlen=layer.strategy.ma_window),
            )
        layer.matches = [Order.from_record(m) for m in rec["matches"]]
        return layer

    @classmethod
    def from_initial(cls, initial):
        if isinstance(initial, TradingStrategy):
            return cls(initial)
        if isinstance(initial, bytes):
            initial = initial.decode()
        if isinstance(initial, str):
            return cls(TradingStrategy.parse(initial))
        raise DataLayerError("stock capsule needs a trading strategy")

    def secret_material(self):
        s = self.strategy
        return [s.serialize().encode(), format_sexpr(s.entry).encode(), format_sexpr(s.exit).encode()]
