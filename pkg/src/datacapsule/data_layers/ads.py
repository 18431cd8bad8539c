"""Targeted-ads capsule over a private browsing history.

ChooseAd scores ads against the user's interest vector and reveals only the
winner.  GetInterestVector releases a Laplace-perturbed copy of the vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources

import numpy as np

from ..errors import DataLayerError
from .base import DataLayer, OpSpec, require

DEFAULT_V_MIN = 100
DEFAULT_EPSILON = Fraction(1, 100)
DEFAULT_Q_MAX = 5


def _frac(value) -> Fraction:
    try:
        return Fraction(str(value))
    except (ValueError, ZeroDivisionError):
        raise DataLayerError(f"bad number {value!r}") from None


# -- keyword -> category table --------------------------------------------------


@dataclass(frozen=True)
class CategoryTable:
    categories: tuple[str, ...]
    weights: dict  # keyword -> {category: Fraction}

    @classmethod
    def parse(cls, text: str) -> "CategoryTable":
        weights: dict[str, dict[str, Fraction]] = {}
        categories: list[str] = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            require(len(parts) == 3, f"keyword table line {lineno}: expected 3 fields")
            keyword, category, weight = parts
            w = _frac(weight)
            require(w >= 0, f"keyword table line {lineno}: negative weight")
            weights.setdefault(keyword, {})[category] = w
            if category not in categories:
                categories.append(category)
        return cls(tuple(categories), weights)

    @classmethod
    def default(cls) -> "CategoryTable":
        return cls.parse(resources.files(__package__).joinpath("data/keywords.tsv").read_text())

    def to_record(self):
        return [
            list(self.categories),
            {k: {c: str(w) for c, w in sorted(v.items())} for k, v in sorted(self.weights.items())},
        ]

    @classmethod
    def from_record(cls, rec) -> "CategoryTable":
        cats, weights = rec
        return cls(tuple(cats), {k: {c: Fraction(w) for c, w in v.items()} for k, v in weights.items()})


# -- history --------------------------------------------------------------------


@dataclass
class Page:
    site: str
    visits: int
    keywords: dict = field(default_factory=dict)  # keyword -> Fraction, sums to 1
    last_visit: int | None = None

    def __post_init__(self):
        require(self.visits >= 1, f"{self.site}: visit count must be at least 1")
        self.keywords = normalize(self.keywords)

    def line(self) -> str:
        kws = ",".join(f"{k}:{w}" for k, w in sorted(self.keywords.items()))
        cols = [self.site, str(self.visits), kws]
        if self.last_visit is not None:
            cols.append(str(self.last_visit))
        return "\t".join(cols)


def normalize(weights: dict) -> dict:
    weights = {k: _frac(w) for k, w in weights.items()}
    require(all(w >= 0 for w in weights.values()), "keyword weights must be non-negative")
    total = sum(weights.values())
    if total == 0:
        return {}
    return {k: w / total for k, w in weights.items() if w}


def parse_history_line(line: str) -> Page:
    parts = line.rstrip("\n").split("\t")
    require(len(parts) in (3, 4), f"bad history line {line!r}")
    site, visits, kws = parts[:3]
    weights = {}
    for item in filter(None, kws.split(",")):
        k, sep, w = item.partition(":")
        require(bool(sep), f"bad keyword weight {item!r}")
        weights[k] = weights.get(k, 0) + _frac(w)
    stamp = int(parts[3]) if len(parts) == 4 and parts[3] else None
    try:
        count = int(visits)
    except ValueError:
        raise DataLayerError(f"bad visit count {visits!r}") from None
    return Page(site, count, weights, stamp)


def _as_page(entry) -> Page:
    if isinstance(entry, Page):
        return entry
    if isinstance(entry, str):
        return parse_history_line(entry)
    if isinstance(entry, (list, tuple)) and len(entry) in (3, 4):
        return Page(entry[0], int(entry[1]), dict(entry[2]), entry[3] if len(entry) == 4 else None)
    raise DataLayerError(f"bad history entry {entry!r}")


# -- Algorithm 1 ----------------------------------------------------------------


def interest_vector(pages, table: CategoryTable) -> dict[str, Fraction]:
    """U_c = sum_{i,k} V_i WK_ik DB_kc / sum_i V_i, exactly."""
    total = sum(p.visits for p in pages)
    u = {c: Fraction(0) for c in table.categories}
    if total == 0:
        return u
    for p in pages:
        for k, wk in p.keywords.items():
            for c, db in table.weights.get(k, {}).items():
                u[c] += p.visits * wk * db
    return {c: v / total for c, v in u.items()}


def choose_ad(ads, interest: dict[str, Fraction]) -> int:
    """Index of the highest-scoring ad; ties go to the lowest index."""
    require(len(ads) >= 1, "need at least one ad")
    best, best_score = 0, None
    for i, cats in enumerate(ads):
        score = Fraction(0)
        for c, w in cats.items():
            w = _frac(w)
            require(w >= 0, "ad category weights must be non-negative")
            score += w * interest.get(c, 0)
        if best_score is None or score > best_score:
            best, best_score = i, score
    return best


# -- differential privacy -----------------------------------------------------------


def noise_scale(v_min: int, epsilon: Fraction) -> Fraction:
    return 1 / (Fraction(v_min) * Fraction(epsilon))


def uniforms(n: int, randbytes) -> np.ndarray:
    """n doubles in the open interval (0, 1) from a byte source."""
    raw = np.frombuffer(randbytes(8 * n), dtype=">u8") >> np.uint64(11)
    return (raw.astype(np.float64) + 0.5) / float(1 << 53)


def laplace_noise(n: int, scale: float, randbytes) -> np.ndarray:
    """Symmetric exponential draws by inverse CDF."""
    u = uniforms(n, randbytes) - 0.5
    return -float(scale) * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def perturb(values: np.ndarray, scale: float, randbytes) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) + laplace_noise(len(values), scale, randbytes)


def renormalize(noisy: np.ndarray) -> np.ndarray:
    clamped = np.clip(noisy, 0.0, None)
    total = clamped.sum()
    if total <= 0:
        return np.full(len(noisy), 1.0 / len(noisy)) if len(noisy) else clamped
    return clamped / total


# -- the layer ------------------------------------------------------------------


class AdsLayer(DataLayer):
    kind = "ads"
    ops = {
        "ChooseAd": OpSpec("ChooseAd"),
        "GetInterestVector": OpSpec("GetInterestVector", amount=lambda args: 1),
        "UpdateHistory": OpSpec("UpdateHistory", owner_only=True),
    }

    def __init__(
        self,
        pages=(),
        table: CategoryTable | None = None,
        v_min: int = DEFAULT_V_MIN,
        epsilon=DEFAULT_EPSILON,
        q_max: int = DEFAULT_Q_MAX,
        queries_used: int = 0,
        clicks=(),
    ):
        self.table = table or CategoryTable.default()
        self.pages: dict[str, Page] = {}
        for p in pages:
            self._merge(_as_page(p))
        self.v_min = int(v_min)
        self.epsilon = _frac(epsilon)
        require(self.v_min >= 1 and self.epsilon > 0, "v_min and epsilon must be positive")
        self.q_max = int(q_max)
        self.queries_used = int(queries_used)
        self.clicks = [tuple(c) for c in clicks]

    @property
    def sigma(self) -> Fraction:
        return noise_scale(self.v_min, self.epsilon)

    @property
    def total_visits(self) -> int:
        return sum(p.visits for p in self.pages.values())

    def interest(self) -> dict[str, Fraction]:
        return interest_vector(self.pages.values(), self.table)

    def _merge(self, page: Page) -> None:
        old = self.pages.get(page.site)
        if old is None:
            self.pages[page.site] = page
            return
        # Visit-weighted keyword mix keeps every page normalized.
        mixed = {}
        for src in (old, page):
            for k, w in src.keywords.items():
                mixed[k] = mixed.get(k, 0) + w * src.visits
        stamps = [s for s in (old.last_visit, page.last_visit) if s is not None]
        self.pages[page.site] = Page(page.site, old.visits + page.visits, mixed, max(stamps) if stamps else None)

    # -- operations -------------------------------------------------------------

    def op_ChooseAd(self, ctx, ads):
        """``ads`` is a list of ``[ad_id, {category: weight}]``."""
        require(isinstance(ads, list) and ads, "need at least one ad")
        ids, cats = [], []
        for entry in ads:
            require(isinstance(entry, (list, tuple)) and len(entry) == 2, "ad entry is [id, weights]")
            ids.append(entry[0])
            cats.append(dict(entry[1]))
        return ids[choose_ad(cats, self.interest())]

    def op_GetInterestVector(self, ctx):
        require(self.total_visits >= self.v_min, f"history has fewer than {self.v_min} visits")
        require(self.queries_used < self.q_max, "interest-vector query budget exhausted")
        randbytes = ctx.services.random_bytes if ctx.services is not None else None
        require(randbytes is not None, "GetInterestVector needs trusted randomness")
        cats = list(self.table.categories)
        u = np.array([float(self.interest()[c]) for c in cats])
        vector = renormalize(perturb(u, float(self.sigma), randbytes))
        self.queries_used += 1
        return [[c, repr(float(v))] for c, v in zip(cats, vector)]

    def op_UpdateHistory(self, ctx, entries=()):
        for e in entries:
            self._merge(_as_page(e))
        return len(entries)

    # -- transformations -----------------------------------------------------

    def filter(self, criterion) -> "AdsLayer":
        """Keep pages matching ``since``/``until`` (visit timestamps),
        ``keywords_any``, ``categories_any`` and ``sites``."""
        criterion = dict(criterion or {})
        unknown = set(criterion) - {"since", "until", "keywords_any", "categories_any", "sites"}
        require(not unknown, f"unknown filter keys {sorted(unknown)}")
        since, until = criterion.get("since"), criterion.get("until")
        kws = set(criterion.get("keywords_any") or ())
        sites = set(criterion.get("sites") or ())
        cats = set(criterion.get("categories_any") or ())

        def keep(p: Page) -> bool:
            if since is not None and (p.last_visit is None or p.last_visit < since):
                return False
            if until is not None and (p.last_visit is None or p.last_visit > until):
                return False
            if kws and not kws & p.keywords.keys():
                return False
            if cats and not any(w > 0 and c in cats for k in p.keywords for c, w in self.table.weights.get(k, {}).items()):
                return False
            return not sites or p.site in sites

        kept = [p for p in self.pages.values() if keep(p)]
        return AdsLayer(kept, self.table, self.v_min, self.epsilon, self.q_max, 0, self.clicks)

    def contribution(self):
        items = [["visit", p.site, p.visits] for p in self.pages.values()]
        items += [["click", *c] for c in self.clicks]
        return items

    # -- persistence ---------------------------------------------------------

    def history_text(self) -> str:
        return "\n".join(p.line() for p in self.pages.values())

    def to_record(self):
        return {
            "history": [p.line() for p in self.pages.values()],
            "table": self.table.to_record(),
            "v_min": self.v_min,
            "epsilon": str(self.epsilon),
            "q_max": self.q_max,
            "queries_used": self.queries_used,
            "clicks": [list(c) for c in self.clicks],
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            rec["history"], CategoryTable.from_record(rec["table"]), rec["v_min"], rec["epsilon"],
            rec["q_max"], rec["queries_used"], rec["clicks"],
        )

    @classmethod
    def from_initial(cls, initial):
        if initial is None:
            return cls()
        if isinstance(initial, dict):
            initial = dict(initial)
            table = initial.pop("table", None)
            if isinstance(table, str):
                table = CategoryTable.parse(table)
            return cls(initial.pop("history", ()), table, **initial)
        if isinstance(initial, bytes):
            initial = initial.decode()
        if isinstance(initial, str):
            return cls(**_parse_history_file(initial))
        raise DataLayerError("ads capsule needs a browsing history")

    def secret_material(self):
        return [self.history_text().encode()] if self.pages else []


def _parse_history_file(text: str) -> dict:
    """History lines, plus optional ``@name=value`` parameter lines."""
    params: dict = {"pages": []}
    for raw in text.splitlines():
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        if raw.startswith("@"):
            name, sep, value = raw[1:].partition("=")
            require(bool(sep) and name in ("v_min", "epsilon", "q_max"), f"bad parameter line {raw!r}")
            params[name] = value.strip()
            continue
        params["pages"].append(parse_history_line(raw))
    return params


def dp_epsilon(v_min: int, sigma) -> float:
    """The privacy level delivered by scale ``sigma`` at ``v_min`` visits."""
    return 1.0 / (v_min * float(sigma))
