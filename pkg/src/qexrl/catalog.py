"""Synthetic product catalog and query workload.

Everything here is a pure function of a seed and a few size parameters, so a
catalog can be regenerated instead of shipped.  Items carry a category term,
a full attribute assignment, and a short title that mentions only some of the
attribute values.  Queries name a category and at most one of the attribute
values their hidden intent asks for, which is what makes them vague.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, SchemaError

CATEGORY_TERMS = (
    "mouse", "keyboard", "chair", "lamp", "backpack", "jacket", "sneaker",
    "kettle", "blender", "speaker", "headphone", "monitor", "desk", "mug",
    "tent", "watch", "wallet", "pillow", "blanket", "bottle", "drone",
    "camera", "tripod", "charger", "helmet", "glove", "scarf", "sofa",
    "mattress", "printer",
)

ATTRIBUTE_VALUES = {
    "color": ("black", "white", "red", "blue", "green", "grey"),
    "material": ("leather", "cotton", "steel", "bamboo", "wool", "plastic"),
    "size": ("small", "medium", "large", "compact", "oversized", "mini"),
    "style": ("vintage", "modern", "rustic", "minimalist", "classic", "sporty"),
    "connectivity": ("wireless", "wired", "bluetooth", "usb", "rechargeable", "corded"),
    "feature": ("ergonomic", "waterproof", "foldable", "adjustable", "portable", "silent"),
    "pattern": ("striped", "plaid", "floral", "solid", "checkered", "camo"),
    "finish": ("matte", "glossy", "brushed", "polished", "textured", "satin"),
}

FILLER_STEMS = (
    "pro", "max", "lite", "plus", "ultra", "prime", "edge", "core", "flex",
    "nova", "zen", "aero", "terra", "luna", "sol", "vita", "orbit", "pulse",
    "apex", "echo",
)
FILLER_SUFFIXES = ("", "x", "on", "ix", "ar", "um", "et")


@dataclass(frozen=True)
class Item:
    item_id: int
    title: tuple[str, ...]
    attributes: tuple[tuple[str, str], ...]
    category: str

    @property
    def attribute_map(self) -> dict[str, str]:
        return dict(self.attributes)

    def tokens(self) -> list[str]:
        """Indexed text: title tokens followed by attribute values."""
        return list(self.title) + [value for _, value in self.attributes]


@dataclass(frozen=True)
class Catalog:
    items: tuple[Item, ...]
    vocabulary: frozenset[str]
    attribute_schema: dict[str, frozenset[str]]
    seed: int
    category_attributes: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __len__(self):
        return len(self.items)

    def item(self, item_id: int) -> Item:
        return self._by_id[item_id]

    @property
    def _by_id(self) -> dict[int, Item]:
        cached = self.__dict__.get("_by_id_cache")
        if cached is None:
            cached = {it.item_id: it for it in self.items}
            object.__setattr__(self, "_by_id_cache", cached)
        return cached

    @property
    def categories(self) -> list[str]:
        return sorted({it.category for it in self.items})

    def validate(self) -> None:
        seen = set()
        for it in self.items:
            _check_item(it, self.attribute_schema, self.vocabulary)
            if it.item_id in seen:
                raise SchemaError(f"duplicate item_id {it.item_id}")
            seen.add(it.item_id)


@dataclass(frozen=True)
class Intent:
    category: str
    constraints: tuple[tuple[str, str], ...]

    def satisfied_by(self, item: Item) -> bool:
        attrs = item.attribute_map
        return item.category == self.category and all(
            attrs.get(k) == v for k, v in self.constraints)


@dataclass(frozen=True)
class QueryWorkload:
    queries: tuple[tuple[str, ...], ...]
    intents: tuple[Intent, ...]
    seed: int

    def __len__(self):
        return len(self.queries)

    def __iter__(self):
        return iter(zip(self.queries, self.intents))

    def split(self, n_first: int) -> tuple["QueryWorkload", "QueryWorkload"]:
        a = QueryWorkload(self.queries[:n_first], self.intents[:n_first], self.seed)
        b = QueryWorkload(self.queries[n_first:], self.intents[n_first:], self.seed)
        return a, b


def _check_item(item, schema, vocabulary):
    if not item.title:
        raise SchemaError(f"item {item.item_id} has an empty title")
    for name, value in item.attributes:
        if name not in schema:
            raise SchemaError(f"item {item.item_id}: unknown attribute {name!r}")
        if value not in schema[name]:
            raise SchemaError(f"item {item.item_id}: value {value!r} not allowed for {name!r}")
    if vocabulary:
        for tok in (*item.title, item.category):
            if tok not in vocabulary:
                raise SchemaError(f"item {item.item_id}: token {tok!r} outside vocabulary")


def _filler_pool(n):
    words = [s + x for x in FILLER_SUFFIXES for s in FILLER_STEMS]
    return words[:n]


def generate_catalog(seed: int, n_items: int = 500, n_categories: int = 10,
                     attrs_per_category: int = 4, vocab_size: int = 200,
                     title_len: tuple[int, int] = (4, 10)) -> Catalog:
    """Build a catalog of ``n_items`` items over ``n_categories`` categories.

    Each category draws ``attrs_per_category`` attribute names from a fixed
    pool; attribute values are shared across categories, so a value such as
    ``black`` retrieves items from several categories.  Filler tokens pad the
    vocabulary up to ``vocab_size``.
    """
    if n_items < 1:
        raise ConfigError(f"n_items must be >= 1, got {n_items}")
    if not 1 <= n_categories <= len(CATEGORY_TERMS):
        raise ConfigError(f"n_categories must be in [1, {len(CATEGORY_TERMS)}], got {n_categories}")
    if not 1 <= attrs_per_category <= len(ATTRIBUTE_VALUES):
        raise ConfigError(f"attrs_per_category must be in [1, {len(ATTRIBUTE_VALUES)}]")
    lo, hi = title_len
    if not 2 <= lo <= hi:
        raise ConfigError(f"bad title length range {title_len}")

    rng = np.random.default_rng(seed)
    cats = [CATEGORY_TERMS[i] for i in rng.choice(len(CATEGORY_TERMS), n_categories, replace=False)]
    attr_names = sorted(ATTRIBUTE_VALUES)
    cat_attrs = {}
    for c in cats:
        picked = rng.choice(len(attr_names), attrs_per_category, replace=False)
        cat_attrs[c] = tuple(attr_names[i] for i in sorted(picked))
    used_attrs = sorted({a for names in cat_attrs.values() for a in names})
    schema = {a: frozenset(ATTRIBUTE_VALUES[a]) for a in used_attrs}

    n_fixed = len(cats) + len(used_attrs) + sum(len(schema[a]) for a in used_attrs)
    n_filler = vocab_size - n_fixed
    if n_filler < 1:
        raise ConfigError(f"vocab_size {vocab_size} too small, need > {n_fixed}")
    pool = _filler_pool(len(FILLER_STEMS) * len(FILLER_SUFFIXES))
    if n_filler > len(pool):
        raise ConfigError(f"vocab_size {vocab_size} too large, at most {n_fixed + len(pool)}")
    fillers = sorted(pool[i] for i in rng.choice(len(pool), n_filler, replace=False))

    # Value popularity is skewed per category so some values dominate the
    # context a query sees; the skew is what a policy can exploit.
    popularity = {}
    for c in cats:
        for a in cat_attrs[c]:
            w = rng.dirichlet(np.ones(len(ATTRIBUTE_VALUES[a])) * 0.8)
            popularity[c, a] = w

    items = []
    for item_id in range(n_items):
        c = cats[int(rng.integers(len(cats)))]
        attrs = []
        for a in cat_attrs[c]:
            values = ATTRIBUTE_VALUES[a]
            attrs.append((a, values[int(rng.choice(len(values), p=popularity[c, a]))]))
        length = int(rng.integers(lo, hi + 1))
        mentioned = [v for _, v in attrs if rng.random() < 0.6][: length - 1]
        n_fill = length - 1 - len(mentioned)
        fill = [fillers[int(i)] for i in rng.integers(len(fillers), size=n_fill)]
        title = tuple(fill[: n_fill // 2] + mentioned + [c] + fill[n_fill // 2:])
        items.append(Item(item_id, title, tuple(attrs), c))

    vocab = frozenset(cats) | frozenset(used_attrs) | frozenset(
        v for a in used_attrs for v in schema[a]) | frozenset(fillers)
    return Catalog(tuple(items), vocab, schema, seed, cat_attrs)


def generate_workload(catalog: Catalog, seed: int, n_queries: int,
                      n_constraints: int = 2) -> QueryWorkload:
    """Sample vague queries together with the intents they under-specify.

    A query is the category term, optionally preceded by one of the intent's
    attribute values; the other constraint(s) stay hidden.  Intents that no
    item satisfies are redrawn.
    """
    if len(catalog) == 0:
        raise ConfigError("catalog is empty")
    if n_queries < 0:
        raise ConfigError(f"n_queries must be >= 0, got {n_queries}")
    rng = np.random.default_rng([seed, catalog.seed])
    by_cat = {}
    for it in catalog.items:
        by_cat.setdefault(it.category, []).append(it)
    cats = sorted(by_cat)
    queries, intents = [], []
    while len(queries) < n_queries:
        c = cats[int(rng.integers(len(cats)))]
        # Drawing the assignment from a real item guarantees satisfiability.
        anchor = by_cat[c][int(rng.integers(len(by_cat[c])))]
        k = min(n_constraints, len(anchor.attributes))
        picked = sorted(int(i) for i in rng.choice(len(anchor.attributes), k, replace=False))
        constraints = tuple(anchor.attributes[i] for i in picked)
        intent = Intent(c, constraints)
        if not any(intent.satisfied_by(it) for it in by_cat[c]):
            continue
        if k >= 2 and rng.random() < 0.5:
            shown = constraints[int(rng.integers(k))][1]
            query = (shown, c)
        else:
            query = (c,)
        queries.append(query)
        intents.append(intent)
    return QueryWorkload(tuple(queries), tuple(intents), seed)


# -- persistence -------------------------------------------------------------

CATALOG_FORMAT = "qexrl-catalog/1"
WORKLOAD_FORMAT = "qexrl-workload/1"


def _dump(obj):
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def catalog_to_lines(catalog: Catalog) -> list[str]:
    header = {
        "format": CATALOG_FORMAT,
        "seed": catalog.seed,
        "vocabulary": sorted(catalog.vocabulary),
        "attribute_schema": {k: sorted(v) for k, v in sorted(catalog.attribute_schema.items())},
        "category_attributes": {k: list(v) for k, v in sorted(catalog.category_attributes.items())},
    }
    lines = [_dump(header)]
    for it in catalog.items:
        lines.append(_dump({
            "id": it.item_id,
            "title": list(it.title),
            "attributes": {k: v for k, v in it.attributes},
            "category": it.category,
        }))
    return lines


def save_catalog(catalog: Catalog, path) -> None:
    Path(path).write_text("\n".join(catalog_to_lines(catalog)) + "\n", encoding="utf-8")


def _read_records(path):
    text = Path(path).read_text(encoding="utf-8")
    if text and not text.endswith("\n"):
        # a final line without newline is a truncated write
        n = text.count("\n") + 1
        raise ParseError("file truncated (missing final newline)", path, n)
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append((lineno, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", path, lineno) from None
    if not records:
        raise ParseError("empty file", path, 1)
    return records


def _expect(cond, msg, path, lineno, cls=ParseError):
    if not cond:
        raise cls(msg, path, lineno)


def load_catalog(path) -> Catalog:
    records = _read_records(path)
    lineno, header = records[0]
    _expect(isinstance(header, dict) and header.get("format") == CATALOG_FORMAT,
            f"missing or unknown header, expected format {CATALOG_FORMAT!r}", path, lineno)
    try:
        schema = {k: frozenset(v) for k, v in header["attribute_schema"].items()}
        vocab = frozenset(header["vocabulary"])
        cat_attrs = {k: tuple(v) for k, v in header.get("category_attributes", {}).items()}
        seed = int(header["seed"])
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ParseError(f"bad header: {exc}", path, lineno) from None
    items = []
    seen = set()
    for lineno, rec in records[1:]:
        _expect(isinstance(rec, dict), "record is not an object", path, lineno)
        missing = {"id", "title", "attributes", "category"} - set(rec)
        _expect(not missing, f"missing fields {sorted(missing)}", path, lineno)
        attrs = rec["attributes"]
        _expect(isinstance(attrs, dict), "attributes must be an object", path, lineno)
        _expect(isinstance(rec["title"], list) and all(isinstance(t, str) for t in rec["title"]),
                "title must be a list of strings", path, lineno)
        _expect(isinstance(rec["id"], int), "id must be an integer", path, lineno)
        for name, value in attrs.items():
            _expect(name in schema, f"unknown attribute {name!r}", path, lineno, SchemaError)
            _expect(value in schema[name], f"value {value!r} not allowed for {name!r}",
                    path, lineno, SchemaError)
        _expect(rec["id"] not in seen, f"duplicate id {rec['id']}", path, lineno, SchemaError)
        seen.add(rec["id"])
        item = Item(rec["id"], tuple(rec["title"]), tuple(attrs.items()), rec["category"])
        try:
            _check_item(item, schema, vocab)
        except SchemaError as exc:
            raise SchemaError(str(exc), path, lineno) from None
        items.append(item)
    return Catalog(tuple(items), vocab, schema, seed, cat_attrs)


def save_workload(workload: QueryWorkload, path) -> None:
    lines = [_dump({"format": WORKLOAD_FORMAT, "seed": workload.seed})]
    for q, intent in workload:
        lines.append(_dump({
            "query": " ".join(q),
            "intent": {"category": intent.category,
                       "attributes": {k: v for k, v in intent.constraints}},
        }))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_workload(path) -> QueryWorkload:
    records = _read_records(path)
    lineno, header = records[0]
    _expect(isinstance(header, dict) and header.get("format") == WORKLOAD_FORMAT,
            f"missing or unknown header, expected format {WORKLOAD_FORMAT!r}", path, lineno)
    queries, intents = [], []
    for lineno, rec in records[1:]:
        _expect(isinstance(rec, dict) and "query" in rec and "intent" in rec,
                "record needs 'query' and 'intent'", path, lineno)
        intent = rec["intent"]
        _expect(isinstance(rec["query"], str) and isinstance(intent, dict)
                and isinstance(intent.get("category"), str)
                and isinstance(intent.get("attributes"), dict),
                "malformed query/intent", path, lineno)
        queries.append(tuple(rec["query"].split()))
        intents.append(Intent(intent["category"], tuple(intent["attributes"].items())))
    return QueryWorkload(tuple(queries), tuple(intents), int(header.get("seed", 0)))
