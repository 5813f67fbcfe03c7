"""Inverted-index BM25 search over a catalog, plus a graded relevance oracle."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from .catalog import Catalog, Intent, Item
from .errors import ConfigError, ParseError

K1 = 1.2
B = 0.75

INDEX_FORMAT = "qexrl-index/1"


@dataclass(frozen=True)
class SearchResult:
    ranked: tuple[tuple[int, float], ...]

    @property
    def ids(self) -> list[int]:
        return [i for i, _ in self.ranked]

    def __len__(self):
        return len(self.ranked)

    def top(self, k: int) -> "SearchResult":
        return SearchResult(self.ranked[:k])


@dataclass(eq=False)
class Index:
    postings: dict[str, tuple[tuple[int, int], ...]]
    doc_lengths: dict[int, int]
    avg_doc_length: float
    n_docs: int
    k1: float = K1
    b: float = B
    _cache: dict = field(default_factory=dict, repr=False)

    def __eq__(self, other):
        if not isinstance(other, Index):
            return NotImplemented
        return (self.postings == other.postings and self.doc_lengths == other.doc_lengths
                and self.avg_doc_length == other.avg_doc_length and self.n_docs == other.n_docs
                and self.k1 == other.k1 and self.b == other.b)

    def idf(self, token: str) -> float:
        df = len(self.postings.get(token, ()))
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))


def build_index(catalog: Catalog, k1: float = K1, b: float = B) -> Index:
    if len(catalog) == 0:
        raise ConfigError("cannot index an empty catalog")
    postings: dict[str, dict[int, int]] = {}
    lengths = {}
    for it in catalog.items:
        toks = it.tokens()
        lengths[it.item_id] = len(toks)
        for t in toks:
            row = postings.setdefault(t, {})
            row[it.item_id] = row.get(it.item_id, 0) + 1
    frozen = {t: tuple(sorted(row.items())) for t, row in sorted(postings.items())}
    avg = sum(lengths.values()) / len(lengths)
    return Index(frozen, lengths, avg, len(lengths), k1, b)


def _term_score(idf, tf, dl, avgdl, k1, b):
    return idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl))


def search(index: Index, query, k: int) -> SearchResult:
    """Top-``k`` items by BM25; ties go to the smaller item id."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    query = tuple(query)
    full = index._cache.get(query)
    if full is None:
        full = _rank_all(index, query)
        index._cache[query] = full
    return SearchResult(full[:k])


def _rank_all(index, query):
    scores: dict[int, float] = {}
    # Terms accumulate in query order so every document's score is summed in
    # the same sequence as an exhaustive scan would use.
    for t in query:
        plist = index.postings.get(t)
        if not plist:
            continue
        idf = index.idf(t)
        for doc, tf in plist:
            s = _term_score(idf, tf, index.doc_lengths[doc], index.avg_doc_length, index.k1, index.b)
            scores[doc] = scores.get(doc, 0.0) + s
    return tuple(sorted(scores.items(), key=lambda kv: (-kv[1], kv[0])))


def union_retrieve(index: Index, queries, k_per_query: int):
    """Union of each query's top-k ids, plus the per-query results."""
    queries = [tuple(q) for q in queries]
    if not queries:
        raise ConfigError("union_retrieve needs at least one query")
    results = [search(index, q, k_per_query) for q in queries]
    union = set()
    for r in results:
        union.update(r.ids)
    return union, results


class RelevanceOracle:
    """Deterministic graded relevance in [0, 4].

    Category match is worth 2; the remaining 2 points are split evenly over
    the intent's attribute constraints.
    """

    def __init__(self, catalog: Catalog):
        self.catalog = catalog

    def __call__(self, intent: Intent, item: Item | int) -> float:
        return relevance(intent, item if isinstance(item, Item) else self.catalog.item(item))

    def mean(self, intent: Intent, item_ids) -> float:
        ids = sorted(item_ids)
        if not ids:
            return 0.0
        total = 0.0
        for i in ids:
            total += self(intent, i)
        return total / len(ids)


def relevance(intent: Intent, item: Item) -> float:
    score = 2.0 if item.category == intent.category else 0.0
    if intent.constraints:
        attrs = item.attribute_map
        per = 2.0 / len(intent.constraints)
        for name, value in intent.constraints:
            if attrs.get(name) == value:
                score += per
    return min(max(score, 0.0), 4.0)


def avg_relevance(index: Index, oracle: RelevanceOracle, intent: Intent, queries, k: int) -> float:
    union, _ = union_retrieve(index, queries, k)
    return oracle.mean(intent, union)


# -- persistence -------------------------------------------------------------

def save_index(index: Index, path) -> None:
    import json
    lines = [json.dumps({"format": INDEX_FORMAT, "n_docs": index.n_docs,
                         "avg_doc_length": index.avg_doc_length, "k1": index.k1, "b": index.b,
                         "doc_lengths": sorted(index.doc_lengths.items())})]
    for t, plist in index.postings.items():
        lines.append(json.dumps([t, [list(p) for p in plist]]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_index(path) -> Index:
    import json
    text = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        header = json.loads(text[0])
    except (IndexError, json.JSONDecodeError):
        raise ParseError("missing index header", path, 1) from None
    if not isinstance(header, dict) or header.get("format") != INDEX_FORMAT:
        raise ParseError(f"expected format {INDEX_FORMAT!r}", path, 1)
    postings = {}
    for lineno, line in enumerate(text[1:], start=2):
        try:
            t, plist = json.loads(line)
            postings[t] = tuple((int(d), int(tf)) for d, tf in plist)
        except (ValueError, TypeError):
            raise ParseError("bad postings line", path, lineno) from None
    return Index(postings, {int(d): int(n) for d, n in header["doc_lengths"]},
                 float(header["avg_doc_length"]), int(header["n_docs"]),
                 float(header["k1"]), float(header["b"]))
