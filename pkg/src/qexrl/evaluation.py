"""Offline evaluation: retrieval gain, relevance gain, percent-positive over repeated runs."""
from __future__ import annotations

import collections
import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import expansion_format as fmt
from .catalog import Catalog, QueryWorkload
from .expansion_format import ExpansionSet
from .policy import PolicyModel, sample_group
from .reward import compute_reward
from .search import Index, RelevanceOracle, search

REPORT_VERSION = "qexrl-report/1"
CSV_COLUMNS = ("system", "run", "pct_positive_ret", "pct_positive_rel", "mean_dret",
               "mean_drel", "valid_rate")


@dataclass(frozen=True)
class EvalRecord:
    query: tuple[str, ...]
    run_index: int
    dret: int
    drel: float
    n_expansions: int
    valid: bool
    reward: float = 0.0
    empty_retrieval: bool = False


@dataclass
class SystemReport:
    name: str
    runs: int
    pct_positive_ret: float
    pct_positive_ret_std: float
    pct_positive_rel: float
    pct_positive_rel_std: float
    mean_dret: float
    mean_drel: float
    valid_rate: float
    mean_reward: float
    empty_retrievals: int = 0
    per_run: list[dict] = field(default_factory=list)


@dataclass
class EvalReport:
    systems: list[SystemReport]

    def system(self, name) -> SystemReport:
        for s in self.systems:
            if s.name == name:
                return s
        raise KeyError(name)


# -- generators ------------------------------------------------------------------
#
# A generator is called as gen(query, run_index, seed) and returns an
# ExpansionSet, or None when the output was invalid.  Generators may also
# expose generate_runs(query, runs, seed) to produce every run in one batch.

def identity_generator(query, run_index=0, seed=0):
    return ExpansionSet(tuple(query))


class PolicyGenerator:
    """Expands queries by sampling a policy on the retrieval-grounded prompt."""

    def __init__(self, model: PolicyModel, catalog: Catalog, index: Index, temperature: float = 0.5,
                 max_new_tokens: int = 96, greedy: bool = False,
                 max_items: int = fmt.MAX_CONTEXT_ITEMS, max_input_tokens: int = 160):
        self.model = model
        self.catalog = catalog
        self.index = index
        self.temperature = temperature
        self.max_new_tokens = max_new_tokens
        self.greedy = greedy
        self.max_items = max_items
        self.max_input_tokens = max_input_tokens

    def prompt_ids(self, query):
        res = search(self.index, query, self.max_items)
        _, toks = fmt.build_prompt(query, res, self.catalog, self.max_items, self.max_input_tokens)
        return self.model.vocab.encode(toks)

    def parse(self, rollout):
        text = fmt.detokenize(self.model.vocab.decode(rollout.generated_ids))
        return fmt.parse_output(text, self.catalog.vocabulary)

    def generate_runs_raw(self, query, runs, seed=0):
        return sample_group(self.model, self.prompt_ids(tuple(query)), runs, self.temperature,
                            self.max_new_tokens, rng_seed=seed, greedy=self.greedy)

    def generate_runs(self, query, runs, seed=0):
        query = tuple(query)
        out = []
        for r in self.generate_runs_raw(query, runs, seed):
            p = self.parse(r)
            out.append(fmt.to_expansion_set(query, p) if p.valid else None)
        return out

    def __call__(self, query, run_index=0, seed=0):
        return self.generate_runs(query, 1, seed=seed + run_index)[0]


def cooccurrence(catalog: Catalog) -> dict[str, collections.Counter]:
    """Per-token counts of other tokens sharing an item (each item counted once)."""
    co = collections.defaultdict(collections.Counter)
    for it in catalog.items:
        toks = sorted(set(it.tokens()))
        for a in toks:
            for b in toks:
                if a != b:
                    co[a][b] += 1
    return co


def lexical_neighbor_baseline(query, index: Index, catalog: Catalog, n_expansions: int,
                              cooc=None) -> ExpansionSet:
    """Substitute one query token with the catalog token that co-occurs most with the rest.

    For a one-token query the neighbour of the token itself is used.  Candidates
    are ranked by co-occurrence count, then slot position, then token.
    """
    query = tuple(query)
    if n_expansions < 0:
        raise ValueError("n_expansions must be >= 0")
    co = cooc if cooc is not None else cooccurrence(catalog)
    cands = []
    for i in range(len(query)):
        context = [t for j, t in enumerate(query) if j != i] or [query[i]]
        scores = collections.Counter()
        for c in context:
            scores.update(co.get(c, {}))
        best = None
        for tok, n in sorted(scores.items()):
            if tok in query or n <= 0:
                continue
            if best is None or n > best[1]:
                best = (tok, n)
        if best:
            cands.append((-best[1], i, best[0], query[:i] + (best[0],) + query[i + 1:]))
    cands.sort()
    out = []
    for *_, exp in cands:
        if exp not in out:
            out.append(exp)
    return ExpansionSet(query, tuple(out[:n_expansions]))


class LexicalNeighborGenerator:
    def __init__(self, index, catalog, n_expansions=3):
        self.index, self.catalog, self.n = index, catalog, n_expansions
        self.cooc = cooccurrence(catalog)

    def __call__(self, query, run_index=0, seed=0):
        return lexical_neighbor_baseline(query, self.index, self.catalog, self.n, self.cooc)


# -- harness -----------------------------------------------------------------------

def _avg_rel(oracle, intent, ids):
    return oracle.mean(intent, ids)


def evaluate_query(index, oracle, query, intent, exp_set, k_eval, run_index, lam=0.1, eps=1e-4,
                   k_rel=10, k_size=100) -> EvalRecord:
    query = tuple(query)
    if exp_set is None:
        return EvalRecord(query, run_index, 0, 0.0, 0, False, 0.0)
    orig = set(search(index, query, k_eval).ids)
    exp = set()
    for q in exp_set.queries:
        exp.update(search(index, q, k_eval).ids)
    dret = len(exp - orig)
    drel = _avg_rel(oracle, intent, exp) - _avg_rel(oracle, intent, orig)
    reward = compute_reward(index, oracle, intent, exp_set, lam=lam, eps=eps, k_rel=k_rel,
                            k_size=k_size).total
    return EvalRecord(query, run_index, dret, drel, len(exp_set.expansions), True, reward,
                      not orig or not exp)


def evaluate_system(generator, workload: QueryWorkload, index: Index, oracle: RelevanceOracle,
                    runs: int = 5, k_eval: int = 100, seed: int = 0, name: str = "system",
                    lam: float = 0.1, eps: float = 1e-4, k_rel: int = 10, k_size: int = 100):
    """Run ``generator`` ``runs`` times per query; returns (SystemReport, records).

    Percent-positive figures are computed within each run, then summarised as
    mean and population std across runs.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    records = []
    for qi, (query, intent) in enumerate(workload):
        qseed = seed * 1_000_003 + qi
        try:
            if hasattr(generator, "generate_runs"):
                sets = generator.generate_runs(query, runs, qseed)
            else:
                sets = [generator(query, r, qseed) for r in range(runs)]
        except Exception:
            sets = [None] * runs
        for r, s in enumerate(sets):
            records.append(evaluate_query(index, oracle, query, intent, s, k_eval, r, lam, eps,
                                          k_rel, k_size))
    return summarize(name, records, runs), records


def summarize(name, records, runs) -> SystemReport:
    per_run = []
    for r in range(runs):
        rec = [x for x in records if x.run_index == r]
        n = max(len(rec), 1)
        per_run.append({
            "system": name, "run": r,
            "pct_positive_ret": 100.0 * sum(x.dret > 0 for x in rec) / n,
            "pct_positive_rel": 100.0 * sum(x.drel > 0 for x in rec) / n,
            "mean_dret": float(np.mean([x.dret for x in rec])) if rec else 0.0,
            "mean_drel": float(np.mean([x.drel for x in rec])) if rec else 0.0,
            "valid_rate": sum(x.valid for x in rec) / n,
        })
    ret = np.array([p["pct_positive_ret"] for p in per_run])
    rel = np.array([p["pct_positive_rel"] for p in per_run])
    return SystemReport(
        name=name, runs=runs,
        pct_positive_ret=float(ret.mean()), pct_positive_ret_std=float(ret.std()),
        pct_positive_rel=float(rel.mean()), pct_positive_rel_std=float(rel.std()),
        mean_dret=float(np.mean([x.dret for x in records])) if records else 0.0,
        mean_drel=float(np.mean([x.drel for x in records])) if records else 0.0,
        valid_rate=float(np.mean([x.valid for x in records])) if records else 0.0,
        mean_reward=float(np.mean([x.reward for x in records])) if records else 0.0,
        empty_retrievals=sum(x.empty_retrieval for x in records),
        per_run=per_run,
    )


# -- report emission -------------------------------------------------------------

def report_to_dict(report: EvalReport) -> dict:
    return {"version": REPORT_VERSION, "systems": [asdict(s) for s in report.systems]}


def report_from_dict(d) -> EvalReport:
    if d.get("version") != REPORT_VERSION:
        raise ValueError(f"unsupported report version {d.get('version')!r}")
    return EvalReport([SystemReport(**s) for s in d["systems"]])


def format_table(report: EvalReport) -> str:
    head = ("system", "%pos dRet", "%pos dRel", "mean dRet", "mean dRel", "valid", "reward")
    rows = [head]
    for s in report.systems:
        rows.append((s.name,
                     f"{s.pct_positive_ret:.2f} ± {s.pct_positive_ret_std:.2f}",
                     f"{s.pct_positive_rel:.2f} ± {s.pct_positive_rel_std:.2f}",
                     f"{s.mean_dret:.2f}", f"{s.mean_drel:.4f}",
                     f"{100 * s.valid_rate:.2f}", f"{s.mean_reward:.4f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    lines = []
    for k, r in enumerate(rows):
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, path, format: str = "table-text") -> None:
    path = Path(path)
    if format == "json":
        path.write_text(json.dumps(report_to_dict(report), indent=2) + "\n", encoding="utf-8")
    elif format == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for s in report.systems:
                for p in s.per_run:
                    w.writerow([p["system"], p["run"], f"{p['pct_positive_ret']:.2f}",
                                f"{p['pct_positive_rel']:.2f}", f"{p['mean_dret']:.4f}",
                                f"{p['mean_drel']:.6f}", f"{p['valid_rate']:.4f}"])
    elif format == "table-text":
        path.write_text(format_table(report), encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {format!r}")
