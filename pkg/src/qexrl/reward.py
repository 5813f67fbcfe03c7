"""Search-feedback reward for a candidate expansion set.

    total = Rel(Y)/(Rel(q)+eps) + lam * Ret(Y)/(Ret(q)+eps)    if the output is valid
    total = 0                                                otherwise

``Rel`` is the mean oracle relevance over the deduplicated union of each
query's top ``k_rel`` items; ``Ret`` counts unique items over each query's
top ``k_size`` items.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .catalog import Intent
from .expansion_format import ExpansionSet, ParsedOutput, to_expansion_set
from .search import Index, RelevanceOracle, union_retrieve

LAMBDA = 0.1
EPSILON = 1e-4
K_REL = 10
K_SIZE = 100


@dataclass(frozen=True)
class RewardBreakdown:
    r_rel: float
    r_size: float
    valid: bool
    total: float
    baseline_rel: float
    baseline_ret: int
    union_rel: float
    union_ret: int


INVALID = RewardBreakdown(0.0, 0.0, False, 0.0, 0.0, 0, 0.0, 0)


def _rel_ret(index, oracle, intent, queries, k_rel, k_size):
    rel_union, _ = union_retrieve(index, queries, k_rel)
    size_union, _ = union_retrieve(index, queries, k_size)
    return oracle.mean(intent, rel_union), len(size_union)


def compute_reward(index: Index, oracle: RelevanceOracle, intent: Intent,
                   candidate: ExpansionSet | ParsedOutput | None, query=None,
                   lam: float = LAMBDA, eps: float = EPSILON,
                   k_rel: int = K_REL, k_size: int = K_SIZE) -> RewardBreakdown:
    """Reward one candidate.

    ``candidate`` may be an ExpansionSet, a ParsedOutput (then ``query`` is
    required), or None for a generation that failed outright.
    """
    if lam < 0 or eps <= 0 or k_rel < 1 or k_size < 1:
        raise ValueError("need lam >= 0, eps > 0, k_rel >= 1, k_size >= 1")
    if candidate is None:
        return INVALID
    if isinstance(candidate, ParsedOutput):
        if not candidate.valid:
            return INVALID
        if query is None:
            raise ValueError("query is required when rewarding a ParsedOutput")
        candidate = to_expansion_set(query, candidate)
    base_rel, base_ret = _rel_ret(index, oracle, intent, [candidate.original], k_rel, k_size)
    union_rel, union_ret = _rel_ret(index, oracle, intent, candidate.queries, k_rel, k_size)
    r_rel = union_rel / (base_rel + eps)
    r_size = union_ret / (base_ret + eps)
    return RewardBreakdown(r_rel, r_size, True, r_rel + lam * r_size,
                           base_rel, base_ret, union_rel, union_ret)


def batch_rewards(index, oracle, intent, candidates, query=None, lam=LAMBDA, eps=EPSILON,
                  k_rel=K_REL, k_size=K_SIZE) -> list[RewardBreakdown]:
    return [compute_reward(index, oracle, intent, c, query, lam, eps, k_rel, k_size)
            for c in candidates]


def reward_trace_line(query, candidate_idx: int, rb: RewardBreakdown) -> str:
    return json.dumps({"query": " ".join(query), "candidate_idx": candidate_idx,
                       "r_rel": rb.r_rel, "r_size": rb.r_size, "valid": rb.valid,
                       "total": rb.total})


def as_dict(rb: RewardBreakdown) -> dict:
    return asdict(rb)
