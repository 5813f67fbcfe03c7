"""Query expansion trained by reinforcement learning against search-engine feedback.

A BM25 engine over a synthetic catalog and a deterministic relevance oracle
score each expansion set; a small autoregressive policy is warmed up on
teacher traces, then optimized with GRPO.
"""
from .catalog import Catalog, Intent, Item, QueryWorkload, generate_catalog, generate_workload
from .errors import (CheckpointError, ConfigError, ContractError, InputError, NumericError,
                     ParseError, QexError, SchemaError)
from .expansion_format import ExpansionSet, ParsedOutput, Violation, parse_output
from .reward import RewardBreakdown, compute_reward
from .search import Index, RelevanceOracle, build_index, search

__version__ = "0.1.0"
