"""Prompt serialization and the ``<think>``/``<answer>`` output contract.

Canonical policy output::

    <think>free text</think><answer>{"expansion": ["black wireless mouse", "ergonomic mouse"]}</answer>

Only whitespace may surround the two blocks.  The answer body must be a JSON
object whose single key ``"expansion"`` maps to a list of strings.  Anything
else is invalid and earns zero reward downstream.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass

from .catalog import Catalog
from .errors import ContractError, InputError
from .search import SearchResult

PROMPT_VERSION = "qexrl-prompt/1"

MAX_CONTEXT_ITEMS = 10
MAX_EXPANSIONS = 5
MAX_EXPANSION_TOKENS = 12

# Output-side special tokens.
THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"
# JSON punctuation is folded into separator tokens so no token is ambiguous
# about whether it opens or closes a string.
JSON_OPEN, JSON_SEP, JSON_CLOSE = '{"expansion": ["', '", "', '"]}'
JSON_EMPTY = '{"expansion": []}'
EOS, PAD, UNK = "<eos>", "<pad>", "<unk>"

# Prompt-side special tokens.
TASK, QUERY_TAG, ITEM_TAG, SEP, EQ, RESPOND = "<task>", "<query>", "<item>", "|", "=", "<respond>"
INSTRUCTION = (TASK, "expand")

STRUCTURAL = (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE, JSON_OPEN, JSON_SEP, JSON_CLOSE,
              JSON_EMPTY)
SPECIAL_TOKENS = (PAD, EOS, UNK, *STRUCTURAL, TASK, QUERY_TAG, ITEM_TAG, SEP, EQ, RESPOND)


class Violation(str, enum.Enum):
    NoThinkBlock = "NoThinkBlock"
    NoAnswerBlock = "NoAnswerBlock"
    MalformedJson = "MalformedJson"
    MissingExpansionField = "MissingExpansionField"
    UnsupportedAttribute = "UnsupportedAttribute"
    TooManyExpansions = "TooManyExpansions"
    ExpansionTooLong = "ExpansionTooLong"
    EmptyExpansion = "EmptyExpansion"
    TrailingGarbage = "TrailingGarbage"


@dataclass(frozen=True)
class PromptContext:
    query: tuple[str, ...]
    context_items: tuple[tuple[tuple[str, ...], tuple[tuple[str, str], ...]], ...]


@dataclass(frozen=True)
class ParsedOutput:
    think_text: str
    expansions: tuple[tuple[str, ...], ...]
    valid: bool
    violation: Violation | None = None


@dataclass(frozen=True)
class ExpansionSet:
    original: tuple[str, ...]
    expansions: tuple[tuple[str, ...], ...] = ()

    @property
    def queries(self) -> list[tuple[str, ...]]:
        return [self.original, *self.expansions]

    def __len__(self):
        return 1 + len(self.expansions)


def item_line(title, attributes) -> list[str]:
    """``<item> title | name = value ...`` listing only values the title omits."""
    shown = set(title)
    line = [ITEM_TAG, *title, SEP]
    for name, value in attributes:
        if value not in shown:
            line += [name, EQ, value]
    return line


def build_prompt(query, result: SearchResult, catalog: Catalog,
                 max_items: int = MAX_CONTEXT_ITEMS, max_input_tokens: int = 160):
    """Serialize the retrieved items and the query into prompt tokens.

    Layout: instruction header, one ``<item>`` line per retrieved item, then
    ``<query>`` and the query tokens, then ``<respond>``.  Items beyond
    ``max_items`` are dropped, then trailing items are dropped until the
    prompt fits ``max_input_tokens``.  A prompt that cannot fit even without
    context raises.
    """
    query = tuple(query)
    tail = [QUERY_TAG, *query, RESPOND]
    budget = max_input_tokens - len(INSTRUCTION) - len(tail)
    if budget < 0:
        raise InputError(f"query needs {len(INSTRUCTION) + len(tail)} tokens > {max_input_tokens}")
    ctx = []
    body = []
    for item_id in result.ids[:max_items]:
        it = catalog.item(item_id)
        line = item_line(it.title, it.attributes)
        if len(body) + len(line) > budget:
            break
        body += line
        ctx.append((it.title, it.attributes))
    return PromptContext(query, tuple(ctx)), [*INSTRUCTION, *body, *tail]


def serialize_output(think_text: str, expansions) -> str:
    body = json.dumps({"expansion": [" ".join(e) for e in expansions]})
    # "</" can never appear raw inside the answer block
    body = body.replace("</", "<\\/")
    return f"{THINK_OPEN}{think_text}{THINK_CLOSE}{ANSWER_OPEN}{body}{ANSWER_CLOSE}"


def output_tokens(think_tokens, expansions) -> list[str]:
    """Token form of :func:`serialize_output` for word-level think text."""
    toks = [THINK_OPEN, *think_tokens, THINK_CLOSE, ANSWER_OPEN]
    if not expansions:
        toks.append(JSON_EMPTY)
    for i, e in enumerate(expansions):
        toks += [JSON_SEP if i else JSON_OPEN, *e]
    if expansions:
        toks.append(JSON_CLOSE)
    toks.append(ANSWER_CLOSE)
    return toks


_NO_SPACE = frozenset(SPECIAL_TOKENS) - {EOS, PAD}


def detokenize(tokens) -> str:
    """Surface text of generated tokens: words are space-separated, specials glue."""
    out = []
    prev_word = False
    for t in tokens:
        if t == EOS:
            break
        if t == PAD:
            continue
        if t in _NO_SPACE:
            out.append(t)
            prev_word = False
        else:
            if prev_word:
                out.append(" ")
            out.append(t)
            prev_word = True
    return "".join(out)


def _invalid(v, think=""):
    return ParsedOutput(think, (), False, v)


class _DuplicateKey(ValueError):
    pass


def _pairs(pairs):
    keys = [k for k, _ in pairs]
    if len(set(keys)) != len(keys):
        raise _DuplicateKey(keys)
    return dict(pairs)


def _reject_constant(name):
    raise ValueError(name)


def parse_output(raw, vocabulary=None, max_expansions: int = MAX_EXPANSIONS,
                 max_expansion_tokens: int = MAX_EXPANSION_TOKENS) -> ParsedOutput:
    """Validate a raw policy output; never raises.

    ``vocabulary``, when given, requires every expansion to contain at least
    one known token; an expansion with none is reported as ``EmptyExpansion``.
    """
    try:
        return _parse(raw, vocabulary, max_expansions, max_expansion_tokens)
    except Exception:  # totality: deep nesting, odd encodings, anything else
        return _invalid(Violation.MalformedJson)


def _parse(raw, vocabulary, max_expansions, max_tokens):
    text = raw.decode("utf-8", errors="replace") if isinstance(raw, (bytes, bytearray)) else str(raw)

    i = text.find(THINK_OPEN)
    if i < 0:
        return _invalid(Violation.NoThinkBlock)
    if text[:i].strip():
        return _invalid(Violation.TrailingGarbage)
    j = text.find(THINK_CLOSE, i + len(THINK_OPEN))
    if j < 0:
        return _invalid(Violation.NoThinkBlock)
    think = text[i + len(THINK_OPEN):j]

    rest = text[j + len(THINK_CLOSE):]
    a = rest.find(ANSWER_OPEN)
    if a < 0:
        return _invalid(Violation.NoAnswerBlock, think)
    if rest[:a].strip():
        return _invalid(Violation.TrailingGarbage, think)
    e = rest.find(ANSWER_CLOSE, a + len(ANSWER_OPEN))
    if e < 0:
        return _invalid(Violation.NoAnswerBlock, think)
    if rest[e + len(ANSWER_CLOSE):].strip():
        return _invalid(Violation.TrailingGarbage, think)
    body = rest[a + len(ANSWER_OPEN):e]

    try:
        obj = json.loads(body, object_pairs_hook=_pairs, parse_constant=_reject_constant)
    except (ValueError, RecursionError):
        return _invalid(Violation.MalformedJson, think)
    if not isinstance(obj, dict):
        return _invalid(Violation.MalformedJson, think)
    if "expansion" not in obj:
        return _invalid(Violation.MissingExpansionField, think)
    if len(obj) != 1:
        return _invalid(Violation.UnsupportedAttribute, think)
    values = obj["expansion"]
    if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
        return _invalid(Violation.MalformedJson, think)
    if len(values) > max_expansions:
        return _invalid(Violation.TooManyExpansions, think)
    expansions = []
    for v in values:
        toks = tuple(v.lower().split())
        if not toks:
            return _invalid(Violation.EmptyExpansion, think)
        if len(toks) > max_tokens:
            return _invalid(Violation.ExpansionTooLong, think)
        if vocabulary is not None and not any(t in vocabulary for t in toks):
            return _invalid(Violation.EmptyExpansion, think)
        expansions.append(toks)
    return ParsedOutput(think, tuple(expansions), True, None)


def to_expansion_set(query, parsed: ParsedOutput) -> ExpansionSet:
    if not parsed.valid:
        raise ContractError(f"cannot build an expansion set from an invalid parse ({parsed.violation})")
    q = tuple(t.lower() for t in query)
    seen = {q}
    out = []
    for e in parsed.expansions:
        e = tuple(t.lower() for t in e)
        if e not in seen:
            seen.add(e)
            out.append(e)
    return ExpansionSet(q, tuple(out))
