import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from qexrl import expansion_format as fmt
from qexrl.errors import ContractError, InputError
from qexrl.expansion_format import (ExpansionSet, ParsedOutput, Violation, build_prompt,
                                    detokenize, output_tokens, parse_output, serialize_output,
                                    to_expansion_set)
from qexrl.search import SearchResult, search

V = Violation


def _items_in(tokens):
    return tokens.count(fmt.ITEM_TAG)


def test_prompt_item_counts(catalog, index):
    q = (catalog.categories[0],)
    three = SearchResult(search(index, q, 3).ranked)
    ctx, toks = build_prompt(q, three, catalog)
    assert _items_in(toks) == 3 and len(ctx.context_items) == 3
    fifteen = search(index, q, 15)
    assert len(fifteen) == 15
    ctx, toks = build_prompt(q, fifteen, catalog, max_input_tokens=400)
    assert _items_in(toks) == 10 and len(ctx.context_items) == 10


def test_prompt_layout_and_determinism(catalog, index):
    q = ("black", catalog.categories[1])
    res = search(index, q, 10)
    a = build_prompt(q, res, catalog)
    assert a == build_prompt(q, res, catalog)
    toks = a[1]
    assert tuple(toks[:2]) == fmt.INSTRUCTION
    assert toks[-len(q) - 2:] == [fmt.QUERY_TAG, *q, fmt.RESPOND]
    assert len(toks) <= 160
    # context items are the top results, in rank order
    titles = [catalog.item(i).title for i in res.ids[:len(a[0].context_items)]]
    assert [t for t, _ in a[0].context_items] == titles


def test_prompt_budget(catalog, index):
    q = (catalog.categories[0],)
    res = search(index, q, 10)
    _, toks = build_prompt(q, res, catalog, max_input_tokens=40)
    assert len(toks) <= 40
    with pytest.raises(InputError):
        build_prompt(tuple(["x"] * 50), res, catalog, max_input_tokens=40)


def test_item_line_lists_only_unmentioned_values():
    line = fmt.item_line(("red", "mouse"), (("color", "red"), ("feature", "silent")))
    assert line == [fmt.ITEM_TAG, "red", "mouse", fmt.SEP, "feature", fmt.EQ, "silent"]


def test_minimal_valid():
    p = parse_output('<think>t</think><answer>{"expansion":["wireless vertical mouse"]}</answer>')
    assert p.valid and p.violation is None
    assert p.expansions == (("wireless", "vertical", "mouse"),)
    assert p.think_text == "t"


@pytest.mark.parametrize("raw,violation", [
    ('<answer>{"expansion":[]}</answer>', V.NoThinkBlock),
    ('<think>t<answer>{"expansion":[]}</answer>', V.NoThinkBlock),
    ('<think>t</think>', V.NoAnswerBlock),
    ('<think>t</think><answer>{"expansion":[]}', V.NoAnswerBlock),
    ('<think>t</think><answer>{"expansion":[}</answer>', V.MalformedJson),
    ('<think>t</think><answer>["a"]</answer>', V.MalformedJson),
    ('<think>t</think><answer>{"expansion":"a"}</answer>', V.MalformedJson),
    ('<think>t</think><answer>{"expansion":[1]}</answer>', V.MalformedJson),
    ('<think>t</think><answer>{"expansion":[],"expansion":[]}</answer>', V.MalformedJson),
    ('<think>t</think><answer>{"expansion":[NaN]}</answer>', V.MalformedJson),
    ('<think>t</think><answer>{"queries":["a"]}</answer>', V.MissingExpansionField),
    ('<think>t</think><answer>{"expansion":["a"],"color":"red"}</answer>', V.UnsupportedAttribute),
    ('<think>t</think><answer>{"expansion":["a","b","c","d","e","f"]}</answer>', V.TooManyExpansions),
    ('<think>t</think><answer>{"expansion":["' + " ".join(["w"] * 13) + '"]}</answer>',
     V.ExpansionTooLong),
    ('<think>t</think><answer>{"expansion":["  "]}</answer>', V.EmptyExpansion),
    ('x<think>t</think><answer>{"expansion":[]}</answer>', V.TrailingGarbage),
    ('<think>t</think>x<answer>{"expansion":[]}</answer>', V.TrailingGarbage),
    ('<think>t</think><answer>{"expansion":[]}</answer>x', V.TrailingGarbage),
])
def test_violations(raw, violation):
    p = parse_output(raw)
    assert not p.valid
    assert p.violation is violation
    assert p.expansions == ()


def test_whitespace_allowed_around_blocks():
    p = parse_output(' \n<think>a b</think>\n <answer>{"expansion": []}</answer>\n')
    assert p.valid and p.expansions == ()


def test_twelve_tokens_is_fine():
    p = parse_output('<think></think><answer>{"expansion":["' + " ".join(["w"] * 12) + '"]}</answer>')
    assert p.valid


def test_vocabulary_rule():
    raw = '<think></think><answer>{"expansion":["qq zz"]}</answer>'
    assert parse_output(raw).valid
    p = parse_output(raw, vocabulary={"red"})
    assert p.violation is V.EmptyExpansion
    assert parse_output(raw.replace("qq", "red"), vocabulary={"red"}).valid


def test_bytes_and_deep_nesting_do_not_raise():
    assert not parse_output(b"\xff\xfe<think>").valid
    deep = '<think></think><answer>' + "[" * 100000 + "]" * 100000 + '</answer>'
    assert parse_output(deep).violation is V.MalformedJson


def _mutate(s, rng):
    chars = list(s)
    for _ in range(rng.randint(1, 4)):
        op = rng.random()
        pos = rng.randrange(len(chars) + 1)
        if op < 0.4 and chars:
            del chars[min(pos, len(chars) - 1)]
        elif op < 0.8:
            chars.insert(pos, rng.choice('<>/{}[]",: \\ntaex\x00é'))
        elif chars:
            chars[min(pos, len(chars) - 1)] = chr(rng.randrange(0, 0x2FF))
    return "".join(chars)


def fuzz_inputs(n=1000, seed=0):
    rng = random.Random(seed)
    seed_text = serialize_output("red lamp", [("red", "lamp"), ("big", "lamp")])
    out = []
    for i in range(n):
        if i % 2:
            out.append(bytes(rng.randrange(256) for _ in range(rng.randrange(0, 80))))
        else:
            out.append(_mutate(seed_text, rng))
    return out


def test_fuzz_totality_and_gate(index, oracle, workload):
    from qexrl.reward import compute_reward
    q, intent = next(iter(workload))
    for raw in fuzz_inputs():
        p = parse_output(raw)
        assert isinstance(p, ParsedOutput)
        assert p.valid == (p.violation is None)
        if not p.valid:
            assert compute_reward(index, oracle, intent, p, q).total == 0.0


def test_detokenize_matches_serialize():
    exps = [("red", "lamp"), ("big", "blue", "lamp")]
    toks = output_tokens(["lamp", "color", "red"], exps)
    assert detokenize(toks) == serialize_output("lamp color red", exps)
    assert detokenize(output_tokens([], [])) == serialize_output("", [])
    assert detokenize([*toks, fmt.EOS, "junk"]) == detokenize(toks)


_word = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789-'\"\\/<>é", min_size=1, max_size=8)
_expansion = st.lists(_word, min_size=1, max_size=12).map(tuple)


@settings(max_examples=200, deadline=None)
@given(think=st.text(max_size=40).filter(lambda s: "</think>" not in s),
       exps=st.lists(_expansion, max_size=5))
def test_round_trip(think, exps):
    p = parse_output(serialize_output(think, exps))
    assert p.valid, p.violation
    assert p.expansions == tuple(exps)
    again = parse_output(serialize_output(p.think_text, p.expansions))
    assert again == p


def test_to_expansion_set():
    q = ("ergonomic", "mouse")
    one = ParsedOutput("", (("Ergonomic", "Mouse"),), True)
    assert to_expansion_set(q, one) == ExpansionSet(q, ())
    two = ParsedOutput("", (("a",), ("b",), ("A",)), True)
    s = to_expansion_set(q, two)
    assert len(s) == 3 and s.queries == [q, ("a",), ("b",)]
    assert len(to_expansion_set(q, ParsedOutput("", (), True))) == 1
    with pytest.raises(ContractError):
        to_expansion_set(q, ParsedOutput("", (), False, V.NoThinkBlock))


def test_json_escape_for_closing_tag():
    text = serialize_output("", [("a</answer>b",)])
    assert text.count("</answer>") == 1
    assert json.loads(text[text.index("{"):text.rindex("}") + 1])["expansion"] == ["a</answer>b"]
