# %% [markdown]
# # Prompt and output format
#
# The policy sees retrieved items followed by the query, and must answer with
# a think block and a JSON list of expansions.  Anything malformed is caught
# by the parser, which never raises on bad input.

# %%
from qexrl import expansion_format as fmt
from qexrl.catalog import generate_catalog
from qexrl.search import build_index, search

catalog = generate_catalog(seed=7)
index = build_index(catalog)
query = ("red", "sneaker")
ctx, prompt = fmt.build_prompt(query, search(index, query, 10), catalog, max_items=3)
print(" ".join(prompt))

# %%
good = fmt.serialize_output("want glossy ones", [("glossy", "red", "sneaker"), ("red", "sneaker")])
print(good)
parsed = fmt.parse_output(good, catalog.vocabulary)
print(parsed)
# the expansion that repeats the query is dropped
print(fmt.to_expansion_set(query, parsed))

# %% [markdown]
# A few ways to get it wrong.  Each maps to a named violation.

# %%
bad = [
    "<answer>{\"expansion\": []}</answer>",
    good.replace("</answer>", ""),
    fmt.serialize_output("", [("red",)] * 9),
    b"\xff\xfe<think>",
]
for raw in bad:
    p = fmt.parse_output(raw, catalog.vocabulary)
    print(p.valid, p.violation)
