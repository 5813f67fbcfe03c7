# %% [markdown]
# # Search-engine-in-the-loop reward
#
# A candidate expansion set is scored by running it through the index: a
# relevance ratio over the top results plus a small bonus for widening recall.
# Echoing the query back earns exactly 1 + lambda.

# %%
from qexrl.catalog import generate_catalog, generate_workload
from qexrl.expansion_format import ExpansionSet, parse_output
from qexrl.reward import compute_reward
from qexrl.search import RelevanceOracle, build_index

catalog = generate_catalog(seed=7)
index, oracle = build_index(catalog), RelevanceOracle(catalog)
query, intent = next(iter(generate_workload(catalog, seed=1, n_queries=1)))
print(" ".join(query), intent)

# %%
print(compute_reward(index, oracle, intent, ExpansionSet(query)))

# %% [markdown]
# Spelling out a hidden constraint should help relevance.

# %%
attr, value = intent.constraints[0]
better = ExpansionSet(query, ((value, intent.category), (*query, value)))
rb = compute_reward(index, oracle, intent, better)
print(f"r_rel={rb.r_rel:.3f} r_size={rb.r_size:.3f} total={rb.total:.3f}")

# %% [markdown]
# Anything that fails the format gate scores zero, however good the words.

# %%
broken = parse_output('<think></think><answer>{"expansion": ["x"]', catalog.vocabulary)
print(compute_reward(index, oracle, intent, broken, query).total)
