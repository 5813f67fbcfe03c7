# %% [markdown]
# # Synthetic catalog and BM25 search
#
# Everything downstream runs against a generated product catalog, so start
# by building one and poking at the index.

# %%
from qexrl.catalog import generate_catalog, generate_workload
from qexrl.search import RelevanceOracle, build_index, search, union_retrieve

catalog = generate_catalog(seed=7)
print(len(catalog.items), "items,", len(catalog.vocabulary), "words")
print(catalog.items[0])

# %% [markdown]
# Queries are deliberately vague: each hides an intent (a category plus a
# couple of attribute constraints) that the query text only partly states.

# %%
workload = generate_workload(catalog, seed=1, n_queries=5)
for q, intent in workload:
    print(" ".join(q), "->", intent)

# %%
index = build_index(catalog)
q, intent = next(iter(workload))
hits = search(index, q, k=5)
oracle = RelevanceOracle(catalog)
for item_id, s in hits.ranked:
    print(f"{item_id:4d}  bm25={s:6.3f}  rel={oracle(intent, item_id):.2f}")

# %% [markdown]
# A set of queries is retrieved jointly: the union of each query's top-k.

# %%
title = catalog.items[3].title
union, per_query = union_retrieve(index, [q, title], 100)
print([len(r) for r in per_query], "->", len(union), "items in the union")
