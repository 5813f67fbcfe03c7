# %% [markdown]
# # Offline evaluation: retrieval gain and relevance gain
#
# Compare systems on held-out queries.  For each query we count the items the
# expanded set retrieves that the bare query did not (dRet), and the change in
# mean relevance of the top results (dRel).  Pass a checkpoint path to include
# a trained policy; demo 05 writes some.

# %%
import sys

from qexrl.catalog import generate_catalog, generate_workload
from qexrl.evaluation import (EvalReport, LexicalNeighborGenerator, PolicyGenerator,
                              evaluate_system, format_table, identity_generator)
from qexrl.policy import load_checkpoint
from qexrl.search import RelevanceOracle, build_index

catalog = generate_catalog(seed=7, n_items=200)
_, heldout = generate_workload(catalog, seed=1, n_queries=60).split(40)
index, oracle = build_index(catalog), RelevanceOracle(catalog)

# %%
systems = [
    ("identity", identity_generator),
    ("lexical", LexicalNeighborGenerator(index, catalog, 3)),
]
for path in sys.argv[1:]:
    systems.append((path.rsplit("/", 1)[-1], PolicyGenerator(load_checkpoint(path), catalog, index, 0.5)))

reports = []
for name, gen in systems:
    rep, records = evaluate_system(gen, heldout, index, oracle, runs=3, name=name)
    reports.append(rep)
print(format_table(EvalReport(reports)))

# %% [markdown]
# The identity system never gains anything, and the lexical baseline is
# deterministic, so its run-to-run std is exactly zero.

# %%
q = heldout.queries[0]
print(" ".join(q), "->", LexicalNeighborGenerator(index, catalog, 3)(q).expansions)
