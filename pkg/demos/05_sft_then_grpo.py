# %% [markdown]
# # SFT warm-up, then GRPO
#
# A cut-down version of the full experiment: smaller catalog, a few hundred
# teacher traces and a handful of GRPO steps, so it finishes in about a
# minute.  The full-size run lives in tests/test_acceptance.py.

# %%
import sys
import tempfile
from pathlib import Path

from qexrl.catalog import generate_catalog, generate_workload
from qexrl.policy import Architecture, PolicyModel, Vocab
from qexrl.search import RelevanceOracle, build_index
from qexrl.trainer import TrainConfig, make_sft_corpus, run_training

catalog = generate_catalog(seed=7, n_items=200)
train, heldout = generate_workload(catalog, seed=1, n_queries=60).split(40)
index, oracle = build_index(catalog), RelevanceOracle(catalog)
vocab = Vocab.from_words(catalog.vocabulary)
model = PolicyModel.init(Architecture(len(vocab)), vocab, seed=0)

# %% [markdown]
# Teacher traces only look at the retrieved context: prefix the query with
# the commonest attribute values that same-category items carry and the query
# leaves out.

# %%
ex = make_sft_corpus(catalog, train, index, 1, seed=0)[0]
print("query :", " ".join(ex.query))
print("target:", " ".join(ex.target))

# %%
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
cfg = TrainConfig(steps=10, sft_examples=300, checkpoint_every=10)
result = run_training(cfg, catalog, train, index, oracle, model, out_dir=out,
                      on_step=lambda m: print(f"step {m['step']:3d}  reward {m['mean_reward']:.3f}  "
                                             f"valid {m['valid_frac']:.2f}  kl {m['mean_kl']:.4f}"))
print("sft loss first/last batch:", round(result.sft_curve[0], 3), round(result.sft_curve[-1], 3))
print("checkpoints in", out, sorted(p.name for p in out.glob("*.ckpt")))
