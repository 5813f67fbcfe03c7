import pytest
import torch

from qexrl import expansion_format as fmt
from qexrl.catalog import generate_catalog, generate_workload
from qexrl.policy import Architecture, PolicyModel, Vocab
from qexrl.search import RelevanceOracle, build_index


@pytest.fixture(scope="session")
def catalog():
    return generate_catalog(7)


@pytest.fixture(scope="session")
def workload(catalog):
    return generate_workload(catalog, 1, 100)


@pytest.fixture(scope="session")
def index(catalog):
    return build_index(catalog)


@pytest.fixture(scope="session")
def oracle(catalog):
    return RelevanceOracle(catalog)


TINY_WORDS = ("red", "blue", "shoe", "lamp", "big")


def tiny_model(seed=0, dtype=torch.float64, words=TINY_WORDS, d_model=8, context=40,
               scale=0.5) -> PolicyModel:
    """About 1.5k parameters: small enough for coordinate-wise finite differences."""
    vocab = Vocab.from_words(words)
    arch = Architecture(len(vocab), d_model=d_model, n_layers=1, n_heads=2, d_ff=16,
                        context_length=context)
    return PolicyModel.init(arch, vocab, seed=seed, scale=scale, dtype=dtype)


@pytest.fixture
def tiny():
    return tiny_model()


def tiny_prompt(model, query=("red", "shoe")):
    return model.vocab.encode([*fmt.INSTRUCTION, fmt.QUERY_TAG, *query, fmt.RESPOND])
