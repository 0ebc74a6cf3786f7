import numpy as np
import pytest

from unlearnlab.corpus import generate_corpus, vocabulary_texts
from unlearnlab.models import CausalLM, MaskedLM, ModelConfig
from unlearnlab.tokenizer import Tokenizer


def zero_head(model):
    """Make every logit zero, i.e. a uniform next-token distribution."""
    model.params["head"].data[:] = 0.0
    return model


@pytest.fixture(scope="session")
def small_bundle():
    return generate_corpus(seed=3, n_authors=40, forget_fraction=0.1, n_general=10)


@pytest.fixture(scope="session")
def small_tok(small_bundle):
    return Tokenizer.from_texts(vocabulary_texts(small_bundle))


@pytest.fixture
def tiny_causal(small_tok):
    cfg = ModelConfig(vocab_size=small_tok.vocab_size, d_model=16, n_layers=2, n_heads=2, max_len=48, d_ff=32)
    return CausalLM(cfg, seed=0)


@pytest.fixture
def tiny_masked(small_tok):
    cfg = ModelConfig(vocab_size=small_tok.vocab_size, d_model=16, n_layers=2, n_heads=2, max_len=48, d_ff=32)
    return MaskedLM(cfg, seed=0)


def perturb(model, scale=0.05, seed=1):
    """A copy of ``model`` with every weight nudged: a stand-in for an unlearned model."""
    rng = np.random.default_rng(seed)
    other = model.clone()
    for t in other.params.values():
        t.data = t.data + rng.normal(0, scale, size=t.shape)
    return other


@pytest.fixture(scope="session")
def trained_pair(small_bundle, small_tok):
    """Original (all splits) and retained (no forget) models on the small corpus."""
    from unlearnlab.engine import TrainConfig, lm_pairs, train_lm

    cfg = ModelConfig(vocab_size=small_tok.vocab_size, d_model=32, n_layers=2, n_heads=4, max_len=48, d_ff=64)
    tc = TrainConfig(lr=5e-3, epochs=30, batch_size=16, seed=0)
    out = {}
    for role, splits in (("original", ("forget", "retain", "general")), ("retained", ("retain", "general"))):
        m = CausalLM(cfg, seed=0)
        train_lm(m, lm_pairs(small_tok, [a for s in splits for a in small_bundle[s]]), tc)
        out[role] = m
    return out


# one line per acceptance criterion, printed after the run
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
