import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnlab import autodiff as ad
from unlearnlab.engine import TrainConfig, lm_pairs, train_lm
from unlearnlab.errors import ContractViolation
from unlearnlab.models import (
    CausalLM,
    MaskedLM,
    ModelConfig,
    forward_causal,
    generate_greedy,
    generate_greedy_batch,
    load_model,
    make_batch,
    predict_masked,
    save_model,
    sequence_logprob,
)
from unlearnlab.tokenizer import Tokenizer

from .conftest import zero_head

# ---------------------------------------------------------------- tokenizer


def test_tokenize_examples():
    tok = Tokenizer(["cat", "the"])
    assert tok.encode("") == []
    assert tok.encode("the cat") == [tok.stoi["the"], tok.stoi["cat"]]
    assert tok.encode("zyxxyz") == [tok.unk_id]


def test_specials_never_collide_and_mapping_is_bijective():
    tok = Tokenizer(["a", "b", "b", "c"])
    assert set(tok.special_ids).isdisjoint(tok.stoi[w] for w in "abc")
    assert len(set(tok.stoi.values())) == len(tok.itos)
    assert all(tok.stoi[tok.itos[i]] == i for i in range(len(tok.itos)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["the", "Cat", "sat", "on", "mat", "?", ",", "it's"]), min_size=0, max_size=12))
def test_decode_encode_roundtrip(words):
    text = " ".join(words)
    tok = Tokenizer.from_texts([text, "x"])
    assert tok.decode(tok.encode(text)) == " ".join(text.lower().split())


# ---------------------------------------------------------------- forward


def _cfg(v=12, **kw):
    return ModelConfig(vocab_size=v, d_model=8, n_layers=2, n_heads=2, max_len=16, d_ff=16, **kw)


def test_zeroed_head_gives_zero_logits():
    m = zero_head(CausalLM(_cfg(), seed=0))
    np.testing.assert_array_equal(forward_causal(m, [2, 5, 6]), np.zeros((3, 12)))


def test_logits_shape_and_length_limits():
    m = CausalLM(_cfg(), seed=0)
    assert forward_causal(m, [2, 5, 6, 7]).shape == (4, 12)
    with pytest.raises(ValueError):
        forward_causal(m, list(range(17)))
    with pytest.raises(ValueError):
        forward_causal(m, [])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 9), st.integers(0, 2**31 - 1))
def test_causality_under_future_perturbation(t, seed):
    m = CausalLM(_cfg(), seed=0)
    rng = np.random.default_rng(seed)
    toks = rng.integers(0, 12, size=10)
    other = toks.copy()
    other[t + 1 :] = rng.integers(0, 12, size=10 - t - 1)
    a, b = forward_causal(m, toks), forward_causal(m, other)
    np.testing.assert_array_equal(a[: t + 1], b[: t + 1])


def test_masked_lm_sees_both_directions():
    m = MaskedLM(_cfg(), seed=0)
    a = forward_causal(m, [2, 5, 6, 7])
    b = forward_causal(m, [2, 5, 6, 8])
    assert not np.allclose(a[0], b[0])


def test_softmax_rows_sum_to_one():
    m = CausalLM(_cfg(), seed=3)
    logits = forward_causal(m, [2, 5, 6, 7, 1])
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    q = ad.softmax(ad.Tensor(logits)).data
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)


# golden values recorded from the first audited run of this seeded model
GOLDEN_LOGITS = [0.05545739935566355, -0.026462594873725508, 0.04186603702616422, -0.06721003227956736]


def test_golden_logits():
    m = CausalLM(_cfg(), seed=42)
    logits = forward_causal(m, [2, 5, 6, 7])
    assert logits.shape == (4, 12)
    np.testing.assert_allclose(logits[1, :4], GOLDEN_LOGITS, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- log-probs


def test_uniform_sequence_logprob():
    m = zero_head(CausalLM(_cfg(v=4), seed=0))
    lp = sequence_logprob(m, [1], [0, 1])
    np.testing.assert_allclose(lp, [math.log(0.25)] * 2, atol=1e-12)
    assert abs(lp.sum() - (-2.772589)) < 1e-6


def test_sequence_logprob_matches_brute_force():
    m = CausalLM(_cfg(), seed=5)
    x, y = [5, 6], [7, 8, 9]
    lp = sequence_logprob(m, x, y)
    full = [2, *x, *y]
    logits = forward_causal(m, full)
    want = []
    for j, tok in enumerate(y):
        row = logits[len(x) + j]
        p = np.exp(row - row.max())
        want.append(math.log(p[tok] / p.sum()))
    np.testing.assert_allclose(lp, want, atol=1e-12)
    assert np.all(lp <= 0) and np.all(np.exp(lp) > 0)
    with pytest.raises(ContractViolation):
        sequence_logprob(m, x, [])


def test_sequence_logprob_chain_rule():
    m = CausalLM(_cfg(), seed=6)
    x, y = [5], [7, 8, 9, 10]
    whole = sequence_logprob(m, x, y).sum()
    steps = sum(sequence_logprob(m, x + y[:j], [y[j]])[0] for j in range(len(y)))
    assert abs(whole - steps) < 1e-12


def test_make_batch_masks_align_with_answer():
    b = make_batch([([5, 6], [7, 8, 9]), ([5], [7])], masks=[(1, 0, 1), (0,)])
    assert b.answer.sum() == 4 and b.uw.sum() == 2 and b.gw.sum() == 2
    assert not (b.uw & ~b.answer).any()
    with pytest.raises(ContractViolation):
        make_batch([([5], [7, 8])], masks=[(1,)])
    with pytest.raises(ContractViolation):
        make_batch([])


# ---------------------------------------------------------------- masked prediction


def test_predict_masked_tie_break_and_contract():
    m = zero_head(MaskedLM(_cfg(), seed=0))
    assert predict_masked(m, [5], [6, 4, 7]) == 0
    assert predict_masked(m, [5], [6, 4, 7], top_k=3) == [0, 1, 2]
    with pytest.raises(ContractViolation):
        predict_masked(m, [5], [6, 7])
    with pytest.raises(ContractViolation):
        predict_masked(m, [5], [4, 4])


def _mlm_fit(model, seqs, epochs=150, lr=0.01):
    """Overfit a masked LM by masking each position of each sequence."""
    from unlearnlab.engine import AdamState, adamw_step

    params = model.parameters()
    state = AdamState.zeros([p.data for p in params])
    rows, targets, where = [], [], []
    for s in seqs:
        for i in range(1, len(s) - 1):
            r = list(s)
            r[i] = 4
            rows.append(r)
            targets.append(s[i])
            where.append(i)
    tokens = np.array(rows)
    for _ in range(epochs):
        lp = ad.log_softmax(model(tokens))
        picked = ad.take_along_last(lp, np.array([[t] * tokens.shape[1] for t in targets]))
        sel = np.zeros(tokens.shape)
        sel[np.arange(len(rows)), where] = 1.0 / len(rows)
        loss = ad.sum(picked * sel) * -1.0
        adamw_step([p.data for p in params], ad.grad(loss, params), state, lr, 0.0)
    return model


def test_masked_lm_memorizes_and_uses_context():
    # two sentences that differ only in their first word: the masked last word depends on it
    a = [2, 5, 7, 9, 3]
    b = [2, 6, 7, 10, 3]
    m = _mlm_fit(MaskedLM(_cfg(), seed=1), [a, b])
    for s in (a, b):
        for i in range(1, len(s) - 1):
            ym = list(s[1:-1])
            ym[i - 1] = 4
            assert predict_masked(m, [], ym) == s[i]
    assert predict_masked(m, [], [5, 7, 4]) == 9
    assert predict_masked(m, [], [6, 7, 4]) == 10


# ---------------------------------------------------------------- generation


class _Words:
    def __init__(self, q, a):
        from unlearnlab.corpus import AnnotatedSample, QASample

        self.s = AnnotatedSample(QASample("s", q, a, "retain"), tuple([False] * len(a.split())))


def test_greedy_generation_memorized_sentence():
    tok = Tokenizer(["a", "b", "c"])
    m = CausalLM(ModelConfig(vocab_size=tok.vocab_size, d_model=16, n_layers=2, n_heads=2, max_len=8, d_ff=32), seed=0)
    sample = _Words("a", "b c").s
    train_lm(m, lm_pairs(tok, [sample]), TrainConfig(lr=0.01, epochs=60, batch_size=1, warmup=False))
    out = generate_greedy(m, tok.encode("a"), 5)
    assert tok.to_words(out) == ["b", "c"]
    assert generate_greedy(m, tok.encode("a"), 0) == []
    assert generate_greedy(m, tok.encode("a"), 5) == out
    # re-encoding the generated text and generating again gives the same tokens
    assert generate_greedy(m, tok.encode(tok.decode(tok.encode("a"))), 5) == out
    assert generate_greedy_batch(m, [tok.encode("a"), tok.encode("a b")], 5)[0] == out
    with pytest.raises(ContractViolation):
        generate_greedy(m, [5], -1)


def test_batched_generation_matches_single():
    m = CausalLM(_cfg(), seed=9)
    prompts = [[5], [6, 7, 8], [9, 10]]
    batch = generate_greedy_batch(m, prompts, 6)
    for p, g in zip(prompts, batch):
        assert generate_greedy_batch(m, [p], 6)[0] == g


# ---------------------------------------------------------------- checkpoints


def test_save_load_bit_exact(tmp_path):
    tok = Tokenizer(["a", "b"])
    for cls in (CausalLM, MaskedLM):
        m = cls(ModelConfig(vocab_size=tok.vocab_size, d_model=8, n_heads=2, d_ff=16, max_len=8), seed=4)
        p = tmp_path / f"{cls.__name__}.npz"
        save_model(p, m, tok, extra={"k": 1})
        m2, tok2, extra = load_model(p)
        assert type(m2) is cls and tok2.itos == tok.itos and extra == {"k": 1}
        assert m.get_flat().tobytes() == m2.get_flat().tobytes()


def test_flat_roundtrip():
    m = CausalLM(_cfg(), seed=0)
    v = m.get_flat()
    m2 = CausalLM(_cfg(), seed=1)
    m2.set_flat(v)
    assert m2.get_flat().tobytes() == v.tobytes()
    with pytest.raises(ValueError):
        m2.set_flat(v[:-1])
