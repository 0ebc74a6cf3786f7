import logging
import math

import numpy as np
import pytest

from unlearnlab import autodiff as ad
from unlearnlab.corpus import AnnotatedSample, QASample
from unlearnlab.engine import (
    STEP_COLUMNS,
    AdamState,
    TrainConfig,
    _Loss,
    _run,
    adamw_step,
    lm_pairs,
    load_checkpoint,
    mean_nll,
    params_digest,
    reinforce,
    save_checkpoint,
    train_lm,
    unlearn,
    warmup_lr,
)
from unlearnlab.errors import ConfigError, TrainingDiverged
from unlearnlab.evaluation import knowmem
from unlearnlab.models import CausalLM, ModelConfig
from unlearnlab.objectives import ObjectiveConfig
from unlearnlab.tokenizer import Tokenizer

# ---------------------------------------------------------------- AdamW


def test_adamw_zero_gradient_cases():
    p = np.array([1.0, -2.0, 3.0])
    before = p.copy()
    adamw_step([p], [np.zeros(3)], AdamState.zeros([p]), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p, before)
    adamw_step([p], [np.zeros(3)], AdamState.zeros([p]), lr=0.1, weight_decay=0.01)
    np.testing.assert_allclose(p, before * (1 - 0.001), rtol=0, atol=1e-15)


def test_adamw_three_steps_against_hand_recurrence():
    lr, wd, b1, b2, eps = 0.05, 0.01, 0.9, 0.999, 1e-8
    grads = [0.5, -1.5, 2.0]
    p = np.array([1.0])
    state = AdamState.zeros([p])
    theta, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        adamw_step([p], [np.array([g])], state, lr, wd, b1, b2, eps)
        theta = theta - lr * wd * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert abs(p[0] - theta) < 1e-15
    assert state.t == 3


def test_adamw_rejects_nan():
    p = np.zeros(2)
    with pytest.raises(TrainingDiverged):
        adamw_step([p], [np.array([np.nan, 0.0])], AdamState.zeros([p]), 0.1)


def test_warmup_linear_then_flat():
    lrs = [warmup_lr(1.0, t, 4) for t in range(8)]
    assert lrs == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0, 1.0, 1.0]
    assert warmup_lr(0.3, 0, 4, warmup=False) == 0.3


def test_train_config_validation():
    for bad in ({"lr": 0.0}, {"epochs": -1}, {"batch_size": 0}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


# ---------------------------------------------------------------- loop guards


class _Stub:
    def __init__(self):
        self.params = {"p": ad.parameter([0.1])}

    def parameters(self):
        return list(self.params.values())

    def state_dict(self):
        return {"p": self.params["p"].data.copy()}


def _scripted(values):
    """A step function reporting preset per-epoch losses (zero gradient)."""
    it = iter(values)
    stub = _Stub()

    def step(idx, rng):
        return _Loss(ad.sum(stub.params["p"] * 0.0) + next(it))

    return stub, step


def test_regression_flagged_divergence_aborts(caplog):
    stub, step = _scripted([1.0, 1.04, 1.5])
    with caplog.at_level(logging.WARNING):
        _run(stub, 1, TrainConfig(epochs=3, batch_size=1), step, check_nll=True)
    assert sum("rose" in r.message for r in caplog.records) == 1
    stub, step = _scripted([1.0, 2.5])
    with pytest.raises(TrainingDiverged):
        _run(stub, 1, TrainConfig(epochs=2, batch_size=1), step, check_nll=True)


# ---------------------------------------------------------------- training


def _one_sentence():
    tok = Tokenizer(["who", "wrote", "it", "ada", "wrote", "the", "book", "."])
    s = AnnotatedSample(QASample("s", "who wrote it ?", "ada wrote the book .", "retain"), (True, False, False, False, False))
    return tok, s


def test_memorize_one_sentence():
    tok, s = _one_sentence()
    cfg = ModelConfig(vocab_size=tok.vocab_size, d_model=16, n_layers=2, n_heads=2, max_len=16, d_ff=32)
    m = CausalLM(cfg, seed=0)
    pairs = lm_pairs(tok, [s])
    traj = train_lm(m, pairs, TrainConfig(lr=0.01, epochs=50, batch_size=1))
    assert mean_nll(m, pairs) < 0.05
    assert len(traj) == 51 and traj[0].epoch == 0
    m2 = CausalLM(cfg, seed=0)
    train_lm(m2, pairs, TrainConfig(lr=0.01, epochs=50, batch_size=1))
    assert m.get_flat().tobytes() == m2.get_flat().tobytes()


def test_empty_dataset_rejected():
    tok, _ = _one_sentence()
    m = CausalLM(ModelConfig(vocab_size=tok.vocab_size, d_model=8, n_heads=2, d_ff=8, max_len=8), seed=0)
    with pytest.raises(ConfigError):
        train_lm(m, [], TrainConfig())


def test_retained_model_does_not_know_forget_set(trained_pair, small_tok, small_bundle):
    forget = knowmem(trained_pair["retained"], small_tok, small_bundle["forget"])
    retain = knowmem(trained_pair["retained"], small_tok, small_bundle["retain"])
    original = knowmem(trained_pair["original"], small_tok, small_bundle["forget"])
    # golden run: forget 0.617, retain 0.994, original on forget 0.978
    assert forget < retain - 0.25
    assert original > 0.9


def test_checkpoint_roundtrip(tmp_path, tiny_causal):
    traj = _run(tiny_causal, 3, TrainConfig(epochs=1, batch_size=2),
                lambda idx, rng: _Loss(ad.sum(tiny_causal.params["head"] * tiny_causal.params["head"])))
    ck = traj[-1]
    save_checkpoint(tmp_path / "c.npz", ck)
    back = load_checkpoint(tmp_path / "c.npz")
    assert back.epoch == ck.epoch and back.step == ck.step and back.rng_state == ck.rng_state
    assert back.flat().tobytes() == ck.flat().tobytes()
    for a, b in zip(back.opt_state.m + back.opt_state.v, ck.opt_state.m + ck.opt_state.v):
        assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- unlearning


UCFG = TrainConfig(lr=1e-3, epochs=3, batch_size=4, seed=0)


def test_zero_epochs_returns_original(trained_pair, small_tok, small_bundle):
    o = trained_pair["original"]
    traj, steps = unlearn(o, small_bundle["forget"], small_bundle["retain"], small_tok, ObjectiveConfig("TPO"),
                          TrainConfig(epochs=0))
    assert len(traj) == 1 and len(steps) == 0
    assert traj[0].flat().tobytes() == o.get_flat().tobytes()


def test_tpo_logs_components_and_keeps_reference(trained_pair, small_tok, small_bundle):
    o = trained_pair["original"]
    digest = params_digest(o)
    obj = ObjectiveConfig("TPO", beta=0.1, lam=2.0, gdr_weight=1.0)
    traj, steps = unlearn(o, small_bundle["forget"], small_bundle["retain"], small_tok, obj, UCFG)
    assert params_digest(o) == digest
    assert [c.epoch for c in traj] == [0, 1, 2, 3]
    assert len(steps) == 3 * math.ceil(len(small_bundle["forget"]) / 4)
    for row in steps:
        assert list(row) == list(STEP_COLUMNS)
        recomposed = row["forget_term"] + 2.0 * row["pl_term"] + 1.0 * row["gdr_term"]
        assert abs(row["total"] - recomposed) < 1e-10
        assert row["objective"] == "TPO+GDR"


def test_resume_is_bitwise(trained_pair, small_tok, small_bundle):
    o = trained_pair["original"]
    obj = ObjectiveConfig("NPO", gdr_weight=1.0)
    args = (o, small_bundle["forget"], small_bundle["retain"], small_tok, obj)
    full, _ = unlearn(*args, UCFG)
    part, _ = unlearn(*args, TrainConfig(**{**UCFG.__dict__, "epochs": 1}))
    resumed, _ = unlearn(*args, UCFG, resume=part[-1])
    assert [c.epoch for c in resumed] == [2, 3]
    assert resumed[-1].flat().tobytes() == full[-1].flat().tobytes()


def test_ga_damages_retain(trained_pair, small_tok, small_bundle):
    o = trained_pair["original"]
    retain_pairs = lm_pairs(small_tok, small_bundle["retain"])
    before = mean_nll(o, retain_pairs)
    traj, _ = unlearn(o, small_bundle["forget"], small_bundle["retain"], small_tok, ObjectiveConfig("GA"),
                      TrainConfig(lr=1e-3, epochs=5, batch_size=4))
    m = o.clone()
    traj[-1].load_into(m)
    assert mean_nll(m, retain_pairs) > 5 * before


def test_mask_objective_needs_annotations(trained_pair, small_tok, small_bundle):
    raw = [a.base for a in small_bundle["forget"]]
    with pytest.raises(ConfigError):
        unlearn(trained_pair["original"], raw, [], small_tok, ObjectiveConfig("TPO"), UCFG)
    with pytest.raises(ConfigError):
        unlearn(trained_pair["original"], small_bundle["forget"], [], small_tok,
                ObjectiveConfig("NPO", gdr_weight=1.0), UCFG)


def test_reinforce_and_task_vector(trained_pair, small_tok, small_bundle):
    o = trained_pair["original"]
    forget = small_bundle["forget"]
    r, traj = reinforce(o, forget, small_tok, TrainConfig(lr=1e-3, batch_size=4), target_nll=0.05, max_epochs=5)
    assert len(traj) >= 2
    assert mean_nll(r, lm_pairs(small_tok, forget)) < mean_nll(o, lm_pairs(small_tok, forget))
    out, steps = unlearn(o, forget, [], small_tok, ObjectiveConfig("TaskVector"), UCFG, reinforced=r)
    assert len(out) == 2 and len(steps) == 0
    np.testing.assert_array_equal(out[1].flat(), 2 * o.get_flat() - r.get_flat())
    same, _ = unlearn(o, forget, [], small_tok, ObjectiveConfig("TaskVector"), UCFG, reinforced=o.clone())
    np.testing.assert_array_equal(same[1].flat(), o.get_flat())
