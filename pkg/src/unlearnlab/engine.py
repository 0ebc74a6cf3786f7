"""Training and unlearning loops with AdamW and resumable checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, TrainingDiverged
from .models import make_batch, token_logprobs
from .objectives import (
    ObjectiveConfig,
    encode_safe,
    encode_samples,
    objective_loss,
    task_vector_unlearn,
)

log = logging.getLogger(__name__)

STEP_COLUMNS = ("step", "epoch", "objective", "total", "forget_term", "pl_term", "gdr_term", "kl_term")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 5
    warmup: bool = True
    seed: int = 0
    checkpoint_every: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("learning rate must be > 0", "/train/lr")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", "/train/epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "/train/batch_size")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1", "/train/checkpoint_every")

    def digest(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)

    def copy(self):
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], self.t)


def adamw_step(params, grads, state, lr, weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged("non-finite gradient")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
        p *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def warmup_lr(lr, step, steps_per_epoch, warmup=True):
    """Linear warm-up over the first epoch (1-based step count), then flat."""
    if not warmup:
        return lr
    return lr * min(1.0, (step + 1) / max(1, steps_per_epoch))


@dataclass
class Checkpoint:
    epoch: int
    params: dict
    opt_state: AdamState | None
    rng_state: dict | None
    step: int = 0
    config_hash: str = ""
    metrics: dict = field(default_factory=dict)

    def flat(self):
        return np.concatenate([a.reshape(-1) for a in self.params.values()])

    def load_into(self, model):
        model.load_state_dict(self.params)
        return model


def save_checkpoint(path, ckpt):
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    meta = {
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "config_hash": ckpt.config_hash,
        "param_order": list(ckpt.params),
        "rng_state": ckpt.rng_state,
        "adam_t": None if ckpt.opt_state is None else ckpt.opt_state.t,
        "metrics": ckpt.metrics,
    }
    if ckpt.opt_state is not None:
        for i, (m, v) in enumerate(zip(ckpt.opt_state.m, ckpt.opt_state.v)):
            arrays[f"adam_m/{i}"] = m
            arrays[f"adam_v/{i}"] = v
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        params = {k: z[f"param/{k}"] for k in meta["param_order"]}
        opt = None
        if meta["adam_t"] is not None:
            n = len(params)
            opt = AdamState([z[f"adam_m/{i}"] for i in range(n)], [z[f"adam_v/{i}"] for i in range(n)], meta["adam_t"])
    return Checkpoint(meta["epoch"], params, opt, meta["rng_state"], meta["step"], meta["config_hash"], meta["metrics"])


def params_digest(model):
    h = hashlib.sha256()
    for k, t in model.params.items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ loop


def _run(model, n_items, cfg, step_fn, resume=None, on_epoch=None, on_step=None,
         check_nll=False, stop_fn=None, config_hash=""):
    """Shared epoch/batch loop.  ``step_fn(indices, rng)`` returns a BatchLoss.

    The returned trajectory starts with an epoch-0 snapshot unless resuming.
    """
    params = model.parameters()
    if resume is not None:
        resume.load_into(model)
        state = resume.opt_state.copy()
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start_epoch, step = resume.epoch, resume.step
    else:
        state = AdamState.zeros([p.data for p in params])
        rng = np.random.default_rng(cfg.seed)
        start_epoch, step = 0, 0
    steps_per_epoch = math.ceil(n_items / cfg.batch_size)

    def snapshot(epoch, metrics):
        return Checkpoint(
            epoch, model.state_dict(), state.copy(), rng.bit_generator.state, step, config_hash, metrics
        )

    trajectory = []
    if resume is None:
        trajectory.append(snapshot(0, {}))
        if on_epoch is not None:
            on_epoch(trajectory[0])
    initial = None
    prev_mean = None
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        order = rng.permutation(n_items)
        totals = []
        for s in range(0, n_items, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            out = step_fn(idx, rng)
            grads = ad.grad(out.total, params)
            lr_t = warmup_lr(cfg.lr, step, steps_per_epoch, cfg.warmup)
            try:
                adamw_step([p.data for p in params], grads, state, lr_t, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch}, step {step}: {exc}") from None
            v = out.value()
            totals.append(v)
            if on_step is not None:
                on_step(step, epoch, out)
            step += 1
            if initial is None:
                initial = v
        mean = float(np.mean(totals))
        if check_nll:
            if not math.isfinite(mean) or mean > 2 * initial:
                raise TrainingDiverged(f"epoch {epoch}: mean NLL {mean:.4f} vs initial {initial:.4f}")
            if prev_mean is not None and mean > prev_mean * 1.05:
                log.warning("epoch %d: training NLL rose from %.4f to %.4f", epoch, prev_mean, mean)
            prev_mean = mean
        stop = stop_fn is not None and stop_fn(model)
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs or stop:
            ck = snapshot(epoch, {"train_loss": mean})
            trajectory.append(ck)
            if on_epoch is not None:
                on_epoch(ck)
        if stop:
            break
    return trajectory


def lm_pairs(tokenizer, samples):
    return [(tokenizer.encode(a.base.question), tokenizer.encode_words(a.base.answer_words)) for a in samples]


def nll_loss(model, batch):
    """Mean over samples of per-token NLL on answer tokens plus the end token."""
    lp = token_logprobs(model, batch)
    mask = (batch.answer | batch.eos).astype(np.float64)
    per = ad.sum(lp * mask, axis=1) * (1.0 / mask.sum(axis=1))
    return ad.mean(per) * -1.0


class _Loss:
    def __init__(self, total):
        self.total = total
        self.components = {"total": total.item()}

    def value(self):
        return self.total.item()


def train_lm(model, pairs, cfg, resume=None, on_epoch=None, config_hash=""):
    """Fit ``model`` on ``(x_ids, y_ids)`` pairs; returns the checkpoint trajectory."""
    if not pairs:
        raise ConfigError("training set is empty", "/train")

    def step(idx, rng):
        return _Loss(nll_loss(model, make_batch([pairs[i] for i in idx])))

    return _run(model, len(pairs), cfg, step, resume, on_epoch, check_nll=True, config_hash=config_hash)


def mean_nll(model, pairs, chunk=128):
    vals = []
    with ad.no_grad():
        for s in range(0, len(pairs), chunk):
            part = pairs[s : s + chunk]
            vals.append(nll_loss(model, make_batch(part)).item() * len(part))
    return float(np.sum(vals) / len(pairs))


class StepLog(list):
    """Per-step component rows in ``STEP_COLUMNS`` order."""

    def __init__(self, objective):
        super().__init__()
        self.objective = objective

    def __call__(self, step, epoch, out):
        c = out.components
        self.append({
            "step": step, "epoch": epoch, "objective": self.objective, "total": out.value(),
            "forget_term": c.get("forget_term", 0.0), "pl_term": c.get("pl_term", 0.0),
            "gdr_term": c.get("gdr_term", 0.0), "kl_term": c.get("kl_term", 0.0),
        })


def reinforce(original, forget, tokenizer, cfg, target_nll=0.05, max_epochs=25, on_epoch=None, resume=None,
              config_hash=""):
    """Fine-tune a copy of ``original`` on the forget set until its NLL drops
    below ``target_nll`` or ``max_epochs`` pass; returns ``(model, trajectory)``."""
    if not forget:
        raise ConfigError("forget set is empty", "/corpus")
    model = original.clone()
    pairs = lm_pairs(tokenizer, forget)
    rcfg = TrainConfig(**{**asdict(cfg), "epochs": max_epochs})
    traj = _run(
        model, len(pairs), rcfg,
        lambda idx, rng: _Loss(nll_loss(model, make_batch([pairs[i] for i in idx]))),
        resume=resume, on_epoch=on_epoch,
        stop_fn=lambda m: mean_nll(m, pairs) < target_nll,
        config_hash=config_hash,
    )
    return model, traj


def unlearn(original, forget, retain, tokenizer, objective, cfg, resume=None, on_epoch=None, on_step=None,
            reinforced=None, reinforce_target=0.05, reinforce_max_epochs=25, config_hash=""):
    """Unlearn ``forget`` starting from a copy of ``original`` (kept frozen).

    Returns ``(trajectory, step_log)``; the trajectory starts at epoch 0
    (the original weights) unless resuming.  ``TaskVector`` skips the loop:
    it uses ``reinforced`` (or fits one with :func:`reinforce`) and returns
    ``[original, 2*original - reinforced]``.
    """
    if not forget:
        raise ConfigError("forget set is empty", "/corpus")
    if objective.reads_masks and any(getattr(a, "annotation_source", None) is None for a in forget):
        raise ConfigError("objective reads UW masks but the forget set is unannotated", "/identifier")
    if objective.gdr_weight > 0 and not retain:
        raise ConfigError("gdr_weight > 0 needs a non-empty retain set", "/objective/gdr_weight")
    steps = StepLog(objective.label)
    ref_digest = params_digest(original)
    ref = original

    if objective.kind == "TaskVector":
        if reinforced is None:
            reinforced, _ = reinforce(original, forget, tokenizer, cfg, reinforce_target, reinforce_max_epochs)
        model = original.clone()
        model.set_flat(task_vector_unlearn(original.get_flat(), reinforced.get_flat()))
        traj = [Checkpoint(0, original.state_dict(), None, None, 0, config_hash),
                Checkpoint(1, model.state_dict(), None, None, 0, config_hash)]
        if on_epoch is not None:
            for ck in traj:
                on_epoch(ck)
        return traj, steps

    model = original.clone()
    safe_needed = objective.kind == "KTO"

    def step(idx, rng):
        samples = [forget[i] for i in idx]
        batch = encode_samples(tokenizer, samples)
        safe = encode_safe(tokenizer, samples, objective.safe_answer) if safe_needed else None
        retain_batch = None
        if objective.gdr_weight > 0:
            pick = rng.choice(len(retain), size=min(len(idx), len(retain)), replace=False)
            retain_batch = encode_samples(tokenizer, [retain[i] for i in pick])
        return objective_loss(model, ref, objective, batch, retain_batch, safe)

    def log_step(step_no, epoch, out):
        steps(step_no, epoch, out)
        if on_step is not None:
            on_step(step_no, epoch, out)

    traj = _run(model, len(forget), cfg, step, resume, on_epoch, log_step, config_hash=config_hash)
    if params_digest(original) != ref_digest:
        raise RuntimeError("reference model was modified during unlearning")
    return traj, steps
