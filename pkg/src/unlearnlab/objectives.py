"""Unlearning objectives.

Every loss returns a :class:`BatchLoss` whose ``total`` is a differentiable
scalar.  Sequence log-likelihoods are length-normalized (mean per token);
``targeted`` variants of GA/NPO/KTO restrict that mean to unwanted-word
positions.  The logit-preference term reads only the gold-token logit at
unwanted-word positions, so its gradient w.r.t. the logits vanishes
everywhere else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractViolation
from .models import make_batch, token_logprobs

KINDS = ("GA", "NPO", "KTO", "TPO", "LPL-only", "PL-only", "TaskVector")
DEFAULT_BETA = {"NPO": 0.1, "KTO": 0.1, "TPO": 0.3, "LPL-only": 0.3}
SAFE_ANSWER = "I don't know"

_PLUGINS = {}


def register_objective(name, fn):
    """Add a custom forget objective ``fn(model, ref, batch, cfg) -> BatchLoss``."""
    if name in KINDS:
        raise ValueError(f"{name} is a built-in objective")
    _PLUGINS[name] = fn


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "TPO"
    beta: float | None = None
    lam: float = 1.0
    gdr_weight: float = 0.0
    safe_answer: str = SAFE_ANSWER
    targeted: bool = False
    add_pl: bool = False

    def __post_init__(self):
        if self.kind not in KINDS and self.kind not in _PLUGINS:
            raise ConfigError(f"unknown objective kind {self.kind!r}", "/objective/kind")
        if self.beta is None and self.kind in DEFAULT_BETA:
            object.__setattr__(self, "beta", DEFAULT_BETA[self.kind])
        if self.kind in DEFAULT_BETA and not (self.beta > 0 and math.isfinite(self.beta)):
            raise ConfigError("beta must be > 0", "/objective/beta")
        for name in ("lam", "gdr_weight"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0", f"/objective/{'lambda' if name == 'lam' else name}")

    @property
    def reads_masks(self):
        return self.kind in ("TPO", "LPL-only", "PL-only") or self.targeted or self.add_pl

    @property
    def label(self):
        name = self.kind
        if self.targeted and self.kind in ("GA", "NPO", "KTO"):
            name += "-targeted"
        if self.add_pl and self.kind in ("GA", "NPO", "KTO"):
            name += "+PL"
        if self.gdr_weight > 0:
            name += "+GDR"
        return name

    def to_dict(self):
        return {
            "kind": self.kind, "beta": self.beta, "lambda": self.lam, "gdr_weight": self.gdr_weight,
            "safe_answer": self.safe_answer, "targeted": self.targeted, "add_pl": self.add_pl,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class BatchLoss:
    total: ad.Tensor
    components: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def value(self):
        return self.total.item()

    def recomposed(self):
        return float(sum(self.weights.get(k, 1.0) * v for k, v in self.components.items()))


def _combine(terms, weights, diagnostics=None):
    total = None
    for k, t in terms.items():
        w = weights.get(k, 1.0)
        part = t if w == 1.0 else t * w
        total = part if total is None else total + part
    return BatchLoss(total, {k: t.item() for k, t in terms.items()}, dict(weights), diagnostics or {})


# ------------------------------------------------------------ batch helpers


def encode_samples(tokenizer, samples):
    """Teacher-forcing batch for annotated samples (masks included)."""
    pairs = [(tokenizer.encode(a.base.question), tokenizer.encode_words(a.base.answer_words)) for a in samples]
    return make_batch(pairs, masks=[a.uw_mask for a in samples])


def encode_safe(tokenizer, samples, safe_answer=SAFE_ANSWER):
    y = tokenizer.encode(safe_answer)
    if not y or tokenizer.unk_id in y:
        raise ConfigError(f"safe answer {safe_answer!r} is not fully in the vocabulary", "/objective/safe_answer")
    return make_batch([(tokenizer.encode(a.base.question), y) for a in samples])


def _row_mean(x, mask):
    """Mean of ``x[b, mask[b]]`` per row, for rows with at least one position.

    Returns ``(Tensor [k] or None, kept row indices)``.
    """
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1)
    kept = counts > 0
    if not kept.any():
        return None, np.nonzero(kept)[0]
    sums = ad.sum(x * mask.astype(np.float64), axis=1)
    return ad.masked_select(sums, kept) * (1.0 / counts[kept]), np.nonzero(kept)[0]


def _zero():
    return ad.Tensor(0.0)


def _forget_positions(batch, targeted):
    return batch.uw if targeted else batch.answer


# ------------------------------------------------------------ logit-level cores


def mean_nll_at(logprobs, mask):
    """Mean over rows (with >= 1 flagged position) of per-row mean NLL."""
    per, keep = _row_mean(logprobs, mask)
    if per is None:
        return _zero(), 0
    return ad.mean(per) * -1.0, keep.size


def npo_from_logprobs(logprobs, ref_logprobs, mask, beta):
    """``-(2/beta) log sigmoid(-beta * (mean lp - mean ref lp))`` averaged over rows."""
    per, keep = _row_mean(logprobs, mask)
    if per is None:
        return _zero(), 0
    m = np.asarray(mask, dtype=bool)[keep]
    ref = (np.where(m, ref_logprobs[keep], 0.0)).sum(axis=1) / m.sum(axis=1)
    ratio = per - ref
    return ad.mean(ad.log_sigmoid(ratio * -beta)) * (-2.0 / beta), keep.size


def lpl_from_logits(logits, ref_logits, targets, uw, beta):
    """Logit preference loss from raw logits ``[B, T, V]``.

    Per sample: ``-(2/beta) log sigmoid(beta * mean_uw(z_ref - z))`` where
    ``z`` is the gold-token logit at each unwanted-word position.
    """
    z = ad.take_along_last(logits, targets)
    z_ref = np.take_along_axis(np.asarray(ref_logits), targets[..., None], axis=-1)[..., 0]
    gap_self, keep = _row_mean(z, uw)
    if gap_self is None:
        return _zero(), 0
    m = np.asarray(uw, dtype=bool)[keep]
    ref_mean = np.where(m, z_ref[keep], 0.0).sum(axis=1) / m.sum(axis=1)
    gap = gap_self * -1.0 + ref_mean
    return ad.mean(ad.log_sigmoid(gap * beta)) * (-2.0 / beta), keep.size


def kl_rows(logits, ref_logits, mask):
    """Per-row mean over flagged positions of full-vocabulary ``KL(P || P_ref)``."""
    lsm = ad.log_softmax(logits)
    p = ad.softmax(logits)
    ref = np.asarray(ref_logits)
    ref_lsm = ref - ref.max(axis=-1, keepdims=True)
    ref_lsm = ref_lsm - np.log(np.exp(ref_lsm).sum(axis=-1, keepdims=True))
    kl = ad.sum(p * (lsm - ref_lsm), axis=-1)
    return _row_mean(kl, mask)


# ------------------------------------------------------------ model-level losses


def _require_nonempty(batch):
    if batch is None or len(batch) == 0:
        raise ContractViolation("empty batch")


def _check_beta(beta):
    if beta is None or not beta > 0:
        raise ConfigError("beta must be > 0", "/objective/beta")


def _ref_logits(ref, batch):
    with ad.no_grad():
        return ref(batch.tokens).data


def _ref_logprobs(ref, batch):
    with ad.no_grad():
        return token_logprobs(ref, batch).data


def ga_loss(model, batch, targeted=False):
    """Mean per-token log-likelihood of the forget answers (minimized)."""
    _require_nonempty(batch)
    lp = token_logprobs(model, batch)
    nll, n = mean_nll_at(lp, _forget_positions(batch, targeted))
    term = nll * -1.0
    return _combine({"forget_term": term}, {}, {"samples": n})


def npo_loss(model, ref, batch, beta=0.1, targeted=False):
    _check_beta(beta)
    _require_nonempty(batch)
    lp = token_logprobs(model, batch)
    term, n = npo_from_logprobs(lp, _ref_logprobs(ref, batch), _forget_positions(batch, targeted), beta)
    return _combine({"forget_term": term}, {}, {"samples": n, "excluded": len(batch) - n})


def kto_loss(model, ref, batch, safe_batch, beta=0.1, targeted=False):
    """KTO-style unlearning: ``-(2/beta) log sigmoid(KL_ref - beta * log-ratio)``.

    ``KL_ref`` is ``beta`` times the per-sample mean KL between the model and
    the reference over the safe-answer positions; it stays differentiable.
    """
    _check_beta(beta)
    _require_nonempty(batch)
    if safe_batch is None or len(safe_batch) != len(batch):
        raise ContractViolation("KTO needs one safe-answer row per forget sample")
    mask = _forget_positions(batch, targeted)
    lp = token_logprobs(model, batch)
    per, keep = _row_mean(lp, mask)
    if per is None:
        return _combine({"forget_term": _zero(), "kl_term": _zero()}, {"kl_term": 0.0}, {"samples": 0})
    m = np.asarray(mask, dtype=bool)[keep]
    ref_lp = _ref_logprobs(ref, batch)
    ref_mean = np.where(m, ref_lp[keep], 0.0).sum(axis=1) / m.sum(axis=1)
    ratio = per - ref_mean

    safe_logits = model(safe_batch.tokens)
    kl_all, _ = kl_rows(safe_logits, _ref_logits(ref, safe_batch), safe_batch.answer)
    kl = ad.masked_select(kl_all, np.isin(np.arange(len(batch)), keep))
    kl_ref = kl * beta
    term = ad.mean(ad.log_sigmoid(kl_ref - ratio * beta)) * (-2.0 / beta)
    # kl_term is reported (weight 0) but already inside the sigmoid
    return _combine({"forget_term": term, "kl_term": ad.mean(kl_ref)}, {"kl_term": 0.0}, {"samples": keep.size})


def pl_loss(model, batch):
    """Preservation loss: mean NLL over general-word positions."""
    lp = token_logprobs(model, batch)
    term, n = mean_nll_at(lp, batch.gw)
    return _combine({"pl_term": term}, {}, {"samples": n})


def lpl_loss(model, ref, batch, beta=0.3):
    _check_beta(beta)
    _require_nonempty(batch)
    logits = model(batch.tokens)
    term, n = lpl_from_logits(logits, _ref_logits(ref, batch), batch.targets, batch.uw, beta)
    return _combine({"forget_term": term}, {}, {"samples": n, "excluded": len(batch) - n})


def tpo_loss(model, ref, batch, beta=0.3, lam=1.0):
    """LPL + lam * PL sharing one forward pass."""
    _check_beta(beta)
    _require_nonempty(batch)
    logits = model(batch.tokens)
    lpl, n = lpl_from_logits(logits, _ref_logits(ref, batch), batch.targets, batch.uw, beta)
    lp = ad.take_along_last(ad.log_softmax(logits), batch.targets)
    pl, n_gw = mean_nll_at(lp, batch.gw)
    return _combine(
        {"forget_term": lpl, "pl_term": pl},
        {"pl_term": lam},
        {"samples": n, "excluded": len(batch) - n, "gw_samples": n_gw},
    )


def gdr_loss(model, retain_batch):
    """Mean per-token NLL on retain answers."""
    _require_nonempty(retain_batch)
    lp = token_logprobs(model, retain_batch)
    term, _ = mean_nll_at(lp, retain_batch.answer)
    return term


def objective_loss(model, ref, cfg, batch, retain_batch=None, safe_batch=None):
    """Dispatch on ``cfg.kind`` and add the optional PL and GDR terms."""
    kind = cfg.kind
    if kind == "GA":
        out = ga_loss(model, batch, targeted=cfg.targeted)
    elif kind == "NPO":
        out = npo_loss(model, ref, batch, cfg.beta, targeted=cfg.targeted)
    elif kind == "KTO":
        out = kto_loss(model, ref, batch, safe_batch, cfg.beta, targeted=cfg.targeted)
    elif kind == "TPO":
        out = tpo_loss(model, ref, batch, cfg.beta, cfg.lam)
    elif kind == "LPL-only":
        out = lpl_loss(model, ref, batch, cfg.beta)
    elif kind == "PL-only":
        out = pl_loss(model, batch)
    elif kind in _PLUGINS:
        out = _PLUGINS[kind](model, ref, batch, cfg)
    else:
        raise ConfigError(f"objective {kind!r} has no differentiable loss", "/objective/kind")

    terms, weights = {}, dict(out.weights)
    if cfg.add_pl and kind in ("GA", "NPO", "KTO"):
        terms["pl_term"] = pl_loss(model, batch).total
        weights["pl_term"] = cfg.lam
    if cfg.gdr_weight > 0:
        if retain_batch is None or len(retain_batch) == 0:
            raise ConfigError("gdr_weight > 0 needs a non-empty retain set", "/objective/gdr_weight")
        terms["gdr_term"] = gdr_loss(model, retain_batch)
        weights["gdr_term"] = cfg.gdr_weight
    if not terms:
        return out
    total = out.total
    for k, t in terms.items():
        total = total + t * weights[k]
    components = dict(out.components)
    components.update({k: t.item() for k, t in terms.items()})
    return BatchLoss(total, components, weights, out.diagnostics)


def task_vector_unlearn(theta_0, theta_reinforce):
    """``theta_0 - (theta_reinforce - theta_0)``, evaluated as ``2*theta_0 - theta_reinforce``.

    Doubling is exact in floating point, so a zero delta returns ``theta_0`` bit for bit.
    """
    a = np.asarray(theta_0, dtype=np.float64)
    b = np.asarray(theta_reinforce, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    return 2.0 * a - b

