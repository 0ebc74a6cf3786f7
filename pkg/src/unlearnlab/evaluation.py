"""Forgetting and utility metrics.

Conventions:

* Answer probability is the geometric mean of per-token probabilities.
* Truth ratio ``R`` is the mean perturbed-answer probability divided by the
  paraphrased-answer probability; the utility transform is ``max(0, 1 - R)``.
* Forget quality is the two-sample KS p-value between the truth ratios of an
  unlearned model and the retained model on the forget split.
* Membership AUC treats forget samples as positives and uses the Min-K%
  score as the statistic (ties count one half).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import kolmogorov

from . import autodiff as ad
from .errors import ConfigError, ContractViolation
from .models import batch_answer_logprobs, generate_greedy_batch, make_batch, token_logprobs
from .objectives import encode_samples, kl_rows, mean_nll_at

# --------------------------------------------------------------- ROUGE-L


def lcs_length(a, b):
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_f1(candidate, reference):
    """LCS-based F1 between two word sequences."""
    lcs = lcs_length(list(candidate), list(reference))
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 2 * p * r / (p + r)


# --------------------------------------------------------------- probabilities


def answer_probability_from_logprobs(logprobs):
    lp = np.asarray(logprobs, dtype=np.float64)
    if lp.size == 0:
        raise ContractViolation("empty answer")
    return float(np.exp(lp.mean()))


def answer_probability(model, x, y):
    """``P(y|x) ** (1/|y|)`` for token id sequences."""
    if len(y) < 1:
        raise ContractViolation("empty answer")
    return answer_probability_from_logprobs(batch_answer_logprobs(model, [(x, y)])[0])


def truth_ratio_from_probs(paraphrased, perturbed):
    """Returns ``(R, max(0, 1 - R))``."""
    if len(perturbed) < 1:
        raise ContractViolation("need perturbed answers")
    r = float(np.mean(perturbed)) / paraphrased
    return r, max(0.0, 1.0 - r)


def truth_ratios(model, tokenizer, samples):
    """Truth ratio per sample (NaN where paraphrase/perturbations are missing)."""
    pairs, spans = [], []
    for a in samples:
        b = a.base if hasattr(a, "base") else a
        if not b.paraphrased_answer or len(b.perturbed_answers) < 2:
            spans.append(None)
            continue
        x = tokenizer.encode(b.question)
        start = len(pairs)
        pairs.append((x, tokenizer.encode(b.paraphrased_answer)))
        pairs.extend((x, tokenizer.encode(p)) for p in b.perturbed_answers)
        spans.append((start, len(pairs)))
    lps = batch_answer_logprobs(model, pairs) if pairs else []
    probs = [answer_probability_from_logprobs(lp) for lp in lps]
    out = np.full(len(samples), np.nan)
    for i, span in enumerate(spans):
        if span is None:
            continue
        s, e = span
        out[i] = truth_ratio_from_probs(probs[s], probs[s + 1 : e])[0]
    return out


def truth_ratio(model, tokenizer, sample):
    r = truth_ratios(model, tokenizer, [sample])[0]
    return r, max(0.0, 1.0 - r)


# --------------------------------------------------------------- KS test


def _ecdf_stat(a, b):
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def _exact_p(a, b, d):
    """Permutation p-value ``P(D >= d)`` by counting lattice paths.

    A relabelling of the pooled sample is a monotone path from (0, 0) to
    (n, m).  The ECDF gap is only observed where the pooled sorted values
    change, so the band constraint is checked at tie-group boundaries only,
    which makes the count exact with ties.
    """
    n, m = len(a), len(b)
    pooled = np.sort(np.concatenate([np.asarray(a, float), np.asarray(b, float)]))
    boundary = np.zeros(n + m + 1, dtype=bool)
    boundary[n + m] = True
    boundary[1 : n + m][pooled[1:] != pooled[:-1]] = True
    tol = 1e-12
    # paths[i] = number of paths reaching (i, k - i) while staying inside the band
    paths = [0] * (n + 1)
    paths[0] = 1
    for k in range(1, n + m + 1):
        new = [0] * (n + 1)
        for i in range(max(0, k - m), min(n, k) + 1):
            j = k - i
            c = (paths[i - 1] if i > 0 else 0) + (paths[i] if j > 0 and i <= k - 1 else 0)
            if boundary[k] and abs(i / n - j / m) >= d - tol:
                c = 0
            new[i] = c
        paths = new
    inside = paths[n]
    total = math.comb(n + m, n)
    return (total - inside) / total


def ks_two_sample(a, b, exact_threshold=10):
    """Two-sided two-sample KS test; returns ``(D, p)``.

    Exact permutation p-value when ``min(len(a), len(b)) <= exact_threshold``,
    otherwise the asymptotic Kolmogorov tail with the usual effective-n
    correction ``(sqrt(en) + 0.12 + 0.11 / sqrt(en)) * D``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 1 or b.size < 1:
        raise ContractViolation("KS test needs two non-empty samples")
    d = _ecdf_stat(a, b)
    if d == 0.0:
        return 0.0, 1.0
    if min(a.size, b.size) <= exact_threshold:
        return d, float(min(1.0, max(0.0, _exact_p(a, b, d))))
    en = a.size * b.size / (a.size + b.size)
    lam = (math.sqrt(en) + 0.12 + 0.11 / math.sqrt(en)) * d
    return d, float(min(1.0, max(0.0, kolmogorov(lam))))


def forget_quality(unlearned, retained, tokenizer, forget, retained_ratios=None):
    """KS p-value between the two models' truth-ratio distributions on ``forget``."""
    a = truth_ratios(unlearned, tokenizer, forget)
    b = truth_ratios(retained, tokenizer, forget) if retained_ratios is None else np.asarray(retained_ratios)
    return ks_two_sample(a[~np.isnan(a)], b[~np.isnan(b)])[1]


# --------------------------------------------------------------- utility


def harmonic_mean(values):
    v = np.asarray(values, dtype=np.float64)
    if np.any(v <= 0):
        return 0.0
    with np.errstate(over="ignore", divide="ignore"):
        return float(v.size / np.sum(1.0 / v))


def greedy_answers(model, tokenizer, samples, max_new=None, prompts=None):
    if prompts is None:
        prompts = [tokenizer.encode(a.base.question) for a in samples]
    if max_new is None:
        max_new = max(len(a.base.answer_words) for a in samples) + 4
    return generate_greedy_batch(model, prompts, max_new)


def probe_scores(model, tokenizer, samples):
    """Mean answer probability, ROUGE-L of greedy answers and truth-ratio utility."""
    if not samples:
        raise ConfigError("probe set is empty", "/eval")
    pairs = [(tokenizer.encode(a.base.question), tokenizer.encode_words(a.base.answer_words)) for a in samples]
    prob = float(np.mean([answer_probability_from_logprobs(lp) for lp in batch_answer_logprobs(model, pairs)]))
    gens = greedy_answers(model, tokenizer, samples)
    rouge = float(np.mean([rouge_l_f1(tokenizer.to_words(g), a.base.answer_words) for g, a in zip(gens, samples)]))
    r = truth_ratios(model, tokenizer, samples)
    tr = float(np.mean(np.maximum(0.0, 1.0 - r[~np.isnan(r)])))
    return {"probability": prob, "rouge_l": rouge, "truth_ratio": tr}


def aggregate_utility(components, aggregation="harmonic"):
    vals = list(components)
    if aggregation == "harmonic":
        return harmonic_mean(vals)
    if aggregation == "arithmetic":
        return float(np.mean(vals))
    raise ConfigError(f"unknown aggregation {aggregation!r}", "/eval/aggregation")


def model_utility(model, tokenizer, retain, general, aggregation="harmonic"):
    """Aggregate of {probability, ROUGE-L, truth-ratio utility} x {retain, general}.

    Returns ``(utility, {"retain": {...}, "general": {...}})``.
    """
    if not retain or not general:
        raise ConfigError("model utility needs non-empty retain and general probe sets", "/eval")
    tables = {"retain": probe_scores(model, tokenizer, retain), "general": probe_scores(model, tokenizer, general)}
    vals = [v for t in tables.values() for v in t.values()]
    return aggregate_utility(vals, aggregation), tables


# --------------------------------------------------------------- membership


def min_k_score(logprobs, k_percent=20.0):
    """Mean of the lowest ``ceil(k% * T)`` token log-probabilities."""
    lp = np.sort(np.asarray(logprobs, dtype=np.float64))
    if lp.size == 0:
        raise ContractViolation("empty sequence")
    if not 0 < k_percent <= 100:
        raise ContractViolation("k_percent must lie in (0, 100]")
    n = max(1, math.ceil(k_percent / 100.0 * lp.size - 1e-9))
    return float(lp[:n].mean())


def min_k_scores(model, tokenizer, samples, k_percent=20.0):
    pairs = [(tokenizer.encode(a.base.question), tokenizer.encode_words(a.base.answer_words)) for a in samples]
    return np.array([min_k_score(lp, k_percent) for lp in batch_answer_logprobs(model, pairs)])


def auc_score(positive, negative):
    """``P(pos > neg) + 0.5 P(pos == neg)`` via mid-ranks (Mann-Whitney U)."""
    pos = np.asarray(positive, dtype=np.float64)
    neg = np.asarray(negative, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ContractViolation("AUC needs non-empty score sets")
    pooled = np.concatenate([pos, neg])
    order = np.argsort(pooled, kind="mergesort")
    ranks = np.empty(pooled.size)
    sorted_vals = pooled[order]
    i = 0
    while i < pooled.size:
        j = i
        while j + 1 < pooled.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def privleak_from_auc(auc_model, auc_retained):
    if auc_retained == 0:
        raise ContractViolation("retained-model AUC is 0; PrivLeak undefined")
    return 100.0 * (auc_model - auc_retained) / auc_retained


def membership_auc(model, tokenizer, forget, holdout, k_percent=20.0):
    return auc_score(min_k_scores(model, tokenizer, forget, k_percent), min_k_scores(model, tokenizer, holdout, k_percent))


def privleak(unlearned, retained, tokenizer, forget, holdout, k_percent=20.0, retained_auc=None):
    """Signed relative AUC gap (percent) between the unlearned and retained models."""
    if not forget or not holdout:
        raise ContractViolation("PrivLeak needs non-empty forget and holdout sets")
    auc_r = membership_auc(retained, tokenizer, forget, holdout, k_percent) if retained_auc is None else retained_auc
    return privleak_from_auc(membership_auc(unlearned, tokenizer, forget, holdout, k_percent), auc_r)


# --------------------------------------------------------------- memorization


def verbmem(model, tokenizer, samples, split=0.5):
    """ROUGE-L of greedy continuations from the first half of each answer."""
    if not samples:
        raise ContractViolation("empty sample set")
    prompts, refs = [], []
    for a in samples:
        y = tokenizer.encode_words(a.base.answer_words)
        cut = max(1, int(len(y) * split)) if len(y) > 1 else 0
        prompts.append(tokenizer.encode(a.base.question) + y[:cut])
        refs.append(a.base.answer_words[cut:])
    gens = generate_greedy_batch(model, prompts, max(len(r) for r in refs) + 4)
    return float(np.mean([rouge_l_f1(tokenizer.to_words(g), r) for g, r in zip(gens, refs)]))


def knowmem(model, tokenizer, samples):
    """ROUGE-L of greedy answers to each question."""
    if not samples:
        raise ContractViolation("empty sample set")
    gens = greedy_answers(model, tokenizer, samples)
    return float(np.mean([rouge_l_f1(tokenizer.to_words(g), a.base.answer_words) for g, a in zip(gens, samples)]))


# --------------------------------------------------------------- diagnostics


def gw_cross_entropy(model, tokenizer, samples):
    """Mean NLL at general-word positions (the preservation loss, no gradient)."""
    with ad.no_grad():
        batch = encode_samples(tokenizer, samples)
        return mean_nll_at(token_logprobs(model, batch), batch.gw)[0].item()


def kl_divergence(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def kl_reference_divergence(model, ref, tokenizer, samples, chunk=128):
    """Mean over samples of the mean full-vocabulary ``KL(P_model || P_ref)`` at answer positions."""
    if model.config.vocab_size != ref.config.vocab_size:
        raise ContractViolation("models do not share a vocabulary")
    vals = []
    with ad.no_grad():
        for s in range(0, len(samples), chunk):
            part = samples[s : s + chunk]
            pairs = [(tokenizer.encode(a.base.question), tokenizer.encode_words(a.base.answer_words)) for a in part]
            batch = make_batch(pairs)
            per, _ = kl_rows(model(batch.tokens), ref(batch.tokens).data, batch.answer)
            vals.extend(per.data.tolist())
    return float(max(0.0, np.mean(vals)))


# --------------------------------------------------------------- report

REPORT_COLUMNS = (
    "checkpoint", "method", "seed", "epoch", "forget_quality", "model_utility",
    "retain_probability", "retain_rouge_l", "retain_truth_ratio",
    "general_probability", "general_rouge_l", "general_truth_ratio",
    "privleak", "verbmem_f", "knowmem_f", "knowmem_r", "gw_ce", "kl_forget", "kl_retain",
)


@dataclass
class EvalReport:
    checkpoint: str
    forget_quality: float
    model_utility: float
    tables: dict
    privleak: float
    verbmem_f: float
    knowmem_f: float
    knowmem_r: float
    gw_ce: float
    kl_forget: float
    kl_retain: float
    method: str = ""
    seed: int = 0
    epoch: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("forget_quality", "model_utility"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")

    def row(self):
        t = self.tables
        return {
            "checkpoint": self.checkpoint, "method": self.method, "seed": self.seed, "epoch": self.epoch,
            "forget_quality": self.forget_quality, "model_utility": self.model_utility,
            "retain_probability": t["retain"]["probability"], "retain_rouge_l": t["retain"]["rouge_l"],
            "retain_truth_ratio": t["retain"]["truth_ratio"],
            "general_probability": t["general"]["probability"], "general_rouge_l": t["general"]["rouge_l"],
            "general_truth_ratio": t["general"]["truth_ratio"],
            "privleak": self.privleak, "verbmem_f": self.verbmem_f, "knowmem_f": self.knowmem_f,
            "knowmem_r": self.knowmem_r, "gw_ce": self.gw_ce, "kl_forget": self.kl_forget, "kl_retain": self.kl_retain,
        }

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)


class Evaluator:
    """Evaluates checkpoints against fixed probe sets and a retained model.

    Retained-model quantities (truth ratios, membership AUC) are computed once.
    """

    def __init__(self, tokenizer, bundle, retained, reference, n_probe=60, k_percent=20.0,
                 aggregation="harmonic", full=True):
        self.tok = tokenizer
        self.forget = list(bundle["forget"])
        self.holdout = list(bundle["holdout"])
        self.retain_probe = _spread(bundle["retain"], n_probe)
        self.general_probe = _spread(bundle["general"], n_probe)
        self.k = k_percent
        self.aggregation = aggregation
        self.reference = reference
        self.full = full
        self.retained_ratios = truth_ratios(retained, tokenizer, self.forget)
        self.retained_auc = membership_auc(retained, tokenizer, self.forget, self.holdout, k_percent)

    def __call__(self, model, checkpoint="", method="", seed=0, epoch=0):
        tok = self.tok
        fq = forget_quality(model, None, tok, self.forget, retained_ratios=self.retained_ratios)
        mu, tables = model_utility(model, tok, self.retain_probe, self.general_probe, self.aggregation)
        pl = privleak(model, None, tok, self.forget, self.holdout, self.k, retained_auc=self.retained_auc)
        if self.full:
            vm, kf, kr = verbmem(model, tok, self.forget), knowmem(model, tok, self.forget), knowmem(model, tok, self.retain_probe)
        else:
            vm = kf = kr = float("nan")
        return EvalReport(
            checkpoint=checkpoint, forget_quality=fq, model_utility=mu, tables=tables, privleak=pl,
            verbmem_f=vm, knowmem_f=kf, knowmem_r=kr,
            gw_ce=gw_cross_entropy(model, tok, self.forget),
            kl_forget=kl_reference_divergence(model, self.reference, tok, self.forget),
            kl_retain=kl_reference_divergence(model, self.reference, tok, self.retain_probe),
            method=method, seed=seed, epoch=epoch,
        )


def _spread(samples, n):
    """Deterministic, evenly spaced subset of at most ``n`` samples."""
    samples = list(samples)
    if len(samples) <= n:
        return samples
    idx = np.linspace(0, len(samples) - 1, n).round().astype(int)
    return [samples[i] for i in idx]
