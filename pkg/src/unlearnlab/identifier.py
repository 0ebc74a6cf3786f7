"""Unwanted-word identification and its audits.

The discriminative identifier masks one answer word at a time and asks a
bidirectional encoder to fill it in; a word the encoder can recover from
context carries general information (GW), anything else is unwanted (UW).
Answer words missing from the encoder vocabulary are UW by default: it is
safer to over-forget a word than to leak it.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import AnnotatedSample, record_to_sample, sample_to_record
from .engine import TrainConfig, _Loss, _run
from .errors import ContractViolation

DEFAULT_STOPLIST = frozenset(
    "a an the is was are were be been of in on at to for from by with and or as that this "
    "it its his her their who which what where when had has have did does do . , ? ' s".split()
)


@dataclass(frozen=True)
class IdentificationResult:
    sample_id: str
    uw_mask: tuple
    predicted: tuple | None = None
    flags: tuple = ()

    def __post_init__(self):
        if self.predicted is not None and len(self.predicted) != len(self.uw_mask):
            raise ContractViolation("predicted words and mask differ in length")

    def uw_positions(self):
        return {(self.sample_id, i) for i, m in enumerate(self.uw_mask) if m}


# ------------------------------------------------------------------ encoder training


def mlm_batch(tokenizer, seqs, rng, rate=0.15):
    """BERT-style corruption: of the chosen positions 80% become MASK, 10% a
    random word, 10% stay.  Returns ``(tokens, targets, mask)``; BOS/EOS/PAD
    are never chosen and each row gets at least one target."""
    B, T = len(seqs), max(len(s) for s in seqs)
    tokens = np.zeros((B, T), dtype=np.int64)
    for b, s in enumerate(seqs):
        tokens[b, : len(s)] = s
    maskable = tokens >= len(tokenizer.special_ids)
    chosen = (rng.random((B, T)) < rate) & maskable
    for b in range(B):
        if not chosen[b].any():
            cand = np.flatnonzero(maskable[b])
            chosen[b, cand[int(rng.integers(cand.size))]] = True
    targets = tokens.copy()
    u = rng.random((B, T))
    rand_words = rng.integers(len(tokenizer.special_ids), tokenizer.vocab_size, size=(B, T))
    corrupted = tokens.copy()
    corrupted[chosen & (u < 0.8)] = tokenizer.mask_id
    swap = chosen & (u >= 0.8) & (u < 0.9)
    corrupted[swap] = rand_words[swap]
    return corrupted, targets, chosen


def encoder_sequence(tokenizer, sample):
    b = sample.base
    return [tokenizer.bos_id, *tokenizer.encode(b.question), *tokenizer.encode_words(b.answer_words), tokenizer.eos_id]


def train_masked_lm(model, tokenizer, samples, cfg: TrainConfig, rate=0.15, on_epoch=None):
    """Fit a MaskedLM with the masked-token objective; returns the trajectory."""
    if model.causal:
        raise ContractViolation("train_masked_lm needs a MaskedLM")
    seqs = [encoder_sequence(tokenizer, a) for a in samples]

    def step(idx, rng):
        tokens, targets, chosen = mlm_batch(tokenizer, [seqs[i] for i in idx], rng, rate)
        lp = ad.take_along_last(ad.log_softmax(model(tokens)), targets)
        w = chosen.astype(np.float64) / chosen.sum()
        return _Loss(ad.sum(lp * w) * -1.0)

    return _run(model, len(seqs), cfg, step, on_epoch=on_epoch)


# ------------------------------------------------------------------ identifiers


def identify_discriminative(model, tokenizer, samples, top_k=1, chunk=256):
    """Mask-and-predict labelling for each sample; one masked query per word.

    A word is GW when it is among the encoder's ``top_k`` predictions for its
    own masked slot (``top_k=1``: the argmax, ties to the lowest id).
    """
    if model.causal:
        raise ContractViolation("discriminative identification needs a MaskedLM")
    if top_k < 1:
        raise ContractViolation("top_k must be >= 1")
    single = not isinstance(samples, (list, tuple))
    if single:
        samples = [samples]
    queries, meta = [], []
    for s_idx, a in enumerate(samples):
        words = a.base.answer_words
        if not words:
            raise ContractViolation(f"{a.id}: empty answer")
        x = tokenizer.encode(a.base.question)
        y = tokenizer.encode_words(words)
        for i in range(len(y)):
            seq = [tokenizer.bos_id, *x, *y[:i], tokenizer.mask_id, *y[i + 1 :], tokenizer.eos_id]
            queries.append(seq)
            meta.append((s_idx, i, 1 + len(x) + i, y[i]))
    preds = []
    for s in range(0, len(queries), chunk):
        part = queries[s : s + chunk]
        buf = np.zeros((len(part), max(len(q) for q in part)), dtype=np.int64)
        for r, q in enumerate(part):
            buf[r, : len(q)] = q
        with ad.no_grad():
            logits = model(buf).data
        for r in range(len(part)):
            row = logits[r, meta[s + r][2]]
            preds.append(np.argsort(-row, kind="stable")[:top_k])

    out = []
    for s_idx, a in enumerate(samples):
        n = len(a.base.answer_words)
        mask, predicted, flags = [False] * n, [None] * n, []
        for (si, i, _, gold), top in zip(meta, preds):
            if si != s_idx:
                continue
            predicted[i] = tokenizer.itos[int(top[0])]
            if gold == tokenizer.unk_id:
                mask[i] = True
                flags.append(f"oov:{i}")
            else:
                mask[i] = int(gold) not in {int(t) for t in top}
        out.append(IdentificationResult(a.id, tuple(mask), tuple(predicted), tuple(flags)))
    return out[0] if single else out


def identify_stopword(sample, stoplist=DEFAULT_STOPLIST):
    """Words in ``stoplist`` are GW, everything else UW."""
    if not stoplist:
        raise ContractViolation("stoplist must be non-empty")
    stop = {w.lower() for w in stoplist}
    words = sample.base.answer_words
    return IdentificationResult(sample.id, tuple(w not in stop for w in words))


# ------------------------------------------------------------------ audits


def _uw_set(run):
    if isinstance(run, dict):
        return {(sid, i) for sid, mask in run.items() for i, m in enumerate(mask) if m}, set(run)
    picks, ids = set(), set()
    for r in run:
        picks |= r.uw_positions()
        ids.add(r.sample_id)
    return picks, ids


def jaccard(a, b):
    a, b = set(a), set(b)
    union = a | b
    return 1.0 if not union else len(a & b) / len(union)


def jaccard_consistency(runs):
    """Pairwise Jaccard indices between UW picks of several identifier runs.

    Each run is a list of :class:`IdentificationResult` or a dict mapping
    sample id to mask.  Returns ``{(i, j): J}`` for ``i < j``.
    """
    if len(runs) < 2:
        raise ContractViolation("need at least two runs")
    sets = [_uw_set(r) for r in runs]
    ids = sets[0][1]
    if any(s[1] != ids for s in sets[1:]):
        raise ContractViolation("runs cover different sample sets")
    return {(i, j): jaccard(sets[i][0], sets[j][0]) for i, j in itertools.combinations(range(len(runs)), 2)}


@dataclass
class Accuracy:
    precision: float
    recall: float
    f1: float
    flags: list = field(default_factory=list)


def identifier_accuracy(predicted, oracle):
    """Precision/recall/F1 with UW as the positive class.

    ``predicted`` and ``oracle`` are flat 0/1 sequences (or lists of them,
    which are concatenated).  Zero denominators give 0 and a flag.
    """
    p = _flatten(predicted)
    o = _flatten(oracle)
    if p.shape != o.shape:
        raise ContractViolation(f"length mismatch: {p.size} vs {o.size}")
    tp = int(np.sum(p & o))
    fp = int(np.sum(p & ~o))
    fn = int(np.sum(~p & o))
    flags = []
    if tp + fp == 0:
        precision = 0.0
        flags.append("no_predicted_uw")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 0.0
        flags.append("no_oracle_uw")
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0:
        f1 = 0.0
        flags.append("f1_undefined")
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return Accuracy(precision, recall, f1, flags)


def _flatten(x):
    if isinstance(x, IdentificationResult):
        x = x.uw_mask
    items = list(x)
    if items and isinstance(items[0], IdentificationResult):
        items = [v for r in items for v in r.uw_mask]
    elif items and isinstance(items[0], (list, tuple, np.ndarray)):
        items = [v for r in items for v in r]
    return np.asarray(items, dtype=bool)


# ------------------------------------------------------------------ output


def apply_results(samples, results, source):
    """Annotated copies of ``samples`` carrying the identifier's masks."""
    by_id = {r.sample_id: r for r in results}
    missing = [a.id for a in samples if a.id not in by_id]
    if missing:
        raise ContractViolation(f"no identification result for {missing[:3]}")
    return [a.with_mask(by_id[a.id].uw_mask, source) for a in samples]


def write_annotations(samples, path):
    """Annotations JSONL, one corpus-schema record per sample."""
    with open(path, "w", encoding="utf-8") as fh:
        for a in samples:
            fh.write(json.dumps(sample_to_record(a), sort_keys=True) + "\n")


def read_annotations(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip():
                out.append(record_to_sample(json.loads(line), where=f"line {n}"))
    return out


__all__ = [
    "AnnotatedSample", "IdentificationResult", "DEFAULT_STOPLIST", "train_masked_lm", "mlm_batch",
    "identify_discriminative", "identify_stopword", "jaccard_consistency", "identifier_accuracy",
    "apply_results", "write_annotations", "read_annotations",
]
