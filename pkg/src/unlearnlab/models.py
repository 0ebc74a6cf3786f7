"""Small transformer language models on top of :mod:`unlearnlab.autodiff`.

Both models share one pre-LN transformer stack.  ``CausalLM`` masks future
positions; ``MaskedLM`` attends in both directions and only masks padding.
Parameters live in an ordered dict so the whole model flattens to a single
vector in a fixed order (used by weight arithmetic and checkpoints).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation
from .tokenizer import Tokenizer

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 64
    d_ff: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


class Transformer:
    causal = True

    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        std = 0.02

        def w(*shape, scale=std):
            return rng.normal(0.0, scale, size=shape)

        p = {}
        p["tok_emb"] = w(c.vocab_size, c.d_model)
        p["pos_emb"] = w(c.max_len, c.d_model)
        for i in range(c.n_layers):
            p[f"h{i}.ln1.g"] = np.ones(c.d_model)
            p[f"h{i}.ln1.b"] = np.zeros(c.d_model)
            p[f"h{i}.attn.wq"] = w(c.d_model, c.d_model)
            p[f"h{i}.attn.wk"] = w(c.d_model, c.d_model)
            p[f"h{i}.attn.wv"] = w(c.d_model, c.d_model)
            p[f"h{i}.attn.wo"] = w(c.d_model, c.d_model, scale=std / np.sqrt(2 * c.n_layers))
            p[f"h{i}.ln2.g"] = np.ones(c.d_model)
            p[f"h{i}.ln2.b"] = np.zeros(c.d_model)
            p[f"h{i}.mlp.w1"] = w(c.d_model, c.d_ff)
            p[f"h{i}.mlp.b1"] = np.zeros(c.d_ff)
            p[f"h{i}.mlp.w2"] = w(c.d_ff, c.d_model, scale=std / np.sqrt(2 * c.n_layers))
            p[f"h{i}.mlp.b2"] = np.zeros(c.d_model)
        p["ln_f.g"] = np.ones(c.d_model)
        p["ln_f.b"] = np.zeros(c.d_model)
        p["head"] = w(c.d_model, c.vocab_size)
        self.params = {k: ad.parameter(v, name=k) for k, v in p.items()}

    # -- parameter plumbing
    def parameters(self):
        return list(self.params.values())

    def num_params(self):
        return int(np.sum([t.size for t in self.params.values()]))

    def get_flat(self):
        return np.concatenate([t.data.reshape(-1) for t in self.params.values()])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.num_params(),):
            raise ValueError(f"flat vector has shape {vec.shape}, expected ({self.num_params()},)")
        offset = 0
        for t in self.params.values():
            n = t.size
            t.data = vec[offset : offset + n].reshape(t.shape).copy()
            offset += n

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            raise ValueError("state dict keys do not match model parameters")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def clone(self):
        other = type(self).__new__(type(self))
        other.config = self.config
        other.params = {k: ad.parameter(t.data.copy(), name=k) for k, t in self.params.items()}
        return other

    # -- forward
    def _attn_bias(self, tokens):
        B, T = tokens.shape
        if self.causal:
            bias = np.triu(np.full((T, T), NEG_INF), k=1)
            return bias[None, None]
        keypad = np.where(tokens == 0, NEG_INF, 0.0)  # pad id is 0
        return keypad[:, None, None, :]

    def forward(self, tokens):
        """Logits ``[B, T, V]`` (or ``[T, V]`` for a 1-D input)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None]
        B, T = tokens.shape
        c = self.config
        if T < 1 or T > c.max_len:
            raise ValueError(f"sequence length {T} outside [1, {c.max_len}]")
        p = self.params
        H, dh = c.n_heads, c.d_model // c.n_heads
        bias = ad.Tensor(self._attn_bias(tokens))
        scale = 1.0 / np.sqrt(dh)

        x = ad.gather(p["tok_emb"], tokens) + ad.gather(p["pos_emb"], np.arange(T))
        for i in range(c.n_layers):
            h = ad.layer_norm(x) * p[f"h{i}.ln1.g"] + p[f"h{i}.ln1.b"]

            def heads(m):
                return ad.transpose(ad.reshape(m, (B, T, H, dh)), (0, 2, 1, 3))

            q = heads(h @ p[f"h{i}.attn.wq"])
            k = heads(h @ p[f"h{i}.attn.wk"])
            v = heads(h @ p[f"h{i}.attn.wv"])
            att = ad.softmax((q @ ad.transpose(k, (0, 1, 3, 2))) * scale + bias)
            o = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (B, T, c.d_model))
            x = x + o @ p[f"h{i}.attn.wo"]
            h = ad.layer_norm(x) * p[f"h{i}.ln2.g"] + p[f"h{i}.ln2.b"]
            h = ad.gelu(h @ p[f"h{i}.mlp.w1"] + p[f"h{i}.mlp.b1"])
            x = x + h @ p[f"h{i}.mlp.w2"] + p[f"h{i}.mlp.b2"]
        x = ad.layer_norm(x) * p["ln_f.g"] + p["ln_f.b"]
        logits = x @ p["head"]
        if single:
            logits = ad.reshape(logits, (T, c.vocab_size))
        return logits

    __call__ = forward


class CausalLM(Transformer):
    causal = True
    kind = "causal"


class MaskedLM(Transformer):
    causal = False
    kind = "masked"


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    """Teacher-forcing layout for (prompt, answer) pairs.

    Row ``b`` holds ``[BOS] + x + y`` (+ ``[EOS]`` target).  Position ``p``
    predicts ``targets[b, p]``; ``answer`` flags positions whose target is an
    answer word, ``eos`` the position whose target is the end token.
    ``uw``/``gw`` split ``answer`` when masks are supplied.
    """

    tokens: np.ndarray
    targets: np.ndarray
    answer: np.ndarray
    eos: np.ndarray
    uw: np.ndarray
    gw: np.ndarray

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def answer_lengths(self):
        return self.answer.sum(axis=1)


def make_batch(pairs, masks=None, bos_id=2, eos_id=3, pad_id=0):
    """Build a :class:`Batch` from ``(x_ids, y_ids)`` pairs and optional UW masks."""
    if not pairs:
        raise ContractViolation("empty batch")
    rows = []
    for x, y in pairs:
        if len(y) < 1:
            raise ContractViolation("answer must contain at least one token")
        rows.append([bos_id, *x, *y, eos_id])
    T = max(len(r) for r in rows) - 1
    B = len(rows)
    tokens = np.full((B, T), pad_id, dtype=np.int64)
    targets = np.full((B, T), pad_id, dtype=np.int64)
    answer = np.zeros((B, T), dtype=bool)
    eos = np.zeros((B, T), dtype=bool)
    uw = np.zeros((B, T), dtype=bool)
    for b, (row, (x, y)) in enumerate(zip(rows, pairs)):
        n = len(row) - 1
        tokens[b, :n] = row[:-1]
        targets[b, :n] = row[1:]
        start = len(x)
        answer[b, start : start + len(y)] = True
        eos[b, start + len(y)] = True
        if masks is not None:
            m = np.asarray(masks[b], dtype=bool)
            if m.shape != (len(y),):
                raise ContractViolation(f"mask length {m.size} != answer length {len(y)}")
            uw[b, start : start + len(y)] = m
    gw = answer & ~uw if masks is not None else np.zeros_like(answer)
    return Batch(tokens, targets, answer, eos, uw, gw)


def token_logprobs(model, batch):
    """Differentiable ``log P(target)`` at every position, shape ``[B, T]``."""
    logits = model(batch.tokens)
    return ad.take_along_last(ad.log_softmax(logits), batch.targets)


# ---------------------------------------------------------------- inference


def forward_causal(model, tokens):
    """Logits ``[T, V]`` for one token sequence, as a plain array."""
    with ad.no_grad():
        return model(np.asarray(tokens, dtype=np.int64)).data


def sequence_logprob(model, x, y, bos_id=2):
    """Per-token ``log P(y_t | x, y_<t)`` as an array of length ``len(y)``."""
    if len(y) < 1:
        raise ContractViolation("y must be non-empty")
    return batch_answer_logprobs(model, [(x, y)], bos_id=bos_id)[0]


def batch_answer_logprobs(model, pairs, bos_id=2, chunk=128):
    """Per-token answer log-probs for many pairs (list of arrays)."""
    out = []
    for s in range(0, len(pairs), chunk):
        part = pairs[s : s + chunk]
        batch = make_batch(part, bos_id=bos_id)
        with ad.no_grad():
            lp = token_logprobs(model, batch).data
        for b in range(len(part)):
            out.append(lp[b][batch.answer[b]].copy())
    return out


def predict_masked(model, x, y_masked, mask_id=4, bos_id=2, eos_id=3, top_k=1):
    """Top-scoring token id(s) at the single MASK position of ``y_masked``.

    Ties go to the lowest token id.  Returns an int for ``top_k == 1`` and a
    list of ids otherwise.
    """
    y_masked = list(y_masked)
    hits = [i for i, t in enumerate(y_masked) if t == mask_id]
    if len(hits) != 1:
        raise ContractViolation(f"expected exactly one MASK, found {len(hits)}")
    seq = [bos_id, *x, *y_masked, eos_id]
    pos = 1 + len(x) + hits[0]
    with ad.no_grad():
        row = model(np.asarray(seq, dtype=np.int64)).data[pos]
    if top_k == 1:
        return int(np.argmax(row))
    order = np.argsort(-row, kind="stable")
    return [int(i) for i in order[:top_k]]


def generate_greedy(model, prompt, max_new, bos_id=2, eos_id=3):
    """Greedy continuation of ``prompt`` (EOS excluded from the output)."""
    return generate_greedy_batch(model, [prompt], max_new, bos_id=bos_id, eos_id=eos_id)[0]


def generate_greedy_batch(model, prompts, max_new, bos_id=2, eos_id=3):
    """Greedy continuations for several prompts at once (right-padded, causal)."""
    if max_new < 0:
        raise ContractViolation("max_new must be >= 0")
    limit = model.config.max_len
    seqs = [[bos_id, *p] for p in prompts]
    outs = [[] for _ in prompts]
    alive = [i for i, s in enumerate(seqs) if len(s) <= limit]
    for _ in range(max_new):
        if not alive:
            break
        buf = np.zeros((len(alive), max(len(seqs[i]) for i in alive)), dtype=np.int64)
        for r, i in enumerate(alive):
            buf[r, : len(seqs[i])] = seqs[i]
        with ad.no_grad():
            logits = model(buf).data
        still = []
        for r, i in enumerate(alive):
            nxt = int(np.argmax(logits[r, len(seqs[i]) - 1]))
            if nxt == eos_id:
                continue
            seqs[i].append(nxt)
            outs[i].append(nxt)
            if len(seqs[i]) <= limit:
                still.append(i)
        alive = still
    return outs


# ---------------------------------------------------------------- checkpoints


def save_model(path, model, tokenizer, extra=None):
    """Write an ``.npz`` holding a JSON header plus float64 parameter arrays.

    Header keys: ``kind`` (causal|masked), ``config`` (ModelConfig fields),
    ``vocab`` (id-ordered word list) and ``extra`` (free-form JSON).
    Parameters are stored under ``param/<name>`` in model order.
    """
    meta = {
        "format": "unlearnlab-checkpoint/1",
        "kind": model.kind,
        "config": asdict(model.config),
        "vocab": tokenizer.itos,
        "param_order": list(model.params),
        "extra": extra or {},
    }
    arrays = {f"param/{k}": t.data for k, t in model.params.items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path):
    """Inverse of :func:`save_model`; returns ``(model, tokenizer, extra)``."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        state = {k: z[f"param/{k}"] for k in meta["param_order"]}
    cls = CausalLM if meta["kind"] == "causal" else MaskedLM
    model = cls.__new__(cls)
    model.config = ModelConfig(**meta["config"])
    model.params = {k: ad.parameter(v, name=k) for k, v in state.items()}
    tok = Tokenizer(meta["vocab"][5:])
    return model, tok, meta["extra"]
