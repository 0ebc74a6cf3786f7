"""Experiment stages behind the command line, plus the trade-off report.

Artifacts live in one output directory and are named after the hash of the
config blocks they depend on::

    config-<h>.json                 resolved config (h = whole-config hash)
    corpus-<h>.jsonl                generated bundle
    model-<role>-<h>.npz            trained original / retained / reinforce / encoder
    ckpt-<role>-<h>.npz             latest resumable checkpoint of that run
    annotations-<h>.jsonl           annotated forget set (+ identifier-<h>.json audit)
    unlearn-<h>/epoch-XX.npz        one model per unlearning epoch
    steps-<h>.csv                   per-step loss components
    eval-<h>/report-eXX.json        EvalReport per checkpoint
    run-<h>.csv                     one row per evaluated checkpoint
"""

from __future__ import annotations

import csv
import dataclasses
import glob
import io
import json
import logging
import math
import os
import re

import numpy as np

from .corpus import generate_corpus, ingest_external_annotations, read_jsonl, vocabulary_texts, write_jsonl
from .engine import STEP_COLUMNS, load_checkpoint, reinforce, save_checkpoint, train_lm, unlearn, lm_pairs
from .errors import ConfigError, PrerequisiteError
from .evaluation import REPORT_COLUMNS, Evaluator
from .identifier import (
    DEFAULT_STOPLIST,
    apply_results,
    identifier_accuracy,
    identify_discriminative,
    identify_stopword,
    read_annotations,
    train_masked_lm,
    write_annotations,
)
from .models import CausalLM, MaskedLM, ModelConfig, load_model, save_model
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def write_csv(path, columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


class Workspace:
    """Artifact paths for one config inside one output directory."""

    def __init__(self, cfg, out=None):
        self.cfg = cfg
        self.root = out or cfg.resolve(cfg["out"])
        os.makedirs(self.root, exist_ok=True)

    def path(self, name):
        return os.path.join(self.root, name)

    def stage(self, stage, prefix=None, suffix=".npz"):
        return self.path(f"{prefix or stage}-{self.cfg.stage_hash(stage)}{suffix}")

    def model_path(self, role):
        return self.path(f"model-{role}-{self.cfg.stage_hash(role)}.npz")

    def ckpt_path(self, role):
        return self.path(f"ckpt-{role}-{self.cfg.stage_hash(role)}.npz")

    @property
    def corpus_path(self):
        return self.stage("corpus", suffix=".jsonl")

    @property
    def annotations_path(self):
        return self.stage("annotations", suffix=".jsonl")

    @property
    def unlearn_dir(self):
        return self.path(f"unlearn-{self.cfg.stage_hash('unlearn')}")

    @property
    def steps_path(self):
        return self.path(f"steps-{self.cfg.stage_hash('unlearn')}.csv")

    @property
    def eval_dir(self):
        return self.path(f"eval-{self.cfg.stage_hash('eval')}")

    @property
    def run_csv(self):
        return self.path(f"run-{self.cfg.stage_hash('eval')}.csv")

    def save_config(self):
        p = self.path(f"config-{self.cfg.config_hash}.json")
        with open(p, "w", encoding="utf-8") as fh:
            fh.write(self.cfg.to_json() + "\n")
        return p

    def require(self, path, hint):
        if not os.path.exists(path):
            raise PrerequisiteError(f"missing {os.path.basename(path)} in {self.root}; run `{hint}` first")
        return path


# ------------------------------------------------------------------ stages


def gen_corpus(ws):
    c = ws.cfg["corpus"]
    bundle = generate_corpus(ws.cfg.seed, c["n_authors"], c["forget_fraction"], c["n_general"],
                             c["n_perturbed"], c["entity_reuse"])
    write_jsonl(bundle, ws.corpus_path)
    ws.save_config()
    return bundle


def load_corpus(ws):
    return read_jsonl(ws.require(ws.corpus_path, "gen-corpus"))


def corpus_tokenizer(bundle):
    return Tokenizer.from_texts(vocabulary_texts(bundle))


def _model_config(ws, tok):
    return ModelConfig(vocab_size=tok.vocab_size, **ws.cfg["model"])


def _epoch_saver(ws, role):
    path = ws.ckpt_path(role)

    def on_epoch(ck):
        save_checkpoint(path, ck)
        if ck.epoch:
            log.info("%s epoch %d %s", role, ck.epoch, ck.metrics)

    return on_epoch


def _resume(ws, role, checkpoint):
    if checkpoint is None:
        return None
    ck = load_checkpoint(checkpoint)
    if ck.config_hash and ck.config_hash != ws.cfg.stage_hash(role):
        raise ConfigError(f"checkpoint {checkpoint} belongs to a different {role} config", "/train/" + role)
    return ck


def train(ws, role, checkpoint=None):
    """Train the ``original``, ``retained`` or ``reinforce`` model (``encoder`` too)."""
    bundle = load_corpus(ws)
    tok = corpus_tokenizer(bundle)
    h = ws.cfg.stage_hash(role)
    resume = _resume(ws, role, checkpoint)
    if role in ("original", "retained"):
        splits = ("forget", "retain", "general") if role == "original" else ("retain", "general")
        samples = [a for s in splits for a in bundle[s]]
        model = CausalLM(_model_config(ws, tok), seed=ws.cfg.seed)
        train_lm(model, lm_pairs(tok, samples), ws.cfg.train_config(role), resume=resume,
                 on_epoch=_epoch_saver(ws, role), config_hash=h)
    elif role == "reinforce":
        original, _, _ = load_model(ws.require(ws.model_path("original"), "train --role original"))
        r = ws.cfg["train"]["reinforce"]
        model, _ = reinforce(original, bundle["forget"], tok, ws.cfg.train_config("unlearn"), r["target_nll"],
                             r["max_epochs"], on_epoch=_epoch_saver(ws, role), resume=resume, config_hash=h)
    elif role == "encoder":
        ident = ws.cfg["identifier"]
        splits = ("retain", "general") if ident["encoder_corpus"] == "retain+general" else ("forget", "retain", "general")
        model = MaskedLM(_model_config(ws, tok), seed=ident["encoder_seed"])
        cfg = dataclasses.replace(ws.cfg.train_config("encoder"), seed=ident["encoder_seed"])
        train_masked_lm(model, tok, [a for s in splits for a in bundle[s]], cfg)
    else:
        raise ConfigError(f"unknown role {role!r}", "/role")
    save_model(ws.model_path(role), model, tok, extra={"role": role, "stage_hash": h})
    ws.save_config()
    return model


def ensure_model(ws, role):
    """Load a trained model, training it (and the corpus) first if needed."""
    if not os.path.exists(ws.corpus_path):
        gen_corpus(ws)
    if not os.path.exists(ws.model_path(role)):
        train(ws, role)
    return load_model(ws.model_path(role))[0]


def identify(ws):
    """Annotate the forget set with the configured identifier; returns the samples."""
    bundle = load_corpus(ws)
    tok = corpus_tokenizer(bundle)
    ident = ws.cfg["identifier"]
    forget = list(bundle["forget"])
    kind = ident["kind"]
    audit = {"identifier": kind}
    if kind in ("oracle", "none"):
        annotated = forget
    elif kind == "stopword":
        stop = DEFAULT_STOPLIST
        if ident["stoplist"]:
            with open(ws.cfg.resolve(ident["stoplist"]), encoding="utf-8") as fh:
                stop = frozenset(w.strip().lower() for w in fh if w.strip())
        annotated = apply_results(forget, [identify_stopword(a, stop) for a in forget], "stopword")
    elif kind == "discriminative":
        encoder = ensure_model(ws, "encoder")
        results = identify_discriminative(encoder, tok, forget, top_k=ident["top_k"])
        annotated = apply_results(forget, results, "discriminative")
        audit["oov_words"] = sum(len(r.flags) for r in results)
    elif kind == "external":
        with open(ws.cfg.resolve(ident["annotations"]), encoding="utf-8") as fh:
            got = {a.id: a for a in ingest_external_annotations(fh.read(), bundle)}
        missing = [a.id for a in forget if a.id not in got]
        if missing:
            raise ConfigError(f"external annotations miss {len(missing)} forget samples (e.g. {missing[0]})",
                              "/identifier/annotations")
        annotated = [got[a.id] for a in forget]
    else:  # pragma: no cover - schema guards this
        raise ConfigError(f"unknown identifier {kind!r}", "/identifier/kind")
    acc = identifier_accuracy([a.uw_mask for a in annotated], [a.uw_mask for a in forget])
    audit.update(precision=acc.precision, recall=acc.recall, f1=acc.f1, flags=acc.flags)
    write_annotations(annotated, ws.annotations_path)
    with open(ws.stage("annotations", prefix="identifier", suffix=".json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(audit, sort_keys=True, indent=2) + "\n")
    ws.save_config()
    return annotated


def forget_samples(ws, bundle):
    if ws.cfg.objective().reads_masks:
        if not os.path.exists(ws.annotations_path):
            identify(ws)
        return read_annotations(ws.annotations_path)
    return list(bundle["forget"])


def run_unlearning(ws, checkpoint=None):
    """Unlearn per the config; writes one model per epoch and the step CSV."""
    bundle = load_corpus(ws)
    tok = corpus_tokenizer(bundle)
    original, _, _ = load_model(ws.require(ws.model_path("original"), "train --role original"))
    objective = ws.cfg.objective()
    forget = forget_samples(ws, bundle)
    reinforced = None
    if objective.kind == "TaskVector":
        reinforced, _, _ = load_model(ws.require(ws.model_path("reinforce"), "train --role reinforce"))
    os.makedirs(ws.unlearn_dir, exist_ok=True)
    h = ws.cfg.stage_hash("unlearn")
    resume = _resume(ws, "unlearn", checkpoint)
    ckpt_path = ws.ckpt_path("unlearn")

    def on_epoch(ck):
        m = original.clone()
        ck.load_into(m)
        save_model(os.path.join(ws.unlearn_dir, f"epoch-{ck.epoch:02d}.npz"), m, tok,
                   extra={"epoch": ck.epoch, "method": objective.label, "stage_hash": h})
        if ck.opt_state is not None:
            save_checkpoint(ckpt_path, ck)

    prior = read_csv(ws.steps_path) if resume is not None and os.path.exists(ws.steps_path) else []
    prior = [r for r in prior if resume is None or int(r["step"]) < resume.step]
    traj, steps = unlearn(original, forget, list(bundle["retain"]), tok, objective,
                          ws.cfg.train_config("unlearn"), resume=resume, on_epoch=on_epoch, reinforced=reinforced,
                          config_hash=h)
    rows = [{k: (v if k == "objective" else float(v) if k in STEP_COLUMNS[3:] else int(v)) for k, v in r.items()}
            for r in prior] + list(steps)
    write_csv(ws.steps_path, STEP_COLUMNS, rows)
    ws.save_config()
    return traj


def _epoch_of(path):
    m = re.search(r"epoch-(\d+)\.npz$", path)
    return int(m.group(1)) if m else -1


def evaluate(ws, pattern=None):
    """Evaluate unlearning checkpoints; writes report JSONs and the run CSV."""
    bundle = load_corpus(ws)
    tok = corpus_tokenizer(bundle)
    original, _, _ = load_model(ws.require(ws.model_path("original"), "train --role original"))
    retained, _, _ = load_model(ws.require(ws.model_path("retained"), "train --role retained"))
    if pattern is None:
        files = sorted(glob.glob(os.path.join(ws.unlearn_dir, "epoch-*.npz")))
    else:
        pat = pattern if os.path.isabs(pattern) or os.path.dirname(pattern) else os.path.join(ws.root, pattern)
        files = sorted(glob.glob(pat))
    if not files:
        raise PrerequisiteError(f"no checkpoints match {pattern or ws.unlearn_dir + '/epoch-*.npz'}; run `unlearn` first")
    e = ws.cfg["eval"]
    ev = Evaluator(tok, bundle, retained, original, n_probe=e["n_probe"], k_percent=e["k_percent"],
                   aggregation=e["aggregation"])
    os.makedirs(ws.eval_dir, exist_ok=True)
    reports = []
    for f in files:
        model, _, extra = load_model(f)
        epoch = int(extra.get("epoch", _epoch_of(f)))
        rep = ev(model, checkpoint=os.path.relpath(f, ws.root), method=extra.get("method", ""),
                 seed=ws.cfg.seed, epoch=epoch)
        with open(os.path.join(ws.eval_dir, f"report-e{epoch:02d}.json"), "w", encoding="utf-8") as fh:
            fh.write(rep.to_json() + "\n")
        reports.append(rep)
    reports.sort(key=lambda r: (r.epoch, r.checkpoint))
    write_csv(ws.run_csv, REPORT_COLUMNS, [r.row() for r in reports])
    ws.save_config()
    return reports


# ------------------------------------------------------------------ report


def peak_rows(rows):
    """Per (method, seed): the row with the highest forget quality (earliest on ties)."""
    best = {}
    for r in rows:
        key = (r["method"], str(r["seed"]))
        fq = float(r["forget_quality"])
        if key not in best or fq > float(best[key]["forget_quality"]):
            best[key] = r
    return best


_PALETTE = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"]


def tradeoff_svg(rows, width=640, height=440):
    """Forget quality (log axis) against model utility, one polyline per method/seed."""
    pad_l, pad_r, pad_t, pad_b = 70, 160, 30, 50
    fq_floor = 1e-6
    xs = [float(r["model_utility"]) for r in rows] or [0.0]
    x_lo, x_hi = 0.0, max(1e-9, max(xs)) * 1.05
    y_lo, y_hi = math.log10(fq_floor), 0.0

    def X(u):
        return pad_l + (u - x_lo) / (x_hi - x_lo) * (width - pad_l - pad_r)

    def Y(fq):
        v = math.log10(max(fq, fq_floor))
        return pad_t + (y_hi - v) / (y_hi - y_lo) * (height - pad_t - pad_b)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    x0, x1, y0, y1 = pad_l, width - pad_r, pad_t, height - pad_b
    out.append(f'<path d="M{x0},{y0} L{x0},{y1} L{x1},{y1}" stroke="black" fill="none"/>')
    for k in range(0, 7):
        fq = 10.0 ** -k
        y = Y(fq)
        out.append(f'<line x1="{x0 - 4}" y1="{y:.1f}" x2="{x0}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{x0 - 6}" y="{y + 4:.1f}" text-anchor="end">1e-{k}</text>')
    for k in range(6):
        u = x_lo + k * (x_hi - x_lo) / 5
        x = X(u)
        out.append(f'<line x1="{x:.1f}" y1="{y1}" x2="{x:.1f}" y2="{y1 + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{y1 + 16}" text-anchor="middle">{u:.2f}</text>')
    y05 = Y(0.05)
    out.append(f'<line x1="{x0}" y1="{y05:.1f}" x2="{x1}" y2="{y05:.1f}" stroke="#999" stroke-dasharray="4,3"/>')
    out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{height - 12}" text-anchor="middle">model utility</text>')
    out.append(f'<text x="16" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" transform="rotate(-90 16 {(y0 + y1) / 2:.1f})">forget quality (KS p-value)</text>')

    methods = sorted({r["method"] for r in rows})
    peaks = peak_rows(rows)
    for i, m in enumerate(methods):
        color = _PALETTE[i % len(_PALETTE)]
        for seed in sorted({str(r["seed"]) for r in rows if r["method"] == m}):
            pts = sorted((int(r["epoch"]), float(r["model_utility"]), float(r["forget_quality"]))
                         for r in rows if r["method"] == m and str(r["seed"]) == seed)
            d = " ".join(f"{'M' if j == 0 else 'L'}{X(u):.1f},{Y(fq):.1f}" for j, (_, u, fq) in enumerate(pts))
            out.append(f'<path d="{d}" stroke="{color}" fill="none" stroke-opacity="0.6"/>')
            pk = peaks[(m, seed)]
            out.append(f'<circle cx="{X(float(pk["model_utility"])):.1f}" cy="{Y(float(pk["forget_quality"])):.1f}" r="4" fill="{color}"/>')
        ly = pad_t + 16 * i
        out.append(f'<rect x="{x1 + 14}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{x1 + 30}" y="{ly + 1}">{_xml(m)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _xml(s):
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def summary_table(rows):
    """Markdown table of each method's peak-forget-quality epoch, averaged over seeds."""
    peaks = peak_rows(rows)
    finals = {}
    for r in rows:
        key = (r["method"], str(r["seed"]))
        if key not in finals or int(r["epoch"]) > int(finals[key]["epoch"]):
            finals[key] = r
    lines = ["| method | seeds | peak epoch | forget quality | model utility | privleak | final utility |",
             "|---|---|---|---|---|---|---|"]
    for m in sorted({k[0] for k in peaks}):
        keys = sorted(k for k in peaks if k[0] == m)

        def mean(field, src):
            return float(np.mean([float(src[k][field]) for k in keys]))

        epochs = "/".join(str(peaks[k]["epoch"]) for k in keys)
        lines.append(f"| {m} | {len(keys)} | {epochs} | {mean('forget_quality', peaks):.4f} | "
                     f"{mean('model_utility', peaks):.4f} | {mean('privleak', peaks):.2f} | "
                     f"{mean('model_utility', finals):.4f} |")
    return "\n".join(lines) + "\n"


def report(csv_paths, out_dir):
    """Merge run CSVs into a trade-off SVG and a summary table; returns both paths."""
    if not csv_paths:
        raise PrerequisiteError("no run CSVs given; run `evaluate` first")
    rows = []
    for p in sorted(csv_paths):
        if not os.path.exists(p):
            raise PrerequisiteError(f"missing run CSV {p}; run `evaluate` first")
        rows.extend(read_csv(p))
    if not rows:
        raise PrerequisiteError("run CSVs are empty")
    from .config import digest

    h = digest(sorted(os.path.basename(p) for p in csv_paths))
    os.makedirs(out_dir, exist_ok=True)
    svg = os.path.join(out_dir, f"tradeoff-{h}.svg")
    table = os.path.join(out_dir, f"summary-{h}.md")
    with open(svg, "w", encoding="utf-8") as fh:
        fh.write(tradeoff_svg(rows))
    with open(table, "w", encoding="utf-8") as fh:
        fh.write(summary_table(rows))
    return svg, table
