"""The multi-seed desk protocol comparing TPO with NPO variants.

Every method is regularised with the retain NLL (``gdr_weight=1``): at desk
scale, unregularised preference losses wipe out every answer slot before
forget quality moves, so the comparison is made between regularised variants.
"""

from __future__ import annotations

import os
import time

from . import pipeline
from .config import ExperimentConfig

METHODS = {
    "TPO": {"kind": "TPO", "beta": 0.1, "lambda": 100.0, "gdr_weight": 1.0},
    "NPO": {"kind": "NPO", "beta": 0.1, "gdr_weight": 1.0},
    "NPO-targeted": {"kind": "NPO", "beta": 0.1, "targeted": True, "gdr_weight": 1.0},
    "NPO-targeted+PL": {"kind": "NPO", "beta": 0.1, "targeted": True, "add_pl": True, "gdr_weight": 1.0},
}


def method_config(base, method):
    return base.replace(objective={**base["objective"], **METHODS[method]})


def run_seed(base, seed, out, methods=tuple(METHODS)):
    """Train (or reuse) the seed's models, then unlearn and evaluate each method.

    Returns ``{method: [EvalReport, ...]}`` sorted by epoch.
    """
    cfg = base.replace(seed=seed)
    ws = pipeline.Workspace(cfg, out)
    pipeline.ensure_model(ws, "original")
    pipeline.ensure_model(ws, "retained")
    results = {}
    for m in methods:
        mws = pipeline.Workspace(method_config(cfg, m), out)
        pipeline.run_unlearning(mws)
        results[m] = pipeline.evaluate(mws)
    return results


def run_protocol(seeds=(0, 1, 2), out="desk-runs", base=None, methods=tuple(METHODS)):
    """All seeds; returns ``({seed: {method: reports}}, seconds)``."""
    base = base or ExperimentConfig({})
    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()
    res = {s: run_seed(base, s, out, methods) for s in seeds}
    return res, time.perf_counter() - t0


def peak(reports):
    """Report with the highest forget quality (earliest epoch on ties)."""
    return max(reports, key=lambda r: (r.forget_quality, -r.epoch))
