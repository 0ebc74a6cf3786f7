"""Unlearn the same original model with TPO and NPO on a tiny corpus and print
forget quality and utility per epoch.  Runs in well under a minute.

    python demos/compare_methods.py [out_dir]
"""

import os
import sys

from unlearnlab import pipeline
from unlearnlab.config import ExperimentConfig
from unlearnlab.experiments import method_config

HERE = os.path.dirname(os.path.abspath(__file__))


def main(out):
    base = ExperimentConfig.load(os.path.join(HERE, "tiny.json"))
    for method in ("TPO", "NPO"):
        cfg = method_config(base, method)
        ws = pipeline.Workspace(cfg, out)
        pipeline.ensure_model(ws, "original")
        pipeline.ensure_model(ws, "retained")
        pipeline.run_unlearning(ws)
        print(f"\n{cfg.objective().label}")
        print("epoch  forget_quality  utility  gw_ce   privleak")
        for r in pipeline.evaluate(ws):
            print(f"{r.epoch:5d}  {r.forget_quality:14.3g}  {r.model_utility:7.3f}  {r.gw_ce:6.3f}  {r.privleak:8.1f}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "runs-demo")
