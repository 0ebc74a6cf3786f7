"""Label one forget answer with the stop-word and discriminative identifiers
and compare both with the oracle mask.

    python demos/identify.py [out_dir]
"""

import os
import sys

from unlearnlab import pipeline
from unlearnlab.config import ExperimentConfig

HERE = os.path.dirname(os.path.abspath(__file__))


def show(label, sample):
    words = [w.upper() if uw else w for w, uw in zip(sample.base.answer_words, sample.uw_mask)]
    print(f"{label:15s} {' '.join(words)}")


def main(out):
    base = ExperimentConfig.load(os.path.join(HERE, "tiny.json"))
    ws = pipeline.Workspace(base, out)
    if not os.path.exists(ws.corpus_path):
        pipeline.gen_corpus(ws)
    picks = {}
    for kind in ("oracle", "stopword", "discriminative"):
        ws = pipeline.Workspace(base.replace(identifier={"kind": kind}), out)
        picks[kind] = pipeline.identify(ws)
    print("unwanted words in upper case\n")
    for i in (0, 1, 2):
        for kind, got in picks.items():
            show(kind, got[i])
        print()


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "runs-demo")
