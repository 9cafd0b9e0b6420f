"""Train several encoding variants on the toy corpus with a matched budget and compare held-out EER.

    python scripts/ablation_toy.py --corpus /tmp/toy --epochs 10 --seeds 0 1 2 --ablations gap mla-sap-fr-dln
"""
import argparse
import logging

import numpy as np

from smla import corpus
from smla.config import RunConfig
from smla.experiments import ensure_corpus, run_toy
from smla.model import ABLATIONS


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--corpus", default="toy_corpus")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--ablations", nargs="+", default=["gap", "mla-sap-fr-dln"], choices=list(ABLATIONS))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    manifest, _ = ensure_corpus(args.corpus)
    data, _ = corpus.load_dataset(manifest, RunConfig.desk().frontend)
    summary = {}
    for name in args.ablations:
        eers = [run_toy(args.corpus, name, s, args.epochs, dataset=data).eer for s in args.seeds]
        summary[name] = eers
    for name, eers in summary.items():
        print(f"{name:<15} mean EER {np.mean(eers):6.2f}%  per seed {np.round(eers, 2).tolist()}")


if __name__ == "__main__":
    main()
