"""Train the desk preset on the 8-speaker toy corpus and report held-out EER before and after.

    python scripts/learnability.py --corpus /tmp/toy --out runs/learnability
"""
import argparse
import logging
from pathlib import Path

from smla.experiments import run_toy
from smla.model import ABLATIONS


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--corpus", default="toy_corpus")
    p.add_argument("--out", default="runs/learnability")
    p.add_argument("--ablation", default="mla-sap-fr-dln", choices=list(ABLATIONS))
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = run_toy(args.corpus, args.ablation, args.seed, args.epochs, checkpoint_dir=out,
                  metrics_log=out / "metrics.log")
    print(res.line())


if __name__ == "__main__":
    main()
