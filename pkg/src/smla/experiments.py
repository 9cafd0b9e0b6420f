"""Toy-corpus experiments shared by the acceptance suite and ``scripts/``."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus
from . import evaluation as E
from . import model as M
from . import training as TR
from .config import RunConfig

log = logging.getLogger(__name__)


@dataclass
class ToyResult:
    ablation: str
    seed: int
    epochs: int
    untrained_eer: float
    eer: float
    min_dcf: float
    train_accuracy: float
    losses: list = field(default_factory=list)
    seconds: float = 0.0

    def line(self):
        return (f"{self.ablation:<15} seed={self.seed} epochs={self.epochs} untrained_EER={self.untrained_eer:6.2f}% "
                f"EER={self.eer:6.2f}% minDCF={self.min_dcf:.4f} train_acc={self.train_accuracy:.4f} "
                f"({self.seconds:.0f}s)")


def ensure_corpus(out_dir, spec=None):
    """Generate the toy corpus unless ``out_dir`` already holds one."""
    out = Path(out_dir)
    if not (out / "manifest.tsv").is_file() or not (out / "trials.txt").is_file():
        corpus.generate_corpus(spec or corpus.SynthCorpusSpec(), out)
    return out / "manifest.tsv", out / "trials.txt"


def run_toy(corpus_dir, ablation="mla-sap-fr-dln", seed=0, epochs=30, dataset=None, checkpoint_dir=None,
            metrics_log=None) -> ToyResult:
    """Train the desk preset on the toy corpus and score its held-out trials."""
    manifest, trials = ensure_corpus(corpus_dir)
    rc = RunConfig.desk().with_ablation(ablation)
    rc.train.seed, rc.train.epochs = seed, epochs
    if dataset is None:
        dataset, speakers = corpus.load_dataset(manifest, rc.frontend)
        rc.model = rc.model.replace(num_speakers=len(speakers))
    else:
        rc.model = rc.model.replace(num_speakers=len({lab for _, lab in dataset}))
    start = time.perf_counter()
    params = M.build(rc.model, np.random.default_rng(seed))
    untrained = E.evaluate(params, rc.model, trials, rc.frontend)[1]["eer"]
    reports = TR.fit(params, TR.TrainState.fresh(rc.train), dataset, rc, metrics_log=metrics_log,
                     checkpoint_dir=checkpoint_dir)
    _, metrics = E.evaluate(params, rc.model, trials, rc.frontend)
    result = ToyResult(ablation, seed, epochs, untrained, metrics["eer"], metrics["min_dcf"],
                       reports[-1].accuracy if reports else float("nan"), [r.loss for r in reports],
                       time.perf_counter() - start)
    log.info(result.line())
    return result
