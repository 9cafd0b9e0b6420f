"""Command-line entry point: ``smla <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data/ingestion error,
4 numeric error, 5 evaluation error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus, diagnostics
from . import evaluation as E
from . import model as M
from . import training as TR
from .config import RunConfig
from .errors import ConfigError, EvaluationError, IngestionError, NumericError, SmlaError

log = logging.getLogger("smla")


# ------------------------------------------------------------------ helpers
def _run_config(args) -> RunConfig:
    base = RunConfig.full() if getattr(args, "paper_hparams", False) else RunConfig.desk()
    rc = RunConfig.load(args.config, base) if getattr(args, "config", None) else base
    if getattr(args, "ablation", None):
        rc = rc.with_ablation(args.ablation)
    if getattr(args, "seed", None) is not None:
        rc.train.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        rc.train.epochs = args.epochs
    return rc


def _load(path, what="checkpoint"):
    if not path:
        raise ConfigError(f"--checkpoint is required to {what}")
    if not Path(path).is_file():
        raise IngestionError(f"checkpoint not found: {path}")
    return TR.load_checkpoint(path)


def _utterance_list(items):
    """Expand arguments: WAV paths are kept, any other file is read as one path per line."""
    out = []
    for item in items:
        p = Path(item)
        if p.suffix.lower() == ".wav":
            out.append(p)
        elif p.is_file():
            out.extend(Path(line.strip()) if Path(line.strip()).is_absolute() else p.parent / line.strip()
                       for line in p.read_text().splitlines() if line.strip())
        else:
            raise IngestionError(f"no such audio file or list: {p}")
    return out


# ------------------------------------------------------------------ commands
def cmd_synth_data(args):
    spec = corpus.SynthCorpusSpec(num_speakers=args.speakers, utterances=args.utterances,
                                  heldout=args.heldout, duration=args.duration,
                                  seed=args.seed if args.seed is not None else 0)
    info = corpus.generate_corpus(spec, args.out)
    print(f"wrote {len(info['train'])} training and {len(info['heldout'])} held-out utterances; "
          f"manifest {info['manifest']}, trials {info['trials']}")


def cmd_train(args):
    rc = _run_config(args)
    manifest = args.manifest or rc.run.manifest
    if not manifest:
        raise ConfigError("no training manifest: pass --manifest or set [run] manifest")
    out = Path(args.out or rc.run.out or "run")
    data, speakers = corpus.load_dataset(manifest, rc.frontend)
    rc.model = rc.model.replace(num_speakers=len(speakers))
    rc.run.manifest = str(manifest)
    if args.checkpoint:
        ck = _load(args.checkpoint)
        if ck.state is None:
            raise ConfigError(f"{args.checkpoint} holds no optimiser state; cannot resume")
        rc.model = ck.config.model
        params, state = ck.params, ck.state
        log.info("resuming from %s at epoch %d", args.checkpoint, state.epoch)
    else:
        params = M.build(rc.model, np.random.default_rng(rc.train.seed))
        state = TR.TrainState.fresh(rc.train)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(rc.to_text())
    metrics = Path(rc.run.metrics_log) if rc.run.metrics_log else out / "metrics.log"
    if not args.checkpoint and metrics.exists():
        metrics.unlink()
    reports = TR.fit(params, state, data, rc, metrics_log=metrics, checkpoint_dir=out)
    if reports:
        last = reports[-1]
        print(f"epoch {last.epoch}: loss {last.loss:.4f} accuracy {last.accuracy:.4f}; "
              f"checkpoints in {out} (embedding dim {rc.model.embedding_dim})")


def cmd_embed(args):
    ck = _load(args.checkpoint, "embed")
    utts = _utterance_list(args.inputs)
    if not args.out:
        raise ConfigError("--out is required")
    vecs = E.extract_embeddings(ck.params, ck.config.model, utts, ck.config.frontend) if utts else []
    E.write_embeddings(args.out, [(str(u), v) for u, v in zip(utts, vecs)], ck.config.model.embedding_dim,
                       text=args.text)
    print(f"wrote {len(utts)} embeddings to {args.out}")


def _report(scores, out):
    eer, thr_eer = E.compute_eer(scores)
    dcf, thr_dcf = E.compute_min_dcf(scores)
    line = E.summary_line(eer, dcf, thr_eer, thr_dcf)
    if out:
        E.write_scores(out, scores, line)
    print(line)


def cmd_score(args):
    if not args.embeddings or not args.trials:
        raise ConfigError("score needs --embeddings and --trials")
    table = E.read_embeddings(args.embeddings)
    trials = E.read_trials(args.trials)
    for t in trials:
        for u in (t.enroll, t.test):
            if u not in table:
                raise EvaluationError(f"{args.trials}:{t.line}: no embedding for {u}")
    _report(E.score_trials(trials, table), args.out)


def cmd_eval(args):
    ck = _load(args.checkpoint, "evaluate")
    trials = args.trials or ck.config.run.trials
    if not trials:
        raise ConfigError("--trials is required")
    scores, _ = E.evaluate(ck.params, ck.config.model, trials, ck.config.frontend)
    _report(scores, args.out)


def cmd_grad_check(args):
    seed = args.seed if args.seed is not None else 0
    rep = diagnostics.model_gradient_check(seed=seed, n_coords=args.coords)
    for name, err in sorted(rep.errors.items()):
        print(f"{name}\t{err:.3e}")
    status = "PASS" if rep.passed else "FAIL"
    print(f"{status}: {rep.checked} coordinates, max relative error {rep.max_rel_error:.3e} "
          f"(tolerance {rep.tolerance:g})")
    if not rep.passed:
        raise NumericError(f"gradient check failed on {len(rep.failures)} coordinates")


# ------------------------------------------------------------------ parser
def build_parser():
    p = argparse.ArgumentParser(prog="smla", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *flags):
        if "config" in flags:
            sp.add_argument("--config", help="run configuration file")
        if "seed" in flags:
            sp.add_argument("--seed", type=int)
        if "ablation" in flags:
            sp.add_argument("--ablation", choices=list(M.ABLATIONS),
                            help="encoding variant (sets encoding mode, recalibration, length norm)")
        if "paper" in flags:
            sp.add_argument("--paper-hparams", action="store_true",
                            help="full-size network, 1200-frame inputs, batch 96, 200 epochs")
        if "checkpoint" in flags:
            sp.add_argument("--checkpoint")
        if "trials" in flags:
            sp.add_argument("--trials")
        if "out" in flags:
            sp.add_argument("--out")
        if "text" in flags:
            sp.add_argument("--text", action="store_true", help="write embeddings as text")

    sp = sub.add_parser("synth-data", help="generate the synthetic speaker corpus")
    common(sp, "seed")
    sp.add_argument("--out", required=True)
    sp.add_argument("--speakers", type=int, default=8)
    sp.add_argument("--utterances", type=int, default=20)
    sp.add_argument("--heldout", type=int, default=10)
    sp.add_argument("--duration", type=float, default=3.0)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("train", help="train a model; --checkpoint resumes")
    common(sp, "config", "seed", "ablation", "paper", "checkpoint", "out")
    sp.add_argument("--manifest", help="speaker<TAB>wav manifest (overrides [run] manifest)")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("embed", help="extract embeddings for WAV files or path lists")
    common(sp, "checkpoint", "out", "text")
    sp.add_argument("inputs", nargs="*")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("score", help="score a trial list from an embedding file")
    common(sp, "trials", "out")
    sp.add_argument("--embeddings")
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("eval", help="embed, score and report EER / minDCF for a trial list")
    common(sp, "checkpoint", "trials", "out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("grad-check", help="compare model gradients with finite differences")
    common(sp, "seed")
    sp.add_argument("--coords", type=int, default=264)
    sp.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except SmlaError as e:
        print(f"smla {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
