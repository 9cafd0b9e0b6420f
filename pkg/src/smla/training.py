"""SGD with momentum, plateau learning-rate schedule, and the epoch loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, frontend
from . import model as M
from . import tensor as T
from .errors import (CheckpointFormatError, ConfigError, NumericError, ShapeMismatchError,
                     TruncatedCheckpointError)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    plateau_threshold: float = 1e-4
    decay_norm_params: bool = True
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError("plateau_factor must be in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.plateau_patience < 1:
            raise ConfigError("batch_size and plateau_patience must be positive, epochs non-negative")


@dataclass
class TrainState:
    lr: float
    epoch: int = 0
    step: int = 0
    best_loss: float = math.inf
    bad_epochs: int = 0
    momentum: dict = field(default_factory=dict)
    rng: np.random.Generator = None

    @classmethod
    def fresh(cls, config: TrainConfig):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xD80]))
        return cls(lr=config.lr, rng=rng)

    def scalars(self):
        return {"epoch": self.epoch, "step": self.step, "lr": repr(self.lr),
                "best_loss": repr(self.best_loss), "bad_epochs": self.bad_epochs,
                "rng_state": json.dumps(self.rng.bit_generator.state)}

    @classmethod
    def from_scalars(cls, values: dict, momentum: dict):
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(values["rng_state"])
        return cls(lr=float(values["lr"]), epoch=int(values["epoch"]), step=int(values["step"]),
                   best_loss=float(values["best_loss"]), bad_epochs=int(values["bad_epochs"]),
                   momentum=momentum, rng=rng)


@dataclass
class EpochReport:
    epoch: int
    loss: float
    accuracy: float
    lr: float
    wall_time: float

    def log_line(self):
        return f"{self.epoch}\t{self.loss:.6f}\t{self.accuracy:.4f}\t{self.lr:g}"


def _is_norm_param(name):
    return name.endswith(".scale") or name.endswith(".shift")


def sgd_step(params: M.ModelParams, state: TrainState, config: TrainConfig):
    """In-place update ``buf = m*buf + (g + wd*w); w -= lr*buf`` for every tensor.

    Raises before touching anything if a gradient is non-finite.
    """
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NumericError(f"non-finite gradient for {name}; step {state.step} aborted")
    for name, t in params.items():
        lr = t.dtype.type(state.lr)
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        wd = config.weight_decay if (config.decay_norm_params or not _is_norm_param(name)) else 0.0
        if wd:
            g = g + t.dtype.type(wd) * t.data
        buf = state.momentum.get(name)
        if buf is None:
            buf = state.momentum[name] = np.zeros_like(t.data)
        buf *= t.dtype.type(config.momentum)
        buf += g
        t.data -= lr * buf
    state.step += 1


def plateau_schedule(state: TrainState, epoch_loss: float, config: TrainConfig) -> float:
    """Multiply lr by ``plateau_factor`` after ``plateau_patience`` epochs without improvement."""
    if epoch_loss < state.best_loss - config.plateau_threshold:
        state.best_loss = epoch_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= config.plateau_patience:
            state.lr *= config.plateau_factor
            state.bad_epochs = 0
            log.info("plateau: lr reduced to %g", state.lr)
    return state.lr


def make_batches(n, batch_size, seed, epoch):
    """Shuffled index batches; composition depends only on (seed, epoch)."""
    order = frontend.utterance_rng(seed, "order", epoch).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches.pop()  # batch norm needs two samples
    return batches


def train_epoch(params, state, dataset, model_config, train_config,
                frontend_config=None) -> EpochReport:
    """One pass over ``dataset``, a sequence of ``(MelFeature, label)`` pairs."""
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    fcfg = frontend_config or frontend.FrontendConfig()
    labels_all = np.array([lab for _, lab in dataset])
    if labels_all.max() >= model_config.num_speakers:
        raise ConfigError(f"label {labels_all.max()} >= num_speakers {model_config.num_speakers}")
    start = time.perf_counter()
    epoch = state.epoch
    lr_used = state.lr
    total_loss, correct, seen = 0.0, 0, 0
    for batch in make_batches(len(dataset), train_config.batch_size, train_config.seed, epoch):
        X = np.stack([frontend.prepare(dataset[i][0], fcfg, training=True, augment=train_config.augment,
                                       rng=frontend.utterance_rng(train_config.seed, "augment", epoch, int(i)))
                      for i in batch])
        y = labels_all[batch]
        out = M.forward(params, model_config, X, training=True, rng=state.rng)
        loss = T.cross_entropy_softmax(out.logits, y)
        params.zero_grad()
        loss.backward()
        sgd_step(params, state, train_config)
        total_loss += float(loss.data) * len(batch)
        correct += int((out.logits.data.argmax(axis=1) == y).sum())
        seen += len(batch)
    state.epoch += 1
    return EpochReport(state.epoch, total_loss / seen, correct / seen, lr_used,
                       time.perf_counter() - start)


def fit(params, state, dataset, run_config, metrics_log=None, checkpoint_dir=None,
        stop_after=None, on_epoch=None):
    """Train until ``run_config.train.epochs`` epochs are complete.

    Appends one line per epoch to ``metrics_log`` and writes ``final.ckpt`` /
    ``best.ckpt`` into ``checkpoint_dir``. ``stop_after`` ends early after that
    many total epochs (used to exercise resumption).
    """
    tcfg = run_config.train
    reports = []
    target = tcfg.epochs if stop_after is None else min(stop_after, tcfg.epochs)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    while state.epoch < target:
        report = train_epoch(params, state, dataset, run_config.model, tcfg, run_config.frontend)
        log.info("epoch %d loss %.4f acc %.3f lr %g (%.1fs)", report.epoch, report.loss,
                 report.accuracy, report.lr, report.wall_time)
        improved = report.loss < state.best_loss - tcfg.plateau_threshold
        plateau_schedule(state, report.loss, tcfg)
        reports.append(report)
        if metrics_log is not None:
            with open(metrics_log, "a") as f:
                f.write(report.log_line() + "\n")
        if checkpoint_dir is not None:
            save_checkpoint(params, state, Path(checkpoint_dir) / "final.ckpt", run_config)
            if improved:
                save_checkpoint(params, state, Path(checkpoint_dir) / "best.ckpt", run_config)
        if on_epoch is not None:
            on_epoch(report)
    return reports


# ------------------------------------------------------------------ checkpoints
@dataclass
class Checkpoint:
    params: M.ModelParams
    state: TrainState | None
    config: object  # RunConfig


def save_checkpoint(params, state, path, run_config):
    """Parameters, batch-norm statistics, optimiser buffers and run config in one file."""
    from .config import dump_sections

    sections = run_config.to_sections()
    records = [(n, t.data) for n, t in params.items()]
    records += [(f"buf/{n}", b) for n, b in params.buffers.items()]
    if state is not None:
        sections["state"] = state.scalars()
        records += [(f"opt/{n}", b) for n, b in state.momentum.items()]
    sections["checkpoint"] = {"tensor_count": len(records)}
    checkpoint.write(path, dump_sections(sections), records)


def load_checkpoint(path, expected=None) -> Checkpoint:
    """Read a checkpoint; shapes are checked against its own config and ``expected`` if given."""
    from .config import RunConfig, parse_sections

    text, arrays = checkpoint.read(path)
    sections = parse_sections(text)
    meta = sections.pop("checkpoint", {})
    state_vals = sections.pop("state", None)
    if "tensor_count" in meta and int(meta["tensor_count"]) != len(arrays):
        raise TruncatedCheckpointError(f"{path}: expected {meta['tensor_count']} tensors, found {len(arrays)}")
    run_config = RunConfig.from_sections(sections)
    model_config = expected if expected is not None else run_config.model
    shapes = M.expected_shapes(model_config)
    tensors, buffers, momentum = {}, {}, {}
    for name, arr in arrays.items():
        if name.startswith("opt/"):
            momentum[name[4:]] = arr
            continue
        key = name[4:] if name.startswith("buf/") else name
        if key not in shapes:
            raise CheckpointFormatError(f"{path}: unexpected tensor {name!r} for this model config")
        if tuple(shapes[key]) != arr.shape:
            raise ShapeMismatchError(key, shapes[key], arr.shape)
        if name.startswith("buf/"):
            buffers[key] = arr.copy()
        else:
            tensors[key] = T.Tensor(arr, requires_grad=True, dtype=np.float32, name=key)
    missing = set(shapes) - set(tensors) - set(buffers)
    if missing:
        raise CheckpointFormatError(f"{path}: missing tensors {sorted(missing)[:5]}")
    for name, buf in momentum.items():
        if name not in tensors or tensors[name].shape != buf.shape:
            raise ShapeMismatchError(f"opt/{name}", tensors[name].shape if name in tensors else (), buf.shape)
    state = TrainState.from_scalars(state_vals, momentum) if state_vals is not None else None
    return Checkpoint(M.ModelParams(tensors, buffers), state, run_config)
