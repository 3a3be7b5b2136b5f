"""Supervised training and evaluation of dense and masked networks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .errors import ConfigError, DataError, NumericalError
from .losses import one_hot, quadratic_loss, softmax_cross_entropy
from .network import Network, forward_logits, make_rng
from .optim import make_optimizer
from .transfer import batch_schedule

__all__ = [
    "TrainConfig",
    "History",
    "train",
    "evaluate",
    "output_trace",
    "quadratic_loss",
    "softmax_cross_entropy",
    "HISTORY_HEADER",
]

HISTORY_HEADER = ("iteration", "train_loss", "train_acc", "test_acc")


@dataclass(frozen=True)
class TrainConfig:
    """Supervised settings.

    ``loss_reduction`` is ``mean`` (divide the batch loss by the batch size)
    or ``sum``. ``eval_every`` counts iterations; 0 means once per epoch.
    ``batch_size`` 0 trains full-batch in dataset order.
    """

    optimizer: str = "adam"
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 20
    iterations: int | None = None
    loss: str = "softmax_cross_entropy"
    loss_reduction: str = "mean"
    eval_every: int = 0
    snapshot_every: int = 0
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        if self.loss not in ("softmax_cross_entropy", "quadratic"):
            raise ConfigError("loss must be 'softmax_cross_entropy' or 'quadratic'")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError("loss_reduction must be 'mean' or 'sum'")
        if min(self.batch_size, self.epochs, self.eval_every, self.snapshot_every) < 0:
            raise ConfigError("batch_size, epochs, eval_every and snapshot_every must be non-negative")
        return self

    def with_overrides(self, **kw) -> "TrainConfig":
        bad = set(kw) - {f.name for f in fields(self)}
        if bad:
            raise ConfigError(f"unknown training settings: {sorted(bad)}")
        return replace(self, **kw)


@dataclass
class History:
    iteration: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    snapshots: list = field(default_factory=list, repr=False)

    def append(self, it, loss, tr_acc, te_acc) -> None:
        if self.iteration and it <= self.iteration[-1]:
            raise ValueError("history iterations must increase")
        self.iteration.append(int(it))
        self.train_loss.append(float(loss))
        self.train_acc.append(float(tr_acc))
        self.test_acc.append(float(te_acc))

    def rows(self):
        return zip(self.iteration, self.train_loss, self.train_acc, self.test_acc)

    @property
    def final(self) -> dict:
        return dict(zip(HISTORY_HEADER, list(self.rows())[-1]))

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_HEADER)
            for it, loss, a, b in self.rows():
                w.writerow([it, f"{loss:.9g}", f"{a:.9g}", f"{b:.9g}"])
        return path


def _targets(ds: Dataset, n_outputs: int) -> np.ndarray:
    if ds.targets is not None:
        return np.asarray(ds.targets, dtype=np.float64)
    return one_hot(ds.labels, n_outputs)


def _loss(cfg: TrainConfig, out: Tensor, y: Tensor) -> Tensor:
    n = float(out.shape[0])
    if cfg.loss == "quadratic":
        value = quadratic_loss(out, y)
        return value / n if cfg.loss_reduction == "mean" else value
    value = softmax_cross_entropy(out, y)
    return value if cfg.loss_reduction == "mean" else value * n


def evaluate(net: Network, params: np.ndarray, mask: np.ndarray | None, ds: Dataset, chunk: int = 2048) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) equals the label."""
    if len(ds) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    hits = 0
    for s in range(0, len(ds), chunk):
        out = forward_logits(net, params, mask, ds.inputs[s:s + chunk])
        hits += int(np.count_nonzero(out.argmax(axis=1) == ds.labels[s:s + chunk]))
    return hits / len(ds)


def _dataset_loss(net, params, mask, ds, y, cfg, chunk=2048) -> float:
    total = 0.0
    for s in range(0, len(ds), chunk):
        out = forward_logits(net, params, mask, ds.inputs[s:s + chunk])
        with ad.no_grad():
            part = _loss(replace(cfg, loss_reduction="sum"), Tensor(out), Tensor(y[s:s + chunk])).item()
        total += part
    return total / len(ds) if cfg.loss_reduction == "mean" else total


def train(
    net: Network,
    init_params: np.ndarray,
    mask: np.ndarray | None,
    dataset: Dataset,
    config: TrainConfig,
    test: Dataset | None = None,
) -> tuple[np.ndarray, History]:
    """Minibatch training with masked updates; returns final parameters and the history.

    The history holds full-dataset loss and accuracy at iteration 0, every
    ``eval_every`` iterations (or each epoch end) and after the last step.
    """
    cfg = config.validate()
    if len(dataset) == 0:
        raise DataError("training set is empty")
    params = np.array(init_params, dtype=np.float64)
    if params.shape != (net.n_params,):
        raise ValueError(f"expected {net.n_params} parameters, got {params.shape}")
    y_all = _targets(dataset, net.n_outputs)
    if y_all.shape[1] != net.n_outputs:
        raise ValueError(f"targets have {y_all.shape[1]} columns, network emits {net.n_outputs}")
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    n = len(dataset)
    full = cfg.batch_size == 0 or cfg.batch_size >= n
    per_epoch = 1 if full else math.ceil(n / cfg.batch_size)
    eval_every = cfg.eval_every or per_epoch
    total = cfg.iterations if cfg.iterations is not None else cfg.epochs * per_epoch
    drop_rng = make_rng(cfg.seed, "dropout")
    hist = History()

    def record(it):
        loss = _dataset_loss(net, params, mask, dataset, y_all, cfg)
        if not math.isfinite(loss):
            raise NumericalError(f"training loss is {loss} at iteration {it}")
        te = evaluate(net, params, mask, test) if test is not None and len(test) else math.nan
        hist.append(it, loss, evaluate(net, params, mask, dataset), te)

    record(0)
    if cfg.snapshot_every:
        hist.snapshots.append((0, params.copy()))
    sched = batch_schedule(n, cfg.batch_size, cfg.epochs, total, make_rng(cfg.seed, "shuffle"))
    for step, idx in enumerate(sched, start=1):
        p = Tensor(params, requires_grad=True)
        try:
            out = net.forward(p, dataset.inputs[idx], mask, training=True, rng=drop_rng)
            loss = _loss(cfg, out, Tensor(y_all[idx]))
            (g,) = ad.grad(loss, [p])
        except ad.NonFiniteError as exc:
            raise NumericalError(f"training diverged at iteration {step}: {exc}") from exc
        opt.step(params, g.data, mask)
        if not np.all(np.isfinite(params)):
            raise NumericalError(f"parameters became non-finite at iteration {step}")
        if step % eval_every == 0 or step == total:
            record(step)
        if cfg.snapshot_every and (step % cfg.snapshot_every == 0 or step == total):
            hist.snapshots.append((step, params.copy()))
    return params, hist


def output_trace(net: Network, param_snapshots, class_grouped_inputs, mask: np.ndarray | None = None) -> np.ndarray:
    """``(snapshots, groups, c)`` mean network output over each group's inputs."""
    groups = [np.asarray(g, dtype=np.float64) for g in class_grouped_inputs]
    if any(g.shape[0] == 0 for g in groups):
        raise ValueError("every class group needs at least one input")
    snaps = [s[1] if isinstance(s, tuple) else s for s in param_snapshots]
    out = np.empty((len(snaps), len(groups), net.n_outputs))
    for si, p in enumerate(snaps):
        for gi, g in enumerate(groups):
            out[si, gi] = forward_logits(net, p, mask, g).mean(axis=0)
    return out
