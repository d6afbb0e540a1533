"""SGD with momentum for masked networks, plus evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .nn import MaskedNetwork, apply_mask_vector, forward_masked, predict
from .rng import make_rng
from .tensor import Tape, Tensor, log_softmax, scale, softmax_cross_entropy, sq_l2_norm, sub

log = logging.getLogger(__name__)

LOSSES = ("cross_entropy", "mse")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    lr_drops: tuple[int, ...] = ()
    drop_factor: float = 0.1
    weight_decay: float = 0.0
    seed: int = 0
    loss: str = "cross_entropy"

    def __post_init__(self):
        self.lr_drops = tuple(int(e) for e in self.lr_drops)
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 < self.drop_factor <= 1:
            raise ValueError(f"drop_factor must lie in (0, 1], got {self.drop_factor}")
        if self.epochs < 0 or self.batch_size < 1 or self.weight_decay < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and weight_decay >= 0 are required")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 1-based ``epoch``; drops apply after the listed epochs."""
        return self.lr * self.drop_factor ** sum(1 for d in self.lr_drops if d < epoch)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    lr: float
    density: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    collapsed: bool = False
    net: MaskedNetwork | None = None

    @property
    def final_test_acc(self) -> float:
        return self.records[-1].test_acc if self.records else float("nan")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, history: TrainHistory):
        super().__init__(msg)
        self.history = history


def _mse_targets(data: Dataset, idx, shape) -> np.ndarray:
    """Regression targets if present, else one-hot labels."""
    if data.targets is not None:
        return data.targets[idx].reshape(shape)
    return np.eye(shape[1])[data.labels[idx]]


def _loss(out: Tensor, data: Dataset, idx: np.ndarray, kind: str) -> Tensor:
    if kind == "mse":
        target = _mse_targets(data, idx, out.shape)
        return scale(sq_l2_norm(sub(out, target)), 0.5 / len(idx))
    return softmax_cross_entropy(out, data.labels[idx])


def evaluate(net: MaskedNetwork, data: Dataset, mask=None, loss: str = "cross_entropy",
             batch_size: int = 1024) -> tuple[float, float]:
    """Mean loss and top-1 accuracy; never modifies ``net``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty split")
    if mask is not None:
        net = net.clone()
        apply_mask_vector(net, mask)
    total, correct = 0.0, 0
    for s in range(0, len(data), batch_size):
        out = predict(net, data.inputs[s:s + batch_size])
        if loss == "mse":
            diff = out - _mse_targets(data, slice(s, s + batch_size), out.shape)
            total += 0.5 * float(np.sum(diff * diff))
        else:
            lp = log_softmax(out)
            y = data.labels[s:s + batch_size]
            total -= float(lp[np.arange(len(y)), y].sum())
        correct += int(np.sum(out.argmax(axis=1) == data.labels[s:s + batch_size]))
    return total / len(data), correct / len(data)


def sgd_train(net: MaskedNetwork, mask, train: Dataset, config: TrainConfig,
              test: Dataset | None = None) -> TrainHistory:
    """Train a copy of ``net`` under a fixed mask with SGD + classical momentum.

    ``mask=None`` trains without any mask projection.  Masked weights are set
    to zero up front; their gradients and velocities are zeroed every step,
    so they stay exactly zero.  Weight decay acts on active weights only.
    Mini-batch order per epoch is ``make_rng(seed, "shuffle", epoch)``.
    """
    work = net.clone()
    masks: list[np.ndarray] | None = None
    if mask is not None:
        apply_mask_vector(work, mask)
        masks = work.masks
        work.weights = [w * m for w, m in zip(work.weights, masks)]
    else:
        work.masks = [np.ones_like(w) for w in work.weights]
    hist = TrainHistory(net=work)
    counts = [int(m.sum()) for m in work.masks]
    if sum(counts) == 0:
        raise ValueError("mask has no active weight")
    if any(c == 0 for c in counts):
        hist.collapsed = True
        log.warning("training a collapsed mask: layer active counts %s", counts)
    vw = [np.zeros_like(w) for w in work.weights]
    vb = [None if b is None else np.zeros_like(b) for b in work.biases]
    n = len(train)
    mu, wd = config.momentum, config.weight_decay
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        order = make_rng(config.seed, "shuffle", epoch).permutation(n)
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            tape = Tape()
            try:
                out, ws, bs = forward_masked(work, Tensor(train.inputs[idx]), tape, return_leaves=True)
                loss = _loss(out, train, idx, config.loss)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {exc}", hist) from exc
            g = tape.backward(loss)
            for i, w in enumerate(ws):
                gw = g[w]
                if wd:
                    gw = gw + wd * work.weights[i]
                if masks is not None:
                    gw = gw * masks[i]
                vw[i] = mu * vw[i] + gw
                if masks is not None:
                    vw[i] = vw[i] * masks[i]
                work.weights[i] = work.weights[i] - lr * vw[i]
            for i, b in enumerate(bs):
                if b is None:
                    continue
                vb[i] = mu * vb[i] + g[b]
                work.biases[i] = work.biases[i] - lr * vb[i]
        tr_loss, tr_acc = evaluate(work, train, loss=config.loss)
        te_acc = evaluate(work, test, loss=config.loss)[1] if test is not None else float("nan")
        if not np.isfinite(tr_loss):
            raise TrainingDiverged(f"non-finite training loss after epoch {epoch}", hist)
        hist.records.append(EpochRecord(epoch, tr_loss, tr_acc, te_acc, lr, work.density()))
    return hist


HISTORY_HEADER = ["epoch", "train_loss", "train_acc", "test_acc", "lr", "density"]


def write_history_csv(path: str | Path, hist: TrainHistory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_HEADER)
        for r in hist.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.train_acc), repr(r.test_acc),
                        repr(r.lr), repr(r.density)])


def write_summary_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "sparsity", "seed", "final_test_acc"],
                           extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
