"""Saliency scores and iterative pruning at initialization.

Every score function returns a flat vector aligned with the network's mask
layout; coordinates that are already pruned carry ``-inf`` so they are never
selected again.  ``prune`` runs ``T`` rounds of score-then-threshold with
keep fraction ``d ** (t / T)`` after round ``t``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, gaussian_batch
from .nn import (MaskedNetwork, apply_mask_vector, flatten_masks, flatten_weights,
                 forward_effective, forward_masked, locate, reinitialize)
from .rng import make_rng
from .tensor import Tape, Tensor, mul, softmax_cross_entropy, sq_l2_norm, sub, sum_

METHODS = ("snip", "iterative_snip", "grasp", "synflow", "ntksap", "magnitude", "random")
ONE_SHOT = ("snip", "grasp", "magnitude", "random")
DATA_METHODS = ("snip", "iterative_snip", "grasp")
INPUT_SOURCES = ("gaussian_noise", "dataset")


class PruneError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class PruneConfig:
    method: str
    density: float
    rounds: int = 1
    batches_per_round: int | None = None  # None -> ceil(10 * classes / batch_size)
    batch_size: int = 100
    eps: float = 1e-4
    reinit_count: int = 1
    input_source: str = "gaussian_noise"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise PruneError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not 0 < self.density <= 1:
            raise PruneError(f"density must lie in (0, 1], got {self.density}")
        if self.rounds < 1:
            raise PruneError(f"rounds must be >= 1, got {self.rounds}")
        if self.method in ONE_SHOT:
            self.rounds = 1
        if self.batches_per_round is not None and self.batches_per_round < 1:
            raise PruneError(f"batches_per_round must be >= 1, got {self.batches_per_round}")
        if self.batch_size < 1:
            raise PruneError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eps <= 0:
            raise PruneError(f"eps must be positive, got {self.eps}")
        if self.reinit_count < 1:
            raise PruneError(f"reinit_count must be >= 1, got {self.reinit_count}")
        if self.input_source not in INPUT_SOURCES:
            raise PruneError(f"input_source must be one of {INPUT_SOURCES}")
        if self.method in DATA_METHODS and self.input_source != "dataset":
            raise PruneError(f"{self.method}: method requires labeled data "
                             f"(input_source = dataset)")

    def num_batches(self, num_classes: int) -> int:
        if self.batches_per_round is not None:
            return self.batches_per_round
        return max(1, math.ceil(10 * num_classes / self.batch_size))


@dataclass
class RoundRecord:
    round: int
    keep_fraction: float
    active_count: int
    layer_active: list[int]
    threshold: float
    collapsed: bool


@dataclass
class PruneResult:
    mask: np.ndarray  # flat uint8
    trace: list[RoundRecord]
    net: MaskedNetwork  # input network with the final mask applied
    last_scoring_net: MaskedNetwork | None = None  # final NINW draw (ntksap only)


# -- schedule and thresholding ----------------------------------------------

def schedule_keep_fraction(d: float, t: int, T: int) -> float:
    if not 0 < d <= 1:
        raise PruneError(f"density must lie in (0, 1], got {d}")
    if T < 1 or not 1 <= t <= T:
        raise PruneError(f"round {t} outside 1..{T}")
    if t == T:
        return float(d)
    return float(d ** (t / T))


def threshold_update(scores, mask, keep_fraction: float) -> tuple[np.ndarray, float]:
    """Keep the ``round(keep_fraction * p)`` highest-scoring active coordinates.

    Ties go to the lower flat index.  Returns the new mask and the smallest
    kept score.
    """
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(mask)
    if not 0 < keep_fraction <= 1:
        raise PruneError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    if scores.shape != mask.shape or scores.ndim != 1:
        raise PruneError(f"scores shape {scores.shape} does not match mask shape {mask.shape}")
    active = mask.astype(bool)
    if np.isnan(scores).any() or not np.all(np.isfinite(scores[active])):
        raise PruneError("scores must be finite at every active coordinate")
    k = round_half_up(keep_fraction * scores.size)
    if k > int(active.sum()):
        raise PruneError(f"schedule asks to keep {k} weights but only {int(active.sum())} are active")
    masked = np.where(active, scores, -np.inf)
    order = np.argsort(-masked, kind="stable")
    keep = order[:k]
    out = np.zeros(scores.size, dtype=np.uint8)
    out[keep] = 1
    threshold = float(masked[keep[-1]]) if k else float("inf")
    return out, threshold


def _finalize(raw: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = np.asarray(raw, dtype=np.float64).copy()
    out[mask == 0] = -np.inf
    return out


# -- scores -----------------------------------------------------------------

LossFn = Callable[[Tensor, np.ndarray], Tensor]


def cross_entropy_loss(out: Tensor, labels: np.ndarray) -> Tensor:
    return softmax_cross_entropy(out, labels)


def _loss_gradient(net: MaskedNetwork, batches: Sequence[tuple[np.ndarray, np.ndarray]],
                   loss: LossFn) -> np.ndarray:
    """Gradient of the sample-weighted mean loss w.r.t. effective weights, flat."""
    if not batches:
        raise PruneError("no pruning batches given")
    total = sum(len(x) for x, _ in batches)
    acc = np.zeros(net.num_prunable)
    for x, y in batches:
        tape = Tape()
        eff = [tape.param(w * m) for w, m in zip(net.weights, net.masks)]
        bs = [None if b is None else Tensor._raw(b) for b in net.biases]
        out = forward_effective(net, Tensor(x), eff, bs)
        g = tape.backward(loss(out, y))
        acc += (len(x) / total) * np.concatenate([g[w].ravel() for w in eff])
    return acc


def score_snip(net: MaskedNetwork, batches, loss: LossFn = cross_entropy_loss) -> np.ndarray:
    g = _loss_gradient(net, batches, loss)
    return _finalize(np.abs(g * flatten_weights(net)), flatten_masks(net))


def hvp_fd(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray,
           v: np.ndarray, rho: float) -> np.ndarray:
    """Central-difference Hessian-vector product from a gradient oracle."""
    return (grad_fn(theta + rho * v) - grad_fn(theta - rho * v)) / (2.0 * rho)


def grasp_saliency(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray) -> np.ndarray:
    """``-(H g) * theta`` with ``Hg`` from central differences of ``grad_fn``."""
    theta = np.asarray(theta, dtype=np.float64)
    g = grad_fn(theta)
    rho = 1e-3 / max(1.0, float(np.linalg.norm(g)))
    return -hvp_fd(grad_fn, theta, g, rho) * theta


def effective_loss_grad_fn(net: MaskedNetwork, batches, loss: LossFn = cross_entropy_loss):
    """Map flat weights to the flat loss gradient w.r.t. ``theta`` under the mask.

    Biases stay fixed; the returned gradient is zero at masked coordinates.
    """
    probe = net.clone()
    m = flatten_masks(net).astype(np.float64)
    off = probe.offsets()

    def grad(flat_w: np.ndarray) -> np.ndarray:
        probe.weights = [flat_w[off[i]:off[i + 1]].reshape(w.shape) for i, w in enumerate(net.weights)]
        return _loss_gradient(probe, batches, loss) * m

    return grad


def score_grasp(net: MaskedNetwork, batches, loss: LossFn = cross_entropy_loss) -> np.ndarray:
    grad_fn = effective_loss_grad_fn(net, batches, loss)
    return _finalize(grasp_saliency(grad_fn, flatten_weights(net)), flatten_masks(net))


def score_synflow(net: MaskedNetwork) -> np.ndarray:
    tape = Tape()
    absw = [tape.param(np.abs(w)) for w in net.weights]
    eff = [mul(a, Tensor._raw(m)) for a, m in zip(absw, net.masks)]
    bs = [None if b is None else Tensor._raw(np.abs(b)) for b in net.biases]
    x = Tensor(np.ones((1,) + net.input_shape))
    g = tape.backward(sum_(forward_effective(net, x, eff, bs)))
    raw = np.concatenate([np.abs(g[a] * a.data).ravel() for a in absw])
    return _finalize(raw, flatten_masks(net))


def score_magnitude(net: MaskedNetwork) -> np.ndarray:
    return _finalize(np.abs(flatten_weights(net)), flatten_masks(net))


def score_random(net: MaskedNetwork, rng: np.random.Generator | int) -> np.ndarray:
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(int(rng), "random_scores")
    return _finalize(rng.uniform(0.0, 1.0, net.num_prunable), flatten_masks(net))


def ntksap_batch_gradient(net: MaskedNetwork, z: np.ndarray, delta: Sequence[np.ndarray]) -> np.ndarray:
    """d/dm of ``||f(z; theta*m) - f(z; (theta+delta)*m)||^2`` at the current mask.

    The mask is a continuous leaf shared by both forward passes.
    """
    tape = Tape()
    ms = [tape.param(m) for m in net.masks]
    w1 = [mul(Tensor._raw(w), m) for w, m in zip(net.weights, ms)]
    w2 = [mul(Tensor._raw(w + d), m) for w, d, m in zip(net.weights, delta, ms)]
    bs = [None if b is None else Tensor._raw(b) for b in net.biases]
    zt = Tensor(z)
    diff = sub(forward_effective(net, zt, w1, bs), forward_effective(net, zt, w2, bs))
    g = tape.backward(sq_l2_norm(diff))
    return np.concatenate([g[m].ravel() for m in ms])


def score_ntksap_round(net: MaskedNetwork, cfg: PruneConfig, round_index: int = 1,
                       data_batches: Sequence[np.ndarray] | None = None,
                       return_last: bool = False):
    """One round of data-free (or data-driven) NTK-SAP scores.

    For each of the ``B`` batches: fresh weights from the init scheme, a fresh
    input batch, and one perturbation ``delta ~ N(0, eps I)``.  Per-batch mask
    gradients are summed and the absolute value is the score.  With
    ``reinit_count = R > 1`` each batch is scored under ``R`` weight draws and
    their mean is used.
    """
    if cfg.method != "ntksap":
        raise PruneError(f"score_ntksap_round called with method {cfg.method!r}")
    B = cfg.num_batches(net.num_outputs)
    if B < 1:
        raise PruneError("batches_per_round must be >= 1")
    if cfg.eps <= 0:
        raise PruneError(f"eps must be positive, got {cfg.eps}")
    if cfg.input_source == "dataset" and not data_batches:
        raise PruneError("input_source = dataset but no data batches were given")
    acc = np.zeros(net.num_prunable)
    sd = math.sqrt(cfg.eps)
    last = None
    for i in range(B):
        if cfg.input_source == "gaussian_noise":
            z = gaussian_batch((cfg.batch_size,) + net.input_shape, cfg.seed, round_index, i)
        else:
            z = data_batches[i % len(data_batches)]
        for r in range(cfg.reinit_count):
            rng = make_rng(cfg.seed, "ntksap", round_index, i, r)
            draw = reinitialize(net, rng)
            delta = [sd * rng.standard_normal(w.shape) for w in draw.weights]
            acc += ntksap_batch_gradient(draw, z, delta) / cfg.reinit_count
            last = draw
    scores = _finalize(np.abs(acc), flatten_masks(net))
    if return_last:
        return scores, last
    return scores


# -- driver -----------------------------------------------------------------

def _batches(data: Dataset, batch_size: int) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(data.inputs[s:s + batch_size], data.labels[s:s + batch_size])
            for s in range(0, len(data), batch_size)]


def prune(net: MaskedNetwork, cfg: PruneConfig, data: Dataset | None = None) -> PruneResult:
    """Iteratively prune ``net`` (not modified) to density ``cfg.density``."""
    if cfg.method in DATA_METHODS and data is None:
        raise PruneError(f"{cfg.method}: method requires labeled data")
    batches = _batches(data, cfg.batch_size) if data is not None else []
    work = net.clone()
    if work.active_count() != work.num_prunable:
        apply_mask_vector(work, np.ones(work.num_prunable, dtype=np.uint8))
    mask = flatten_masks(work)
    trace: list[RoundRecord] = []
    last = None
    for t in range(1, cfg.rounds + 1):
        if cfg.method in ("snip", "iterative_snip"):
            scores = score_snip(work, batches)
        elif cfg.method == "grasp":
            scores = score_grasp(work, batches)
        elif cfg.method == "synflow":
            scores = score_synflow(work)
        elif cfg.method == "magnitude":
            scores = score_magnitude(work)
        elif cfg.method == "random":
            scores = score_random(work, make_rng(cfg.seed, "random", t))
        else:
            scores, last = score_ntksap_round(work, cfg, t, [x for x, _ in batches], return_last=True)
        keep = schedule_keep_fraction(cfg.density, t, cfg.rounds)
        mask, tau = threshold_update(scores, mask, keep)
        apply_mask_vector(work, mask)
        report = layer_collapse_report(mask, work)
        trace.append(RoundRecord(t, keep, int(mask.sum()), [a for _, a, _ in report.layers],
                                 tau, report.collapsed))
    if last is not None:
        last = last.clone()
        apply_mask_vector(last, mask)
    return PruneResult(mask, trace, work, last)


# -- diagnostics and export -------------------------------------------------

@dataclass
class CollapseReport:
    layers: list[tuple[int, int, int]] = field(default_factory=list)  # (layer, active, total)

    @property
    def collapsed(self) -> bool:
        return any(a == 0 for _, a, _ in self.layers)

    @property
    def offending(self) -> list[int]:
        return [i for i, a, _ in self.layers if a == 0]


def layer_collapse_report(mask, net: MaskedNetwork) -> CollapseReport:
    mask = np.asarray(mask)
    if mask.size != net.num_prunable:
        raise PruneError(f"mask length {mask.size} != prunable count {net.num_prunable}")
    off = net.offsets()
    return CollapseReport([(i, int(mask[off[i]:off[i + 1]].sum()), int(off[i + 1] - off[i]))
                           for i in range(len(net.weights))])


def write_mask_csv(path: str | Path, net: MaskedNetwork, mask) -> None:
    mask = np.asarray(mask)
    off = net.offsets()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["flat_index", "layer", "position", "active"])
        for layer, weight in enumerate(net.weights):
            for j, pos in enumerate(np.ndindex(*weight.shape)):
                flat = int(off[layer]) + j
                w.writerow([flat, layer, ";".join(map(str, pos)), int(mask[flat])])


def read_mask_csv(path: str | Path, net: MaskedNetwork | None = None) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"flat_index", "layer", "position", "active"}:
        raise PruneError(f"{path}: not a mask CSV")
    idx = np.array([int(r["flat_index"]) for r in rows])
    if not np.array_equal(idx, np.arange(len(rows))):
        raise PruneError(f"{path}: flat indices are not 0..{len(rows) - 1} in order")
    mask = np.array([int(r["active"]) for r in rows], dtype=np.uint8)
    if net is not None:
        if mask.size != net.num_prunable:
            raise PruneError(f"{path}: mask has {mask.size} entries, architecture has "
                             f"{net.num_prunable} prunable weights")
        for r in (rows[0], rows[-1]):
            layer, pos = locate(net, int(r["flat_index"]))
            if layer != int(r["layer"]) or ";".join(map(str, pos)) != r["position"]:
                raise PruneError(f"{path}: mask layout does not match the architecture")
    return mask


TRACE_HEADER = ["round", "keep_fraction", "active_count", "threshold", "collapsed"]


def write_trace_csv(path: str | Path, trace: Sequence[RoundRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in trace:
            w.writerow([r.round, repr(r.keep_fraction), r.active_count, repr(r.threshold),
                        int(r.collapsed)])


def write_collapse_csv(path: str | Path, report: CollapseReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "active", "total", "collapsed"])
        for i, a, n in report.layers:
            w.writerow([i, a, n, int(a == 0)])
