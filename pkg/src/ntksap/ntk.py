"""Fixed-weight neural tangent kernels and their spectra.

Jacobian rows are ordered sample-major, logit-minor: row ``r`` is output
``r % k`` of sample ``r // k``.  Columns follow the flat mask layout of
:mod:`ntksap.nn` (prunable weights only; biases are excluded) and hold
derivatives with respect to ``theta`` under the mask, so masked
coordinates give zero columns.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .nn import MaskedNetwork, forward_masked, predict
from .rng import make_rng
from .tensor import Tape, Tensor, mul, sum_

DEFAULT_MAX_ENTRIES = 1 << 25
CLAMP_RATIO = 1e-12


class BudgetError(ValueError):
    pass


def _check_budget(rows: int, cols: int, max_entries: int) -> None:
    if rows * cols > max_entries:
        raise BudgetError(
            f"Jacobian needs {rows} x {cols} = {rows * cols} entries, budget allows {max_entries}")


def _jacobian_rows(net: MaskedNetwork, X: np.ndarray):
    """Yield one flattened Jacobian row per (sample, logit)."""
    k = net.num_outputs
    for i in range(len(X)):
        tape = Tape()
        out, ws, _ = forward_masked(net, Tensor(X[i:i + 1]), tape, return_leaves=True)
        for r in range(k):
            onehot = np.zeros((1, k))
            onehot[0, r] = 1.0
            grads = tape.backward(sum_(mul(out, Tensor._raw(onehot))), free=(r == k - 1))
            yield np.concatenate([grads[w].ravel() for w in ws])


def jacobian(net: MaskedNetwork, X, max_entries: int = DEFAULT_MAX_ENTRIES) -> np.ndarray:
    """Parameter-output Jacobian of shape ``(n * k, p)``; one backward pass per row."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty input batch")
    rows = len(X) * net.num_outputs
    _check_budget(rows, net.num_prunable, max_entries)
    J = np.empty((rows, net.num_prunable))
    for r, row in enumerate(_jacobian_rows(net, X)):
        J[r] = row
    return J


def trace_exact(net: MaskedNetwork, X) -> float:
    """Squared Frobenius norm of the Jacobian, accumulated row by row."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty input batch")
    total = 0.0
    for row in _jacobian_rows(net, X):
        total += float(np.dot(row, row))
    return total


def trace_fd_samples(net: MaskedNetwork, X, eps: float, num_draws: int, seed: int = 0) -> np.ndarray:
    """Per-draw values of ``||f(X; theta) - f(X; theta + d)||^2 / eps``.

    ``d ~ N(0, eps I)`` on unmasked weights only.  Draw ``j`` uses the
    standard-normal stream ``(seed, j)`` scaled by ``sqrt(eps)``, so sweeps
    over ``eps`` with a fixed seed reuse the same underlying directions.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if num_draws < 1:
        raise ValueError(f"num_draws must be >= 1, got {num_draws}")
    X = np.asarray(X, dtype=np.float64)
    base = predict(net, X)
    out = np.empty(num_draws)
    for j in range(num_draws):
        rng = make_rng(seed, "trace_fd", j)
        pert = net.clone()
        for i, (w, m) in enumerate(zip(net.weights, net.masks)):
            pert.weights[i] = w + np.sqrt(eps) * rng.standard_normal(w.shape) * m
        diff = base - predict(pert, X)
        out[j] = np.dot(diff.ravel(), diff.ravel()) / eps
    return out


def trace_fd(net: MaskedNetwork, X, eps: float, num_draws: int, seed: int = 0) -> float:
    return float(trace_fd_samples(net, X, eps, num_draws, seed).mean())


# -- kernel and spectrum ----------------------------------------------------

class Eigen(NamedTuple):
    values: np.ndarray  # descending
    vectors: np.ndarray | None  # columns, matching ``values``
    converged: bool
    sweeps: int


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pair schedule covering every (p, q) once in n-1 (or n) rounds of disjoint pairs."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _offdiag_norm(A: np.ndarray) -> float:
    off = A.copy()
    np.fill_diagonal(off, 0.0)
    return float(np.linalg.norm(off))


def eigenspectrum(A, tol: float = 1e-10, max_sweeps: int = 100,
                  vectors: bool = False) -> Eigen:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once in round-robin order;
    the rotations of one round act on disjoint index pairs and are applied
    together.  Iteration stops when the off-diagonal Frobenius norm drops
    below ``tol * ||A||_F`` or after ``max_sweeps`` sweeps.
    """
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0:
        raise ValueError(f"eigenspectrum needs a non-empty square matrix, got shape {A.shape}")
    fro = float(np.linalg.norm(A))
    asym = float(np.max(np.abs(A - A.T))) if A.size else 0.0
    if asym > 1e-10 * max(fro, np.finfo(float).tiny):
        raise ValueError(f"matrix is not symmetric (max |A - A^T| = {asym:.3e})")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    V = np.eye(n) if vectors else None
    target = tol * fro
    sweeps = 0
    converged = _offdiag_norm(A) <= target
    schedule = _round_robin(n) if n > 1 else []
    while not converged and sweeps < max_sweeps:
        for P, Q in schedule:
            apq = A[P, Q]
            # Pairs whose off-diagonal entry is negligible against both
            # diagonals are left alone; this also keeps theta finite.
            app, aqq = A[P, P], A[Q, Q]
            live = np.abs(apq) > 1e-300 + 1e-18 * (np.abs(app) + np.abs(aqq))
            if not live.any():
                continue
            P, Q, apq, app, aqq = P[live], Q[live], apq[live], app[live], aqq[live]
            theta = (aqq - app) / (2.0 * apq)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t[theta == 0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rp, rq = A[P, :], A[Q, :]
            A[P, :] = c[:, None] * rp - s[:, None] * rq
            A[Q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = A[:, P], A[:, Q]
            A[:, P] = cp * c - cq * s
            A[:, Q] = cp * s + cq * c
            A[P, Q] = 0.0
            A[Q, P] = 0.0
            if V is not None:
                vp, vq = V[:, P], V[:, Q]
                V[:, P] = vp * c - vq * s
                V[:, Q] = vp * s + vq * c
        sweeps += 1
        converged = _offdiag_norm(A) <= target
    vals = np.diag(A).copy()
    order = np.argsort(-vals, kind="stable")
    return Eigen(vals[order], None if V is None else V[:, order], converged, sweeps)


@dataclass
class NTKMatrix:
    matrix: np.ndarray
    _eig: Eigen | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def trace(self) -> float:
        return float(np.trace(self.matrix))

    def eigen(self) -> Eigen:
        if self._eig is None:
            self._eig = eigenspectrum(self.matrix)
        return self._eig

    def eigenvalues(self) -> np.ndarray:
        return self.eigen().values

    def condition_number(self) -> "Condition":
        return condition_number(self.eigenvalues())


def fixed_weight_ntk(J) -> NTKMatrix:
    J = np.asarray(J, dtype=np.float64)
    if not np.all(np.isfinite(J)):
        raise ValueError("Jacobian contains non-finite values")
    A = J @ J.T
    return NTKMatrix(0.5 * (A + A.T))


class Condition(NamedTuple):
    value: float
    clamped: bool


def condition_number(eigs: Sequence[float]) -> Condition:
    """``max / min`` eigenvalue with the minimum clamped at ``1e-12 * max``."""
    e = np.asarray(eigs, dtype=np.float64)
    if e.size == 0:
        raise ValueError("empty spectrum")
    hi, lo = float(e.max()), float(e.min())
    if hi <= 0:
        raise ValueError("spectrum has no positive eigenvalue")
    floor = CLAMP_RATIO * hi
    if lo < floor:
        return Condition(hi / floor, True)
    return Condition(hi / lo, False)


def nuclear_norm(eigs: Sequence[float]) -> float:
    e = np.asarray(eigs, dtype=np.float64)
    if e.size == 0:
        raise ValueError("empty spectrum")
    return float(e.sum())


def write_spectrum_csv(path: str | Path, eigs: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "eigenvalue"])
        for i, v in enumerate(sorted(eigs, reverse=True)):
            w.writerow([i, repr(float(v))])


TRACE_REPORT_HEADER = ["method", "density", "trace_exact", "trace_fd", "condition_number"]


def write_trace_report(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_REPORT_HEADER, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
