"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every primitive applied to tensors that depend on
one of its parameter leaves.  ``tape.backward(out)`` walks the record in
reverse and returns the gradient of the scalar ``out`` with respect to every
leaf created by :meth:`Tape.param`.

Tensors not attached to any tape are constants; operations on constants only
are evaluated eagerly and recorded nowhere.

Example::

    tape = Tape()
    w = tape.param([[1.0, 2.0]])
    x = Tensor([[1.0], [1.0]])
    loss = sq_l2_norm(matmul(w, x))
    grads = tape.backward(loss)
    grads[w]  # array([[6., 6.]])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of a tape (freed tape, mixed tapes, non-scalar output)."""


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int = -1):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor data contains non-finite values")
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    @classmethod
    def _raw(cls, data: np.ndarray, tape: "Tape | None" = None, node: int = -1) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.tape = tape
        t.node = node
        return t

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        where = "const" if self.tape is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {where})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Op:
    __slots__ = ("name", "out", "inputs", "vjp")

    def __init__(self, name, out, inputs, vjp):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations over one forward pass."""

    def __init__(self):
        self._ops: list[_Op] = []
        self._leaves: list[Tensor] = []
        self._next = 0
        self.freed = False

    def __len__(self) -> int:
        return len(self._ops)

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves)

    def _new_id(self) -> int:
        self._next += 1
        return self._next - 1

    def param(self, value) -> Tensor:
        """Create a differentiable leaf holding a copy of ``value``."""
        if self.freed:
            raise TapeError("tape already consumed by backward()")
        t = Tensor(np.array(value, dtype=np.float64), self, self._new_id())
        self._leaves.append(t)
        return t

    def record(self, name: str, data: np.ndarray, inputs: Sequence[Tensor],
               vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
        if self.freed:
            raise TapeError("tape already consumed by backward()")
        out = Tensor._raw(data, self, self._new_id())
        ids = tuple(t.node if t.tape is self else None for t in inputs)
        self._ops.append(_Op(name, out.node, ids, vjp))
        return out

    def backward(self, output: Tensor, free: bool = True) -> dict[Tensor, np.ndarray]:
        """Gradients of scalar ``output`` for every leaf of this tape.

        With ``free=False`` the record is kept so further scalars built on the
        same forward pass can be differentiated (used for Jacobian rows).
        """
        if self.freed:
            raise TapeError("tape already consumed by backward()")
        if output.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
        if output.tape is not None and output.tape is not self:
            raise TapeError("output was recorded on a different tape")
        grads: dict[int, np.ndarray] = {}
        if output.tape is self:
            grads[output.node] = np.ones_like(output.data)
            for op in reversed(self._ops):
                g = grads.pop(op.out, None)
                if g is None:
                    continue
                for nid, ig in zip(op.inputs, op.vjp(g)):
                    if nid is None or ig is None:
                        continue
                    prev = grads.get(nid)
                    grads[nid] = ig if prev is None else prev + ig
        result = {leaf: grads.get(leaf.node, np.zeros_like(leaf.data)) for leaf in self._leaves}
        if free:
            self._ops = []
            self.freed = True
        return result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("operands belong to different tapes")
            tape = t.tape
    return tape


def _finish(name: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{name} produced non-finite values")
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor._raw(data)
    return tape.record(name, data, inputs, vjp)


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# -- primitives -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _finish("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _finish("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _finish("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _finish("reshape", data, (a,), lambda g: (g.reshape(old),))


def add_bias(x, b) -> Tensor:
    """Add a per-channel vector along axis 1 (features or conv channels)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.data.ndim < 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    axes = (0,) + tuple(range(2, x.data.ndim))
    return _finish("add_bias", x.data + b.data.reshape(view), (x, b),
                   lambda g: (g, g.sum(axis=axes)))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    on = a.data > 0
    return _finish("relu", np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def abs_(a) -> Tensor:
    """Elementwise |a|; the subgradient at 0 is 0."""
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return _finish("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def sum_(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _finish("sum", np.array([a.data.sum()]), (a,),
                   lambda g: (np.full(shape, g.reshape(-1)[0]),))


def sq_l2_norm(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _finish("sq_l2_norm", np.array([np.dot(ad.ravel(), ad.ravel())]), (a,),
                   lambda g: (2.0 * g.reshape(-1)[0] * ad,))


def conv2d(x, w, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,kh,kw).

    ``padding`` zero-pads both spatial borders by that many pixels.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
    patches = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N,C,Ho,Wo,kh,kw
    ho, wo = patches.shape[2], patches.shape[3]
    out = np.einsum("nchwij,ocij->nohw", patches, w.data, optimize=True)
    wd = w.data
    xshape = x.shape

    def vjp(g):
        gw = np.einsum("nchwij,nohw->ocij", patches, g, optimize=True)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += np.einsum("nohw,oc->nchw", g, wd[:, :, i, j])
        gx = gxp[:, :, p:p + xshape[2], p:p + xshape[3]] if p else gxp
        return gx, gw

    return _finish("conv2d", out, (x, w), vjp)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of (n, k) logits against integer labels."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: shape mismatch {logits.shape} vs {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def vjp(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g.reshape(-1)[0] / n),)

    return _finish("softmax_cross_entropy", np.array([loss]), (logits,), vjp)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
