"""Masked feedforward networks: MLPs and small CNNs.

A network computes with effective weights ``theta * mask`` on every forward.
Biases are never masked.  The flat mask layout used by every pruner is
layer-major over prunable layers, then row-major inside each weight tensor;
dense weights are stored as ``(out, in)`` and conv kernels as
``(out_ch, in_ch, kh, kw)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import make_rng
from .tensor import Tape, Tensor, add_bias, conv2d, matmul, mul, relu, reshape, transpose

MAX_DENSE_LAYERS = 10
MAX_CONV_LAYERS = 4
INIT_SCHEMES = ("kaiming_normal", "xavier_normal")


class ArchitectureError(ValueError):
    """Raised when layer shapes do not compose."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    fan_in: int = 0
    fan_out: int = 0
    kernel: tuple[int, int] | None = None
    padding: int = 0
    bias: bool = True

    @property
    def prunable(self) -> bool:
        return self.kind in ("dense", "conv2d")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.fan_out, self.fan_in)
        if self.kind == "conv2d":
            return (self.fan_out, self.fan_in) + tuple(self.kernel)
        return ()

    def init_fans(self) -> tuple[int, int]:
        """Fan-in/fan-out counting receptive-field size for convolutions."""
        if self.kind == "conv2d":
            rf = self.kernel[0] * self.kernel[1]
            return self.fan_in * rf, self.fan_out * rf
        return self.fan_in, self.fan_out


@dataclass(frozen=True)
class InitScheme:
    name: str = "kaiming_normal"
    seed: int = 0

    def std(self, layer: LayerSpec) -> float:
        fi, fo = layer.init_fans()
        if self.name == "kaiming_normal":
            return float(np.sqrt(2.0 / fi))
        if self.name == "xavier_normal":
            return float(np.sqrt(2.0 / (fi + fo)))
        raise ValueError(f"unknown init scheme {self.name!r}; expected one of {INIT_SCHEMES}")


@dataclass(frozen=True)
class Architecture:
    """Input shape (without batch axis) plus a layer list.

    Layer tokens: ``"dense:OUT"``, ``"conv2d:OUT:K"`` or ``"conv2d:OUT:K:PAD"``,
    ``"relu"``, ``"flatten"``.
    """
    input_shape: tuple[int, ...]
    layers: tuple[str, ...]
    bias: bool = True

    @classmethod
    def mlp(cls, sizes: Sequence[int], bias: bool = True, activation: bool = True) -> "Architecture":
        if len(sizes) < 2:
            raise ArchitectureError("an MLP needs at least input and output sizes")
        toks: list[str] = []
        for i, s in enumerate(sizes[1:]):
            toks.append(f"dense:{s}")
            if activation and i < len(sizes) - 2:
                toks.append("relu")
        return cls((int(sizes[0]),), tuple(toks), bias)


def resolve_layers(arch: Architecture) -> list[LayerSpec]:
    if not arch.layers:
        raise ArchitectureError("empty layer list")
    shape = tuple(int(s) for s in arch.input_shape)
    if not shape or any(s <= 0 for s in shape):
        raise ArchitectureError(f"invalid input shape {arch.input_shape}")
    specs: list[LayerSpec] = []
    for tok in arch.layers:
        parts = str(tok).strip().lower().split(":")
        kind = parts[0]
        try:
            args = [int(p) for p in parts[1:]]
        except ValueError:
            raise ArchitectureError(f"bad layer token {tok!r}") from None
        if kind == "dense":
            if len(args) != 1 or args[0] <= 0:
                raise ArchitectureError(f"dense layer needs one positive width: {tok!r}")
            if len(shape) != 1:
                raise ArchitectureError(f"dense layer {tok!r} needs a flat input, got shape {shape}")
            specs.append(LayerSpec("dense", shape[0], args[0], bias=arch.bias))
            shape = (args[0],)
        elif kind == "conv2d":
            if len(args) not in (2, 3) or min(args) < 0 or args[0] == 0 or args[1] == 0:
                raise ArchitectureError(f"conv2d layer needs OUT:K[:PAD]: {tok!r}")
            if len(shape) != 3:
                raise ArchitectureError(f"conv2d layer {tok!r} needs (C,H,W) input, got shape {shape}")
            out, k = args[0], args[1]
            pad = args[2] if len(args) == 3 else 0
            h, w = shape[1] + 2 * pad - k + 1, shape[2] + 2 * pad - k + 1
            if h <= 0 or w <= 0:
                raise ArchitectureError(f"kernel {k} too large for input {shape} in {tok!r}")
            specs.append(LayerSpec("conv2d", shape[0], out, (k, k), pad, arch.bias))
            shape = (out, h, w)
        elif kind == "relu":
            specs.append(LayerSpec("relu", int(np.prod(shape)), int(np.prod(shape))))
        elif kind == "flatten":
            n = int(np.prod(shape))
            specs.append(LayerSpec("flatten", n, n))
            shape = (n,)
        else:
            raise ArchitectureError(f"unknown layer kind {kind!r}")
    n_dense = sum(s.kind == "dense" for s in specs)
    n_conv = sum(s.kind == "conv2d" for s in specs)
    if n_dense + n_conv == 0:
        raise ArchitectureError("architecture has no prunable layer")
    if n_dense > MAX_DENSE_LAYERS or n_conv > MAX_CONV_LAYERS:
        raise ArchitectureError(
            f"at most {MAX_DENSE_LAYERS} dense and {MAX_CONV_LAYERS} conv layers are supported")
    if len(shape) != 1:
        raise ArchitectureError(f"network output must be flat, got shape {shape}")
    return specs


@dataclass
class MaskedNetwork:
    arch: Architecture
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray | None]
    masks: list[np.ndarray]
    init: InitScheme = field(default_factory=InitScheme)

    @property
    def prunable(self) -> list[LayerSpec]:
        return [s for s in self.layers if s.prunable]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.arch.input_shape)

    @property
    def num_outputs(self) -> int:
        return self.prunable[-1].fan_out

    @property
    def num_prunable(self) -> int:
        return sum(w.size for w in self.weights)

    def layer_sizes(self) -> list[int]:
        return [w.size for w in self.weights]

    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.layer_sizes())])

    def active_count(self) -> int:
        return int(sum(m.sum() for m in self.masks))

    def density(self) -> float:
        return self.active_count() / self.num_prunable

    def clone(self) -> "MaskedNetwork":
        return MaskedNetwork(
            self.arch, list(self.layers),
            [w.copy() for w in self.weights],
            [None if b is None else b.copy() for b in self.biases],
            [m.copy() for m in self.masks], self.init)


def build(arch: Architecture, init: str = "kaiming_normal", seed: int = 0) -> MaskedNetwork:
    """Network with an all-ones mask and weights drawn from ``init``."""
    layers = resolve_layers(arch)
    scheme = InitScheme(init, seed)
    params = [s for s in layers if s.prunable]
    net = MaskedNetwork(
        arch, layers,
        [np.zeros(s.weight_shape) for s in params],
        [np.zeros(s.fan_out) if s.bias else None for s in params],
        [np.ones(s.weight_shape) for s in params], scheme)
    _draw_weights(net, make_rng(seed, "init"))
    return net


def _draw_weights(net: MaskedNetwork, rng: np.random.Generator) -> None:
    for i, spec in enumerate(net.prunable):
        net.weights[i] = rng.normal(0.0, net.init.std(spec), spec.weight_shape)
        if net.biases[i] is not None:
            net.biases[i] = np.zeros(spec.fan_out)


def reinitialize(net: MaskedNetwork, rng: np.random.Generator | int) -> MaskedNetwork:
    """Copy of ``net`` with fresh weights, zero biases and the same mask."""
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(int(rng), "init")
    out = net.clone()
    _draw_weights(out, rng)
    return out


# -- forward ----------------------------------------------------------------

def forward_effective(net: MaskedNetwork, x: Tensor, weights: Sequence[Tensor],
                      biases: Sequence[Tensor | None]) -> Tensor:
    """Run the layer stack with already-effective weight tensors."""
    if tuple(x.shape[1:]) != net.input_shape:
        raise ValueError(f"input shape {x.shape} does not match network input (batch,)+{net.input_shape}")
    h = x
    k = 0
    for spec in net.layers:
        if spec.kind == "dense":
            h = matmul(h, transpose(weights[k]))
            if biases[k] is not None:
                h = add_bias(h, biases[k])
            k += 1
        elif spec.kind == "conv2d":
            h = conv2d(h, weights[k], spec.padding)
            if biases[k] is not None:
                h = add_bias(h, biases[k])
            k += 1
        elif spec.kind == "relu":
            h = relu(h)
        elif spec.kind == "flatten":
            h = reshape(h, (h.shape[0], -1))
    return h


def forward_masked(net: MaskedNetwork, x, tape: Tape | None = None,
                   return_leaves: bool = False):
    """Forward pass on ``theta * mask``.

    With a tape, weights and biases become tape parameters; ``return_leaves``
    then also returns ``(weight_leaves, bias_leaves)`` so callers can read
    their gradients.  Weight gradients are those of ``theta`` and therefore
    vanish at masked coordinates.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if tape is None:
        ws = [Tensor._raw(w) for w in net.weights]
        bs = [None if b is None else Tensor._raw(b) for b in net.biases]
    else:
        ws = [tape.param(w) for w in net.weights]
        bs = [None if b is None else tape.param(b) for b in net.biases]
    eff = [mul(w, Tensor._raw(m)) for w, m in zip(ws, net.masks)]
    out = forward_effective(net, x, eff, bs)
    if return_leaves:
        return out, ws, bs
    return out


def predict(net: MaskedNetwork, x: np.ndarray) -> np.ndarray:
    eff = [w * m for w, m in zip(net.weights, net.masks)]
    return forward_effective(net, Tensor(x), [Tensor._raw(w) for w in eff],
                             [None if b is None else Tensor._raw(b) for b in net.biases]).data


# -- flat mask layout -------------------------------------------------------

def flatten_masks(net: MaskedNetwork) -> np.ndarray:
    return np.concatenate([m.ravel() for m in net.masks]).astype(np.uint8)


def flatten_weights(net: MaskedNetwork) -> np.ndarray:
    return np.concatenate([w.ravel() for w in net.weights])


def apply_mask_vector(net: MaskedNetwork, m) -> None:
    m = np.asarray(m)
    if m.ndim != 1 or m.size != net.num_prunable:
        raise ValueError(f"mask vector length {m.size} != prunable count {net.num_prunable}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask vector entries must be 0 or 1")
    off = net.offsets()
    for i, w in enumerate(net.weights):
        net.masks[i] = m[off[i]:off[i + 1]].astype(np.float64).reshape(w.shape)


def unflatten(net: MaskedNetwork, v: np.ndarray) -> list[np.ndarray]:
    off = net.offsets()
    return [v[off[i]:off[i + 1]].reshape(w.shape) for i, w in enumerate(net.weights)]


def locate(net: MaskedNetwork, flat_index: int) -> tuple[int, tuple[int, ...]]:
    """Map a flat mask index to ``(prunable layer, position)``."""
    if not 0 <= flat_index < net.num_prunable:
        raise IndexError(f"flat index {flat_index} out of range [0, {net.num_prunable})")
    off = net.offsets()
    layer = int(np.searchsorted(off, flat_index, side="right") - 1)
    pos = np.unravel_index(flat_index - off[layer], net.weights[layer].shape)
    return layer, tuple(int(p) for p in pos)


def index_map(net: MaskedNetwork) -> list[tuple[int, tuple[int, ...]]]:
    out = []
    for layer, w in enumerate(net.weights):
        out.extend((layer, tuple(int(p) for p in pos)) for pos in np.ndindex(*w.shape))
    return out


# -- snapshots --------------------------------------------------------------
#
# Little-endian layout:
#   b"NTKS" | u32 version | u8 init code | u64 seed | u8 bias flag
#   u32 ndim | u32 dims[ndim]                              (input shape)
#   u32 nlayers | per layer: u8 kind, u32 fan_in, u32 fan_out, u32 kh, u32 kw, u32 pad
#   theta: per prunable layer, weights (f64) then bias (f64, if any)
#   mask:  per prunable layer, one u8 per weight

SNAPSHOT_MAGIC = b"NTKS"
SNAPSHOT_VERSION = 1
_KINDS = ("dense", "conv2d", "relu", "flatten")


class SnapshotError(ValueError):
    pass


def save_snapshot(net: MaskedNetwork, path: str | Path) -> None:
    arch = net.arch
    buf = bytearray(SNAPSHOT_MAGIC)
    buf += struct.pack("<IBQB", SNAPSHOT_VERSION, INIT_SCHEMES.index(net.init.name),
                       net.init.seed, int(arch.bias))
    buf += struct.pack("<I", len(arch.input_shape))
    buf += struct.pack(f"<{len(arch.input_shape)}I", *arch.input_shape)
    buf += struct.pack("<I", len(net.layers))
    for s in net.layers:
        kh, kw = s.kernel or (0, 0)
        buf += struct.pack("<BIIIII", _KINDS.index(s.kind), s.fan_in, s.fan_out, kh, kw, s.padding)
    for w, b in zip(net.weights, net.biases):
        buf += w.astype("<f8").tobytes()
        if b is not None:
            buf += b.astype("<f8").tobytes()
    for m in net.masks:
        buf += m.astype(np.uint8).tobytes()
    Path(path).write_bytes(bytes(buf))


def load_snapshot(path: str | Path) -> MaskedNetwork:
    raw = Path(path).read_bytes()
    pos = 0

    def take(fmt: str):
        nonlocal pos
        n = struct.calcsize(fmt)
        if pos + n > len(raw):
            raise SnapshotError(f"truncated snapshot {path}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += n
        return vals

    def take_array(dtype: str, n: int) -> np.ndarray:
        nonlocal pos
        nbytes = np.dtype(dtype).itemsize * n
        if pos + nbytes > len(raw):
            raise SnapshotError(f"truncated snapshot {path}")
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=pos)
        pos += nbytes
        return arr

    if raw[:4] != SNAPSHOT_MAGIC:
        raise SnapshotError(f"bad magic in snapshot {path}")
    pos = 4
    version, init_code, seed, bias = take("<IBQB")
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    (ndim,) = take("<I")
    input_shape = take(f"<{ndim}I")
    (nlayers,) = take("<I")
    toks = []
    for _ in range(nlayers):
        kind, fi, fo, kh, kw, pad = take("<BIIIII")
        kind = _KINDS[kind]
        toks.append({"dense": f"dense:{fo}", "conv2d": f"conv2d:{fo}:{kh}:{pad}"}.get(kind, kind))
    arch = Architecture(tuple(input_shape), tuple(toks), bool(bias))
    net = build(arch, INIT_SCHEMES[init_code], seed)
    for i, spec in enumerate(net.prunable):
        n = int(np.prod(spec.weight_shape))
        net.weights[i] = take_array("<f8", n).astype(np.float64).reshape(spec.weight_shape)
        if net.biases[i] is not None:
            net.biases[i] = take_array("<f8", spec.fan_out).astype(np.float64)
    for i, spec in enumerate(net.prunable):
        n = int(np.prod(spec.weight_shape))
        net.masks[i] = take_array("u1", n).astype(np.float64).reshape(spec.weight_shape)
    if pos != len(raw):
        raise SnapshotError(f"trailing bytes in snapshot {path}")
    return net
