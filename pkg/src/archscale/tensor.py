"""Dense tensors with reverse-mode autodiff and multiply-accumulate accounting.

Values are numpy arrays (float32 for training, float64 for gradient checks).
Every op executed under an active :class:`Tape` appends a backward rule and
adds its scalar multiply-accumulate cost to ``tape.multiply_count``.  The
counting convention per op is documented in each op's docstring; additions,
comparisons, gathers and reshapes are free, while exp/log/tanh/erf/sqrt and
divisions are charged one multiply-equivalent per element.  The public FLOP
figure used elsewhere in the package is ``2 * multiply_count`` (mul + add).

Only the forward pass is counted; backward closures run raw numpy.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "ShapeError", "GraphError",
    "matmul", "einsum2", "add", "sub", "mul", "div", "scale", "neg",
    "relu", "gelu", "tanh", "sigmoid", "log", "softmax", "rms_norm",
    "reduce_sum", "reduce_mean", "embed", "scatter_rows", "cumsum",
    "transpose", "swapaxes", "reshape", "pad_axis", "slice_axis",
    "unfold1d", "depthwise_conv1d", "depthwise_conv1d_dyn",
    "mean_pool_stride2", "cross_entropy", "nll_from_logprobs",
]


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class GraphError(RuntimeError):
    """Autodiff misuse: no live tape, non-scalar loss, etc."""


class Tensor:
    """Immutable dense n-dimensional value.

    ``data`` is owned by the tensor after construction and must not be
    mutated; ops always allocate fresh outputs.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


class _Node:
    __slots__ = ("out_id", "inputs", "vjp")

    def __init__(self, out_id, inputs, vjp):
        self.out_id = out_id
        self.inputs = inputs
        self.vjp = vjp


class GradMap:
    """Gradients keyed by the tensors they belong to."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        try:
            return self._grads[id(t)]
        except KeyError:
            raise KeyError(f"no gradient recorded for {t!r}") from None

    def get(self, t: Tensor, default=None):
        return self._grads.get(id(t), default)


_ACTIVE = threading.local()


def _tape() -> "Tape | None":
    return getattr(_ACTIVE, "tape", None)


class Tape:
    """Ordered record of ops plus the cumulative multiply-accumulate count.

    One tape is confined to a single thread; independent tapes may run
    concurrently on separate threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.multiply_count: int = 0

    def __enter__(self) -> "Tape":
        if _tape() is not None:
            raise GraphError("a tape is already active on this thread")
        _ACTIVE.tape = self
        return self

    def __exit__(self, *exc):
        _ACTIVE.tape = None
        return False

    def backward(self, loss: Tensor) -> GradMap:
        """Reverse-mode sweep from a scalar loss to every grad-requiring leaf."""
        if loss.shape != ():
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        if not np.isfinite(loss.data):
            raise GraphError("loss is not finite")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            for t, gt in zip(node.inputs, node.vjp(g)):
                if gt is None or not t.requires_grad:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = gt if acc is None else acc + gt
        return GradMap(grads)


def _record(out: Tensor, mults: int, inputs: tuple[Tensor, ...], vjp: Callable | None):
    t = _tape()
    if t is None:
        return
    t.multiply_count += mults
    if vjp is not None and out.requires_grad:
        t.nodes.append(_Node(id(out), inputs, vjp))


def _rg(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  Cost: one MAC per scalar product, batch * m * k * n.

    Supported forms: ``a[..., m, k] @ b[k, n]`` (shared weight) and
    ``a[B..., m, k] @ b[B..., k, n]`` with identical leading dims.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batch dims differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)
    out = Tensor(out_data, requires_grad=_rg(a, b))
    m, k = a.shape[-2], a.shape[-1]
    n = b.shape[-1]
    batch = int(np.prod(a.shape[:-2], dtype=np.int64)) if a.ndim > 2 else 1

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    _record(out, batch * m * k * n, (a, b), vjp)
    return out


def einsum2(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum.  Cost: product of the extents of all distinct indices.

    The spec must be of the form ``"ab,bc->ac"`` with single-letter indices and
    no ellipsis; every output index must appear in an input.
    """
    lhs, out_sub = spec.replace(" ", "").split("->")
    a_sub, b_sub = lhs.split(",")
    if len(a_sub) != a.ndim or len(b_sub) != b.ndim:
        raise ShapeError(f"einsum spec {spec!r} does not match operand ranks")
    dims: dict[str, int] = {}
    for sub, t in ((a_sub, a), (b_sub, b)):
        for ch, extent in zip(sub, t.shape):
            if dims.setdefault(ch, extent) != extent:
                raise ShapeError(f"index {ch!r} has conflicting extents in {spec!r}")
    out_data = np.einsum(spec, a.data, b.data, optimize=True)
    out = Tensor(out_data, requires_grad=_rg(a, b))
    mults = 1
    for extent in dims.values():
        mults *= extent

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b.data, optimize=True)
        if b.requires_grad:
            gb = np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, a.data, optimize=True)
        return ga, gb

    _record(out, mults, (a, b), vjp)
    return out


# ---------------------------------------------------------------------------
# pointwise arithmetic


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def add(a, b) -> Tensor:
    """Elementwise sum with broadcasting.  Cost: 0 (additions are free)."""
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data + b.data, requires_grad=_rg(a, b))

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    _record(out, 0, (a, b), vjp)
    return out


def sub(a, b) -> Tensor:
    """Elementwise difference.  Cost: 0."""
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data - b.data, requires_grad=_rg(a, b))

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    _record(out, 0, (a, b), vjp)
    return out


def neg(a: Tensor) -> Tensor:
    """Negation.  Cost: 0."""
    out = Tensor(-a.data, requires_grad=a.requires_grad)
    _record(out, 0, (a,), lambda g: (-g,))
    return out


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting.  Cost: one per output element."""
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data * b.data, requires_grad=_rg(a, b))

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    _record(out, out.size, (a, b), vjp)
    return out


def div(a, b) -> Tensor:
    """Elementwise quotient.  Cost: one per output element."""
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data / b.data, requires_grad=_rg(a, b))

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g / b.data, a.shape)
        if b.requires_grad:
            gb = _unbroadcast(-g * out.data / b.data, b.shape)
        return ga, gb

    _record(out, out.size, (a, b), vjp)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar.  Cost: one per element."""
    out = Tensor(a.data * a.dtype.type(c), requires_grad=a.requires_grad)
    _record(out, out.size, (a,), lambda g: (g * a.dtype.type(c),))
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    """Rectifier.  Cost: 0 (comparison and select only)."""
    out = Tensor(np.maximum(a.data, 0), requires_grad=a.requires_grad)
    _record(out, 0, (a,), lambda g: (g * (a.data > 0),))
    return out


def tanh(a: Tensor) -> Tensor:
    """Hyperbolic tangent.  Cost: one per element."""
    out_data = np.tanh(a.data)
    out = Tensor(out_data, requires_grad=a.requires_grad)
    _record(out, out.size, (a,), lambda g: (g * (1.0 - out_data * out_data),))
    return out


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function.  Cost: one per element."""
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(out_data, requires_grad=a.requires_grad)
    _record(out, out.size, (a,), lambda g: (g * out_data * (1.0 - out_data),))
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU.  Cost: four per element (scale, erf, two muls)."""
    x = a.data
    inner = erf(x * (1.0 / math.sqrt(2.0)))
    out = Tensor(0.5 * x * (1.0 + inner), requires_grad=a.requires_grad)

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * (1.0 / math.sqrt(2.0 * math.pi))
        return (g * (0.5 * (1.0 + inner) + x * pdf),)

    _record(out, 4 * out.size, (a,), vjp)
    return out


def log(a: Tensor) -> Tensor:
    """Natural log.  Cost: one per element."""
    out = Tensor(np.log(a.data), requires_grad=a.requires_grad)
    _record(out, out.size, (a,), lambda g: (g / a.data,))
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax.  Cost: two per element (exp + divide)."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(out_data, requires_grad=a.requires_grad)

    def vjp(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    _record(out, 2 * out.size, (a,), vjp)
    return out


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """RMS normalization over the last axis, scale-only (no bias).

    Cost: 3 per element (square, normalize, gain) plus 2 per row
    (mean divide, rsqrt).
    """
    if gain.shape != (a.shape[-1],):
        raise ShapeError(f"gain shape {gain.shape} != ({a.shape[-1]},)")
    x = a.data
    d = x.shape[-1]
    ms = (x * x).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    normed = x * inv
    out = Tensor(normed * gain.data, requires_grad=_rg(a, gain))
    rows = a.size // d

    def vjp(g):
        ga = gg = None
        gg_raw = g * normed
        if a.requires_grad:
            gx = g * gain.data
            ga = inv * (gx - x * (inv * inv / d) * (gx * x).sum(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = gg_raw.reshape(-1, d).sum(axis=0)
        return ga, gg

    _record(out, 3 * out.size + 2 * rows, (a, gain), vjp)
    return out


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum reduction.  Cost: 0."""
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), requires_grad=a.requires_grad)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    _record(out, 0, (a,), vjp)
    return out


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Mean reduction.  Cost: one per output element (the 1/n scale)."""
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    out = Tensor(out_data, requires_grad=a.requires_grad)
    n = a.size // max(out_data.size, 1)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)

    _record(out, max(out_data.size, 1), (a,), vjp)
    return out


# ---------------------------------------------------------------------------
# gathers, scatters, and shape moves


def embed(ids: np.ndarray, table: Tensor) -> Tensor:
    """Row gather: ``table[ids]`` for an integer index array.  Cost: 0."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embed ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embed id out of range")
    out = Tensor(table.data[ids], requires_grad=table.requires_grad)

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, *table.shape[1:]))
        return (gt,)

    _record(out, 0, (table,), vjp)
    return out


def scatter_rows(src: Tensor, idx: np.ndarray, length: int) -> Tensor:
    """Scatter-add rows of ``src[..., d]`` into a fresh ``[length, d]`` buffer.

    Index values equal to ``length`` are dropped (used for padding slots).
    Cost: 0.
    """
    idx = np.asarray(idx)
    if idx.shape != src.shape[:-1]:
        raise ShapeError(f"idx shape {idx.shape} != src rows {src.shape[:-1]}")
    d = src.shape[-1]
    buf = np.zeros((length + 1, d), dtype=src.dtype)
    np.add.at(buf, idx.ravel(), src.data.reshape(-1, d))
    out = Tensor(buf[:length], requires_grad=src.requires_grad)

    def vjp(g):
        gpad = np.concatenate([g, np.zeros((1, d), dtype=g.dtype)], axis=0)
        return (gpad[idx],)

    _record(out, 0, (src,), vjp)
    return out


def cumsum(a: Tensor, axis: int) -> Tensor:
    """Inclusive cumulative sum.  Cost: 0 (additions)."""
    out = Tensor(np.cumsum(a.data, axis=axis), requires_grad=a.requires_grad)

    def vjp(g):
        flipped = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (flipped,)

    _record(out, 0, (a,), vjp)
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    """Axis permutation.  Cost: 0."""
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes), requires_grad=a.requires_grad)
    inv = tuple(np.argsort(axes))
    _record(out, 0, (a,), lambda g: (np.transpose(g, inv),))
    return out


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    """Swap two axes.  Cost: 0."""
    out = Tensor(np.swapaxes(a.data, ax1, ax2), requires_grad=a.requires_grad)
    _record(out, 0, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Reshape.  Cost: 0."""
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad)
    _record(out, 0, (a,), lambda g: (g.reshape(a.shape),))
    return out


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis.  Cost: 0."""
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    out = Tensor(np.pad(a.data, widths), requires_grad=a.requires_grad)
    n = a.shape[axis]

    def vjp(g):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(before, before + n)
        return (g[tuple(sl)],)

    _record(out, 0, (a,), vjp)
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice of one axis.  Cost: 0."""
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    out = Tensor(a.data[tuple(sl)].copy(), requires_grad=a.requires_grad)

    def vjp(g):
        gg = np.zeros(a.shape, dtype=g.dtype)
        gg[tuple(sl)] = g
        return (gg,)

    _record(out, 0, (a,), vjp)
    return out


# ---------------------------------------------------------------------------
# sequence ops


def _conv_pads(width: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        return (width - 1) // 2, width // 2
    if padding == "causal":
        return width - 1, 0
    raise ShapeError(f"padding must be 'same' or 'causal', got {padding!r}")


def unfold1d(a: Tensor, width: int, padding: str = "same") -> Tensor:
    """Sliding windows along the time axis: ``[..., n, d] -> [..., n, width*d]``.

    Zero padding keeps the output length equal to the input length.  Cost: 0
    (pure data movement); pair with :func:`matmul` for a full convolution.
    """
    left, right = _conv_pads(width, padding)
    n, d = a.shape[-2], a.shape[-1]
    xp = np.pad(a.data, [(0, 0)] * (a.ndim - 2) + [(left, right), (0, 0)])
    windows = [xp[..., j:j + n, :] for j in range(width)]
    out = Tensor(np.concatenate(windows, axis=-1), requires_grad=a.requires_grad)

    def vjp(g):
        gx = np.zeros_like(xp)
        for j in range(width):
            gx[..., j:j + n, :] += g[..., j * d:(j + 1) * d]
        return (gx[..., left:left + n, :],)

    _record(out, 0, (a,), vjp)
    return out


def _expand_groups(kern: np.ndarray, d: int, groups: int, axis: int) -> np.ndarray:
    if d % groups:
        raise ShapeError(f"channels {d} not divisible by groups {groups}")
    return np.repeat(kern, d // groups, axis=axis)


def depthwise_conv1d(a: Tensor, kernels: Tensor, padding: str = "same") -> Tensor:
    """Depthwise convolution with one kernel column per channel group.

    ``a`` is ``[..., n, d]``, ``kernels`` is ``[width, groups]`` and column
    ``g`` is shared by the ``d // groups`` channels of group ``g``.  Output
    length equals input length.  Cost: width per output element.
    """
    w, groups = kernels.shape
    n, d = a.shape[-2], a.shape[-1]
    left, right = _conv_pads(w, padding)
    kfull = _expand_groups(kernels.data, d, groups, axis=1)  # [w, d]
    xp = np.pad(a.data, [(0, 0)] * (a.ndim - 2) + [(left, right), (0, 0)])
    out_data = np.zeros_like(a.data)
    for j in range(w):
        out_data += xp[..., j:j + n, :] * kfull[j]
    out = Tensor(out_data, requires_grad=_rg(a, kernels))

    def vjp(g):
        ga = gk = None
        if a.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(w):
                gxp[..., j:j + n, :] += g * kfull[j]
            ga = gxp[..., left:left + n, :]
        if kernels.requires_grad:
            gk = np.empty((w, d), dtype=g.dtype)
            for j in range(w):
                gk[j] = (g * xp[..., j:j + n, :]).reshape(-1, d).sum(axis=0)
            gk = gk.reshape(w, groups, d // groups).sum(axis=2)
        return ga, gk

    _record(out, w * out.size, (a, kernels), vjp)
    return out


def depthwise_conv1d_dyn(a: Tensor, kernels: Tensor, padding: str = "same") -> Tensor:
    """Depthwise convolution with per-position kernels.

    ``a`` is ``[..., n, d]``, ``kernels`` is ``[..., n, width, groups]`` (one
    kernel per output position).  Cost: width per output element.
    """
    if kernels.shape[:-2] != a.shape[:-1]:
        raise ShapeError(f"kernel leading dims {kernels.shape[:-2]} != {a.shape[:-1]}")
    n, d = a.shape[-2], a.shape[-1]
    w, groups = kernels.shape[-2], kernels.shape[-1]
    if d % groups:
        raise ShapeError(f"channels {d} not divisible by groups {groups}")
    rep = d // groups
    left, right = _conv_pads(w, padding)
    xp = np.pad(a.data, [(0, 0)] * (a.ndim - 2) + [(left, right), (0, 0)])
    kfull = np.repeat(kernels.data, rep, axis=-1)  # [..., n, w, d]
    out_data = np.zeros_like(a.data)
    for j in range(w):
        out_data += xp[..., j:j + n, :] * kfull[..., j, :]
    out = Tensor(out_data, requires_grad=_rg(a, kernels))

    def vjp(g):
        ga = gk = None
        if a.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(w):
                gxp[..., j:j + n, :] += g * kfull[..., j, :]
            ga = gxp[..., left:left + n, :]
        if kernels.requires_grad:
            gk = np.empty(kfull.shape, dtype=g.dtype)
            for j in range(w):
                gk[..., j, :] = g * xp[..., j:j + n, :]
            gk = gk.reshape(*kernels.shape[:-1], groups, rep).sum(axis=-1)
        return ga, gk

    _record(out, w * out.size, (a, kernels), vjp)
    return out


def mean_pool_stride2(a: Tensor) -> Tensor:
    """Halve the time axis by averaging adjacent pairs: ``[..., n, d] -> [..., ceil(n/2), d]``.

    An odd final position pools a window of one.  Cost: one per output element.
    """
    n, d = a.shape[-2], a.shape[-1]
    n_out = (n + 1) // 2
    xp = a.data
    if n % 2:
        xp = np.concatenate([xp, np.zeros_like(xp[..., :1, :])], axis=-2)
    pairs = xp.reshape(*a.shape[:-2], n_out, 2, d)
    weights = np.full(n_out, 0.5, dtype=a.dtype)
    if n % 2:
        weights[-1] = 1.0  # singleton window
    out_data = pairs.sum(axis=-2) * weights[:, None]
    out = Tensor(out_data, requires_grad=a.requires_grad)

    def vjp(g):
        gw = g * weights[:, None]
        gx = np.repeat(gw, 2, axis=-2)[..., :n, :]
        return (gx,)

    _record(out, out.size, (a,), vjp)
    return out


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_id: int | None = None) -> Tensor:
    """Mean token cross-entropy from raw logits (natural log).

    ``logits[..., n, V]`` against integer ``targets[..., n]``; rows whose
    target equals ``ignore_id`` are excluded from the mean.  Cost: one per
    logit element (exp) + one per row (log) + one (final divide).
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"target shape {targets.shape} != logit rows {logits.shape[:-1]}")
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    tflat = targets.ravel()
    mask = np.ones(tflat.shape, dtype=bool) if ignore_id is None else (tflat != ignore_id)
    count = int(mask.sum())
    if count == 0:
        raise ShapeError("cross_entropy: every target is ignored")
    m = flat.max(axis=-1, keepdims=True)
    e = np.exp(flat - m)
    z = e.sum(axis=-1)
    lse = np.log(z) + m[:, 0]
    picked = flat[np.arange(flat.shape[0]), np.where(mask, tflat, 0)]
    losses = (lse - picked) * mask
    out = Tensor(np.asarray(losses.sum() / count, dtype=logits.dtype),
                 requires_grad=logits.requires_grad)
    rows = flat.shape[0]

    def vjp(g):
        p = e / z[:, None]
        p[np.arange(rows), np.where(mask, tflat, 0)] -= 1.0
        p *= (g * mask / count)[:, None]
        return (p.reshape(logits.shape),)

    _record(out, logits.size + rows + 1, (logits,), vjp)
    return out


def nll_from_logprobs(logp: Tensor, targets: np.ndarray, ignore_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood from already-log probabilities.

    Cost: one (the final divide); the log cost was paid by the producer.
    """
    targets = np.asarray(targets)
    if targets.shape != logp.shape[:-1]:
        raise ShapeError(f"target shape {targets.shape} != rows {logp.shape[:-1]}")
    v = logp.shape[-1]
    flat = logp.data.reshape(-1, v)
    tflat = targets.ravel()
    mask = np.ones(tflat.shape, dtype=bool) if ignore_id is None else (tflat != ignore_id)
    count = int(mask.sum())
    if count == 0:
        raise ShapeError("nll: every target is ignored")
    picked = flat[np.arange(flat.shape[0]), np.where(mask, tflat, 0)]
    out = Tensor(np.asarray(-(picked * mask).sum() / count, dtype=logp.dtype),
                 requires_grad=logp.requires_grad)

    def vjp(g):
        gg = np.zeros_like(flat)
        gg[np.arange(flat.shape[0]), np.where(mask, tflat, 0)] = -(g * mask / count)
        return (gg.reshape(logp.shape),)

    _record(out, 1, (logp,), vjp)
    return out
