"""
Minimal reverse-mode automatic differentiation over dense rank-5 tensors.

Every tensor has shape (N, C, D, H, W). Each operation records its parents
and a closure that maps the output gradient to one gradient per parent;
`backward` walks the graph in reverse topological order. There is no
broadcasting: binary operations require identical shapes.

Storage defaults to float32. Reductions and the Gaussian filters accumulate in
float64; convolutions run as blocked GEMMs in the operand dtype. Tensors
created with float64 data stay float64 end to end, which is what the
finite-difference tests use.

Also provides the Adam optimizer with linear warmup and the parameter
checkpoint format (raw little-endian float32 + JSON manifest).
"""
import json
import logging
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import ADAM_DEFAULTS, FORMAT_VERSION, config_hash
from .errors import NumericalError, ShapeError, VolumeFormatError

logger = logging.getLogger(__name__)

Grads = Tuple[Optional[np.ndarray], ...]


# =============================================================================
# Tensor
# =============================================================================

class DiffTensor:
    """A node of the autodiff graph holding a rank-5 array."""

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32, name: Optional[str] = None):
        array = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if array.ndim != 5:
            raise ShapeError(f"DiffTensor data must be rank 5 (N, C, D, H, W), got shape {array.shape}")
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = "leaf"
        self._parents: Tuple["DiffTensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Grads]] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["DiffTensor"],
                 backward: Callable[[np.ndarray], Grads], op: str) -> "DiffTensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def spatial(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape[2:])

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self) -> str:
        return f"DiffTensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"


def parameter(data, name: Optional[str] = None, dtype=np.float32) -> DiffTensor:
    """Leaf tensor that receives gradients."""
    return DiffTensor(np.array(data, dtype=dtype, copy=True), requires_grad=True, dtype=dtype, name=name)


def constant(data, dtype=np.float32) -> DiffTensor:
    return DiffTensor(data, requires_grad=False, dtype=dtype)


# =============================================================================
# Backward Pass
# =============================================================================

def _topological_order(root: DiffTensor) -> List[DiffTensor]:
    order: List[DiffTensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: DiffTensor) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("backward() on a loss with no trainable inputs")
        return

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = np.asarray(parent_grad, dtype=parent.data.dtype)
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


# =============================================================================
# Helpers
# =============================================================================

def _same_shape(a: DiffTensor, b: DiffTensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _axis_slice(ndim: int, axis: int, start, stop, step=None) -> tuple:
    index = [slice(None)] * ndim
    index[axis] = slice(start, stop, step)
    return tuple(index)


def _out_dtype(*tensors: DiffTensor):
    return np.result_type(*[t.data.dtype for t in tensors])


# =============================================================================
# Pointwise Operations
# =============================================================================

def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _same_shape(a, b, "add")
    return DiffTensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _same_shape(a, b, "sub")
    return DiffTensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _same_shape(a, b, "mul")
    return DiffTensor._from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _same_shape(a, b, "div")
    out = a.data / b.data

    def _backward(g):
        ga = g / b.data
        return ga, -ga * out

    return DiffTensor._from_op(out, (a, b), _backward, "div")


def neg(x: DiffTensor) -> DiffTensor:
    return DiffTensor._from_op(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: DiffTensor, s: float) -> DiffTensor:
    s = float(s)
    return DiffTensor._from_op(x.data * x.data.dtype.type(s), (x,), lambda g: (g * s,), "scale")


def add_const(x: DiffTensor, c: float) -> DiffTensor:
    return DiffTensor._from_op(x.data + x.data.dtype.type(c), (x,), lambda g: (g,), "add_const")


def square(x: DiffTensor) -> DiffTensor:
    return DiffTensor._from_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x: DiffTensor) -> DiffTensor:
    out = np.sqrt(x.data)
    return DiffTensor._from_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def leaky_relu(x: DiffTensor, slope: float = 0.2) -> DiffTensor:
    positive = x.data > 0
    out = np.where(positive, x.data, x.data * x.data.dtype.type(slope))

    def _backward(g):
        return (np.where(positive, g, g * slope),)

    return DiffTensor._from_op(out, (x,), _backward, "leaky_relu")


def pointwise(op: str, x: DiffTensor, y: Optional[DiffTensor] = None, value: float = 0.2) -> DiffTensor:
    """Dispatch by name: leaky_relu, add, sub, mul, div, scale, neg, square, sqrt."""
    unary = {"neg": neg, "square": square, "sqrt": sqrt}
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    if op in unary:
        return unary[op](x)
    if op in binary:
        if y is None:
            raise ShapeError(f"{op} needs two operands")
        return binary[op](x, y)
    if op == "leaky_relu":
        return leaky_relu(x, value)
    if op == "scale":
        return scale(x, value)
    raise ValueError(f"unknown pointwise op {op!r}")


def astype(x: DiffTensor, dtype) -> DiffTensor:
    """Precision change; gradients flow back in the source dtype."""
    src = x.data.dtype
    if np.dtype(dtype) == src:
        return x
    return DiffTensor._from_op(x.data.astype(dtype), (x,), lambda g: (g.astype(src),), "astype")


def scale_channels(x: DiffTensor, factors: Sequence[float]) -> DiffTensor:
    """Multiply channel c by factors[c]."""
    if len(factors) != x.shape[1]:
        raise ShapeError(f"scale_channels: {len(factors)} factors for {x.shape[1]} channels")
    f = np.asarray(factors, dtype=x.data.dtype).reshape(1, -1, 1, 1, 1)
    return DiffTensor._from_op(x.data * f, (x,), lambda g: (g * f,), "scale_channels")


# =============================================================================
# Reductions
# =============================================================================

def reduce_sum(x: DiffTensor) -> DiffTensor:
    total = np.sum(x.data, dtype=np.float64)
    out = np.full((1, 1, 1, 1, 1), total, dtype=x.data.dtype)
    return DiffTensor._from_op(out, (x,), lambda g: (np.full(x.shape, g.reshape(-1)[0], dtype=x.data.dtype),), "sum")


def reduce_mean(x: DiffTensor) -> DiffTensor:
    n = x.data.size
    total = np.sum(x.data, dtype=np.float64)
    out = np.full((1, 1, 1, 1, 1), total / n, dtype=x.data.dtype)
    return DiffTensor._from_op(out, (x,), lambda g: (np.full(x.shape, g.reshape(-1)[0] / n, dtype=x.data.dtype),), "mean")


def reduce(x: DiffTensor, op: str = "sum") -> DiffTensor:
    if op == "sum":
        return reduce_sum(x)
    if op == "mean":
        return reduce_mean(x)
    raise ValueError(f"unknown reduction {op!r}")


# =============================================================================
# Structural Operations
# =============================================================================

def concat(tensors: Sequence[DiffTensor]) -> DiffTensor:
    """Concatenate along the channel axis."""
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def _backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return DiffTensor._from_op(out, tensors, _backward, "concat")


def pad3d(x: DiffTensor, pads: Sequence[Tuple[int, int]]) -> DiffTensor:
    """Zero padding of the three spatial axes by (before, after) pairs."""
    widths = [(0, 0), (0, 0)] + [tuple(p) for p in pads]
    out = np.pad(x.data, widths)
    crop = tuple(slice(b, out.shape[i] - a) for i, (b, a) in enumerate(widths))
    return DiffTensor._from_op(out, (x,), lambda g: (g[crop],), "pad3d")


def crop3d(x: DiffTensor, pads: Sequence[Tuple[int, int]]) -> DiffTensor:
    """Inverse of pad3d."""
    widths = [(0, 0), (0, 0)] + [tuple(p) for p in pads]
    crop = tuple(slice(b, x.shape[i] - a) for i, (b, a) in enumerate(widths))
    return DiffTensor._from_op(x.data[crop], (x,), lambda g: (np.pad(g, widths),), "crop3d")


def diff(x: DiffTensor, axis: int) -> DiffTensor:
    """Forward difference x[i+1] - x[i] along a spatial axis (2, 3 or 4)."""
    if axis not in (2, 3, 4):
        raise ShapeError(f"diff axis must be spatial, got {axis}")
    hi = _axis_slice(5, axis, 1, None)
    lo = _axis_slice(5, axis, None, -1)
    out = x.data[hi] - x.data[lo]

    def _backward(g):
        gx = np.zeros_like(x.data)
        gx[hi] += g
        gx[lo] -= g
        return (gx,)

    return DiffTensor._from_op(out, (x,), _backward, "diff")


# =============================================================================
# Convolution
# =============================================================================

# bytes of one unfolded (im2col) block; conv3d processes output depth rows in blocks under this size
IM2COL_BLOCK_BYTES = 64 * 1024 * 1024


def _depth_blocks(n: int, out_dims: Tuple[int, int, int], row_width: int, itemsize: int) -> List[Tuple[int, int]]:
    per_row = max(n * out_dims[1] * out_dims[2] * row_width * itemsize, 1)
    rows = max(1, IM2COL_BLOCK_BYTES // per_row)
    return [(d0, min(d0 + rows, out_dims[0])) for d0 in range(0, out_dims[0], rows)]


def conv3d(x: DiffTensor, kernel: DiffTensor, bias: Optional[DiffTensor] = None,
           stride: int = 1, padding: int = 0) -> DiffTensor:
    """
    Zero-padded 3D cross-correlation; kernel shape (C_out, C_in, k, k, k).

    Runs as im2col + one GEMM per block of output depth rows, in the operand
    dtype. The backward pass rebuilds the columns for the kernel gradient and
    scatters the column gradient back with one strided add per kernel tap.
    """
    c_out, c_in, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if kernel.shape[2:] != (k, k, k):
        raise ShapeError(f"conv3d: kernel must be cubic, got {kernel.shape}")
    if k % 2 == 0:
        raise ShapeError(f"conv3d: kernel size must be odd, got {k}")
    if x.shape[1] != c_in:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, kernel expects {c_in}")
    if bias is not None and bias.shape != (1, c_out, 1, 1, 1):
        raise ShapeError(f"conv3d: bias must have shape (1, {c_out}, 1, 1, 1), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv3d: stride must be >= 1 and padding >= 0")

    n = x.shape[0]
    dtype = _out_dtype(x, kernel)
    out_dims = tuple((s + 2 * padding - k) // stride + 1 for s in x.spatial)
    if any(s < 1 for s in out_dims):
        raise ShapeError(f"conv3d: output would be empty for input {x.spatial}")

    # channels-last padded input; windows has shape (N, D', H', W', C_in, k, k, k)
    pads = ((0, 0),) + ((padding, padding),) * 3 + ((0, 0),)
    xp = np.pad(np.moveaxis(x.data, 1, -1).astype(dtype, copy=False), pads)
    windows = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    row_width = c_in * k ** 3
    kmat = kernel.data.reshape(c_out, row_width).astype(dtype, copy=False)
    blocks = _depth_blocks(n, out_dims, row_width, np.dtype(dtype).itemsize)

    def columns(d0, d1):
        return windows[:, d0:d1].reshape(-1, row_width)

    out = np.empty((n,) + out_dims + (c_out,), dtype=dtype)
    for d0, d1 in blocks:
        out[:, d0:d1] = (columns(d0, d1) @ kmat.T).reshape((n, d1 - d0) + out_dims[1:] + (c_out,))
    if bias is not None:
        out += bias.data.reshape(c_out).astype(dtype)
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))

    def _backward(g):
        g_last = np.ascontiguousarray(np.moveaxis(g, 1, -1), dtype=dtype)
        gx = gk = gb = None
        gxp = np.zeros(xp.shape, dtype=dtype) if x.requires_grad else None
        gk_mat = np.zeros_like(kmat) if kernel.requires_grad else None
        for d0, d1 in blocks:
            g_rows = g_last[:, d0:d1].reshape(-1, c_out)
            if gk_mat is not None:
                gk_mat += g_rows.T @ columns(d0, d1)
            if gxp is not None:
                gcols = (g_rows @ kmat).reshape((n, d1 - d0) + out_dims[1:] + (c_in, k, k, k))
                for a, b, c in product(range(k), repeat=3):
                    gxp[:, d0 * stride + a:(d1 - 1) * stride + a + 1:stride,
                        b:b + stride * (out_dims[1] - 1) + 1:stride,
                        c:c + stride * (out_dims[2] - 1) + 1:stride] += gcols[..., a, b, c]
        if gxp is not None:
            inner = tuple(slice(padding, padding + size) for size in x.spatial)
            gx = np.moveaxis(gxp[(slice(None),) + inner], -1, 1)
        if gk_mat is not None:
            gk = gk_mat.reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = np.sum(g, axis=(0, 2, 3, 4), dtype=np.float64).reshape(1, c_out, 1, 1, 1)
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return DiffTensor._from_op(out, parents, _backward, "conv3d")


# =============================================================================
# Resampling
# =============================================================================

def interp_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Linear interpolation weights (size_out x size_in), half-pixel centers."""
    matrix = np.zeros((size_out, size_in), dtype=np.float64)
    if size_in == size_out:
        np.fill_diagonal(matrix, 1.0)
        return matrix
    src = (np.arange(size_out) + 0.5) * (size_in / size_out) - 0.5
    src = np.clip(src, 0.0, size_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, size_in - 1)
    frac = src - lo
    rows = np.arange(size_out)
    np.add.at(matrix, (rows, lo), 1.0 - frac)
    np.add.at(matrix, (rows, hi), frac)
    return matrix


def _apply_axis(data: np.ndarray, matrix: np.ndarray, axis: int) -> np.ndarray:
    moved = np.tensordot(matrix, data, axes=([1], [axis]))
    return np.moveaxis(moved, 0, axis)


def resize_dims(dims: Sequence[int], factor: float) -> Tuple[int, int, int]:
    return tuple(int(np.ceil(s * factor - 1e-9)) for s in dims)


def trilinear_resize(x: DiffTensor, factor: Optional[float] = None,
                     size: Optional[Sequence[int]] = None) -> DiffTensor:
    """Align-corners-false trilinear resampling to `size` or ceil(dims * factor)."""
    if size is None:
        if factor is None:
            raise ValueError("trilinear_resize needs a factor or a target size")
        size = resize_dims(x.spatial, factor)
    size = tuple(int(s) for s in size)
    if any(s < 1 for s in size):
        raise ShapeError(f"trilinear_resize: zero-size output {size}")
    if size == x.spatial:
        return x
    matrices = [interp_matrix(s_in, s_out) for s_in, s_out in zip(x.spatial, size)]
    out = x.data.astype(np.float64)
    for axis, m in zip((2, 3, 4), matrices):
        if m.shape[0] != m.shape[1]:
            out = _apply_axis(out, m, axis)
    out = out.astype(x.data.dtype)

    def _backward(g):
        gx = g.astype(np.float64)
        for axis, m in zip((2, 3, 4), matrices):
            if m.shape[0] != m.shape[1]:
                gx = _apply_axis(gx, m.T, axis)
        return (gx,)

    return DiffTensor._from_op(out, (x,), _backward, "trilinear_resize")


def _fold_edge(g: np.ndarray, size: int, axis: int) -> np.ndarray:
    """Adjoint of edge replication: add the replicated tail back onto the last slice."""
    if g.shape[axis] == size:
        return g
    head = g[_axis_slice(g.ndim, axis, None, size)].copy()
    tail = g[_axis_slice(g.ndim, axis, size, None)].sum(axis=axis, keepdims=True)
    head[_axis_slice(g.ndim, axis, size - 1, size)] += tail
    return head


def avg_pool3d(x: DiffTensor, factor: int) -> DiffTensor:
    """Block average by `factor`; dims not divisible are edge-padded first."""
    factor = int(factor)
    if factor < 1:
        raise ShapeError(f"avg_pool3d: factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    n, c = x.shape[:2]
    padded = tuple(int(np.ceil(s / factor)) * factor for s in x.spatial)
    widths = [(0, 0), (0, 0)] + [(0, p - s) for p, s in zip(padded, x.spatial)]
    xp = np.pad(x.data, widths, mode="edge")
    out_dims = tuple(p // factor for p in padded)
    blocks = xp.reshape(n, c, out_dims[0], factor, out_dims[1], factor, out_dims[2], factor)
    out = blocks.mean(axis=(3, 5, 7), dtype=np.float64).astype(x.data.dtype)

    def _backward(g):
        spread = g.astype(np.float64) / factor ** 3
        for axis in (2, 3, 4):
            spread = np.repeat(spread, factor, axis=axis)
        for axis, size in zip((2, 3, 4), x.spatial):
            spread = _fold_edge(spread, size, axis)
        return (spread,)

    return DiffTensor._from_op(out, (x,), _backward, "avg_pool3d")


# =============================================================================
# Gaussian Filtering
# =============================================================================

def gaussian_kernel1d(window: int, sigma: Optional[float] = None) -> np.ndarray:
    """Truncated, renormalized Gaussian of odd length `window` (sigma = window / 4)."""
    if window < 1 or window % 2 == 0:
        raise ShapeError(f"Gaussian window must be a positive odd integer, got {window}")
    sigma = window / 4.0 if sigma is None else float(sigma)
    radius = (window - 1) // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _correlate_edge(data: np.ndarray, weights: np.ndarray, axis: int) -> np.ndarray:
    radius = (len(weights) - 1) // 2
    n = data.shape[axis]
    widths = [(0, 0)] * data.ndim
    widths[axis] = (radius, radius)
    padded = np.pad(data, widths, mode="edge")
    out = np.zeros(data.shape, dtype=np.float64)
    for k, w in enumerate(weights):
        out += w * padded[_axis_slice(data.ndim, axis, k, k + n)]
    return out


def _correlate_edge_adjoint(g: np.ndarray, weights: np.ndarray, axis: int) -> np.ndarray:
    radius = (len(weights) - 1) // 2
    n = g.shape[axis]
    shape = list(g.shape)
    shape[axis] = n + 2 * radius
    padded = np.zeros(shape, dtype=np.float64)
    for k, w in enumerate(weights):
        padded[_axis_slice(g.ndim, axis, k, k + n)] += w * g
    out = padded[_axis_slice(g.ndim, axis, radius, radius + n)].copy()
    out[_axis_slice(g.ndim, axis, 0, 1)] += padded[_axis_slice(g.ndim, axis, 0, radius)].sum(axis=axis, keepdims=True)
    out[_axis_slice(g.ndim, axis, n - 1, n)] += padded[_axis_slice(g.ndim, axis, radius + n, None)].sum(axis=axis, keepdims=True)
    return out


def gaussian_blur(x: DiffTensor, window: int, sigma: Optional[float] = None) -> DiffTensor:
    """Separable Gaussian smoothing of the spatial axes with edge-replicated borders."""
    weights = gaussian_kernel1d(window, sigma)
    out = x.data.astype(np.float64)
    for axis in (2, 3, 4):
        out = _correlate_edge(out, weights, axis)
    out = out.astype(x.data.dtype)

    def _backward(g):
        gx = g.astype(np.float64)
        for axis in (4, 3, 2):
            gx = _correlate_edge_adjoint(gx, weights, axis)
        return (gx,)

    return DiffTensor._from_op(out, (x,), _backward, "gaussian_blur")


# =============================================================================
# Normalization
# =============================================================================

def instance_norm(x: DiffTensor, eps: float = 1e-5) -> DiffTensor:
    """Per-(sample, channel) standardization over the spatial axes."""
    data = x.data.astype(np.float64)
    mean = data.mean(axis=(2, 3, 4), keepdims=True)
    centered = data - mean
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=(2, 3, 4), keepdims=True) + eps)
    y = centered * inv

    def _backward(g):
        g = g.astype(np.float64)
        g_mean = g.mean(axis=(2, 3, 4), keepdims=True)
        gy_mean = (g * y).mean(axis=(2, 3, 4), keepdims=True)
        return (inv * (g - g_mean - y * gy_mean),)

    return DiffTensor._from_op(y.astype(x.data.dtype), (x,), _backward, "instance_norm")


# =============================================================================
# Differentiable Warping
# =============================================================================

def _axis_weights(p: np.ndarray, size: int):
    """Clamp sample positions to [0, size-1]; return lower index, upper index, fraction, in-range mask."""
    inside = (p >= 0.0) & (p <= size - 1)
    pc = np.clip(p, 0.0, size - 1)
    lo = np.clip(np.floor(pc), 0, max(size - 2, 0)).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    frac = pc - lo
    return lo, hi, frac, inside


def sample_trilinear(volume: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Border-clamped trilinear sampling of a (C, D, H, W) array at (3, ...) voxel coordinates."""
    dims = volume.shape[1:]
    flat = volume.reshape(volume.shape[0], -1).astype(np.float64)
    (d0, d1, fd, _), (h0, h1, fh, _), (w0, w1, fw, _) = [
        _axis_weights(coords[a].astype(np.float64), dims[a]) for a in range(3)
    ]
    out = np.zeros((volume.shape[0],) + coords.shape[1:], dtype=np.float64)
    for di, wd in ((d0, 1.0 - fd), (d1, fd)):
        for hi_, wh in ((h0, 1.0 - fh), (h1, fh)):
            for wi, ww in ((w0, 1.0 - fw), (w1, fw)):
                idx = (di * dims[1] + hi_) * dims[2] + wi
                out += flat[:, idx] * (wd * wh * ww)
    return out


def identity_grid(dims: Sequence[int]) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in dims], indexing="ij"))


def warp(v: DiffTensor, u: DiffTensor) -> DiffTensor:
    """Backward warping out(x) = v(x + u(x)), border-clamped trilinear; differentiable in v and u."""
    if u.shape[1] != 3 or v.shape[0] != u.shape[0] or v.spatial != u.spatial:
        raise ShapeError(f"warp: volume {v.shape} and field {u.shape} do not match")
    n, c = v.shape[:2]
    dims = v.spatial
    nvox = int(np.prod(dims))
    grid = identity_grid(dims)
    dtype = _out_dtype(v, u)

    out = np.zeros(v.shape, dtype=np.float64)
    cache = []
    for b in range(n):
        coords = grid + u.data[b].astype(np.float64)
        axes = [_axis_weights(coords[a], dims[a]) for a in range(3)]
        flat = v.data[b].reshape(c, -1).astype(np.float64)
        corners = []
        for id_, wd, dd in ((axes[0][0], 1.0 - axes[0][2], -1.0), (axes[0][1], axes[0][2], 1.0)):
            for ih, wh, dh in ((axes[1][0], 1.0 - axes[1][2], -1.0), (axes[1][1], axes[1][2], 1.0)):
                for iw, ww, dw in ((axes[2][0], 1.0 - axes[2][2], -1.0), (axes[2][1], axes[2][2], 1.0)):
                    idx = ((id_ * dims[1] + ih) * dims[2] + iw).reshape(-1)
                    corners.append((idx, wd, wh, ww, dd, dh, dw))
                    out[b] += (flat[:, idx] * (wd * wh * ww).reshape(-1)).reshape((c,) + dims)
        cache.append((axes, corners))
    out = out.astype(dtype)

    def _backward(g):
        gv = np.zeros(v.shape, dtype=np.float64) if v.requires_grad else None
        gu = np.zeros(u.shape, dtype=np.float64) if u.requires_grad else None
        for b in range(n):
            axes, corners = cache[b]
            gb = g[b].reshape(c, -1).astype(np.float64)
            if gv is not None:
                # a single scatter over all 8 corners and every channel
                keys = np.concatenate([idx for idx, *_ in corners])
                keys = (keys[None, :] + nvox * np.arange(c)[:, None]).reshape(-1)
                weights = np.concatenate([(wd * wh * ww).reshape(-1) for _, wd, wh, ww, *_ in corners])
                values = (np.tile(gb, (1, len(corners))) * weights).reshape(-1)
                gv[b] = np.bincount(keys, weights=values, minlength=c * nvox).reshape((c,) + dims)
            if gu is not None:
                flat = v.data[b].reshape(c, -1).astype(np.float64)
                for idx, wd, wh, ww, dd, dh, dw in corners:
                    # d(weight)/dp per axis; sum over channels of g * v(corner)
                    gval = np.einsum("ij,ij->j", gb, flat[:, idx]).reshape(dims)
                    gu[b, 0] += gval * dd * wh * ww
                    gu[b, 1] += gval * wd * dh * ww
                    gu[b, 2] += gval * wd * wh * dw
                for a in range(3):
                    gu[b, a] *= axes[a][3]
        return gv, gu

    return DiffTensor._from_op(out, (v, u), _backward, "warp")


# =============================================================================
# Adam with Linear Warmup
# =============================================================================

@dataclass
class AdamState:
    """Per-parameter first/second moments and the shared step counter."""
    beta1: float = ADAM_DEFAULTS["beta1"]
    beta2: float = ADAM_DEFAULTS["beta2"]
    eps: float = ADAM_DEFAULTS["eps"]
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def warmup_lr(base_lr: float, t: int, warmup_steps: int) -> float:
    """Effective learning rate base_lr * min(1, t / warmup_steps), t counted from 1."""
    if warmup_steps <= 0:
        return float(base_lr)
    return float(base_lr) * min(1.0, t / warmup_steps)


def adam_step(params: Sequence[DiffTensor], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              base_lr: float, warmup_steps: int) -> Tuple[Sequence[DiffTensor], AdamState]:
    """One in-place Adam update of `params`; returns (params, state)."""
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} gradients")
    grads = [np.zeros_like(p.data, dtype=np.float64) if g is None else np.asarray(g, dtype=np.float64)
             for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"adam_step: non-finite gradient for parameter {p.name or '?'}")
    if not state.m:
        state.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        state.v = [np.zeros(p.shape, dtype=np.float64) for p in params]
    elif len(state.m) != len(params):
        raise ShapeError("adam_step: optimizer state does not match parameter list")

    state.t += 1
    lr = warmup_lr(base_lr, state.t, warmup_steps)
    bias1 = 1.0 - state.beta1 ** state.t
    bias2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)
    return params, state


# =============================================================================
# Parameter Checkpoints
# =============================================================================

def save_parameters(params: Dict[str, DiffTensor], path: Path, config: Optional[dict] = None,
                    tags: Optional[dict] = None) -> Path:
    """Write <path> (raw LE float32 concatenation) and <path>.json (manifest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, tensor in params.items():
        raw = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "parameters": entries,
        "config": config or {},
        "config_hash": config_hash(config or {}),
        "tags": tags or {},
    }
    with open(path, "wb") as f:
        f.write(b"".join(chunks))
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Saved {len(entries)} parameters ({offset} bytes) to {path}")
    return path


def load_parameters(path: Path) -> Tuple[Dict[str, np.ndarray], dict]:
    """Read a checkpoint written by save_parameters; returns (arrays by name, manifest)."""
    path = Path(path)
    manifest_path = Path(str(path) + ".json")
    if not manifest_path.exists():
        raise VolumeFormatError(f"missing checkpoint manifest {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        payload = path.read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise VolumeFormatError(f"cannot read checkpoint {path}: {e}") from e
    arrays = {}
    for entry in manifest.get("parameters", []):
        count = int(np.prod(entry["shape"]))
        start, stop = entry["offset"], entry["offset"] + 4 * count
        if stop > len(payload):
            raise VolumeFormatError(f"checkpoint payload too short for parameter {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(payload[start:stop], dtype="<f4").reshape(entry["shape"]).astype(np.float32)
    if manifest.get("config_hash") != config_hash(manifest.get("config", {})):
        raise VolumeFormatError(f"checkpoint {path} config hash does not match its config")
    return arrays, manifest
