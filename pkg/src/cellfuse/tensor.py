"""Minimal reverse-mode autodiff over dense rank-4 (n, c, h, w) tensors.

Provides exactly the operations the fusion decoder, the prediction heads
and the training losses need: conv2d (1x1 and 3x3 kernels), relu, channel
concatenation, nearest/bilinear upsampling, channel softmax, sigmoid, and
a handful of scalar-combining ops. Compute is float32 by default; building
a graph from float64 leaves keeps every op in float64, which is the
reference path used by the finite-difference checks.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "UsageError",
    "Tensor4",
    "OpNode",
    "from_op",
    "conv2d",
    "relu",
    "concat_channels",
    "upsample",
    "softmax_channels",
    "sigmoid",
    "add",
    "scale",
    "sum_all",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class UsageError(RuntimeError):
    """An op was invoked outside its contract (e.g. backward on a non-scalar)."""


class OpNode:
    """Backward-graph node: op kind, input handles, saved-for-backward closure.

    ``backward_fn(grad_out) -> list[ndarray | None]`` returns one gradient per
    input, aligned with ``inputs``.
    """

    __slots__ = ("kind", "inputs", "backward_fn")

    def __init__(self, kind: str, inputs: tuple["Tensor4", ...], backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor4:
    """Dense (n, c, h, w) array of 32-bit reals with optional grad tracking.

    Immutable after creation as far as the graph is concerned; ``grad`` is
    the only mutated field and only by :func:`backward` / ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 needs a rank-4 array, got rank {arr.ndim}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: OpNode | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor4":
        return Tensor4(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor4(shape={self.shape}, dtype={self.data.dtype}{flag})"


def from_op(data: np.ndarray, inputs, kind: str, backward_fn) -> Tensor4:
    """Wrap an op result, attaching a graph node when any input tracks grads.

    This is the extension point the loss functions use to register their own
    differentiable nodes.
    """
    out = Tensor4(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = OpNode(kind, tuple(inputs), backward_fn)
    return out


# ---------------------------------------------------------------------------
# convolution

def _im2col(xp: np.ndarray, k: int, stride: int):
    """(n, c, Hp, Wp) padded input -> (n, c*k*k, ho*wo) patch matrix.

    Column ordering is (c, kh, kw) row-major, matching weight.reshape(c_out, -1).
    """
    n, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]          # (n, c, ho, wo, k, k)
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x: Tensor4, weight: Tensor4, bias, stride: int = 1, padding: int = 0,
           _allow_any_kernel: bool = False) -> Tensor4:
    """2-D convolution with square kernel k in {1, 3}.

    ``weight`` is (c_out, c_in, k, k); ``bias`` a length-c_out vector.
    Output spatial dims are floor((h + 2*padding - k)/stride) + 1.
    """
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or (not _allow_any_kernel and k not in (1, 3)):
        raise ShapeError(f"conv2d kernel must be square and in {{1, 3}}, got {k}x{k2}")
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {c_in}")
    if stride < 1 or padding < 0:
        raise UsageError(f"conv2d stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if isinstance(bias, Tensor4):
        bias_t = bias  # keep the caller's handle so grads land on it
    else:
        bias_t = Tensor4(np.asarray(bias, dtype=x.dtype).reshape(1, -1, 1, 1))
    b = bias_t.data.reshape(-1)
    if b.shape[0] != c_out:
        raise ShapeError(f"conv2d bias length {b.shape[0]} != c_out {c_out}")

    n = x.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col(xp, k, stride)
    w2 = weight.data.reshape(c_out, c_in * k * k)
    out = np.matmul(w2, cols) + b[:, None]
    out = out.reshape(n, c_out, ho, wo)

    def backward_fn(g):
        g2 = g.reshape(n, c_out, ho * wo)
        grad_x = grad_w = grad_b = None
        if weight.requires_grad:
            grad_w = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            grad_w = grad_w.reshape(weight.shape)
        if bias_t.requires_grad:
            grad_b = g2.sum(axis=(0, 2)).reshape(bias_t.shape)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)                         # (n, c*k*k, ho*wo)
            gcols = gcols.reshape(n, c_in, k, k, ho, wo)
            gpad = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
            grad_x = gpad[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]]
        return [grad_x, grad_w, grad_b]

    return from_op(out, (x, weight, bias_t), "conv2d", backward_fn)


# ---------------------------------------------------------------------------
# pointwise and shape ops

def relu(x: Tensor4) -> Tensor4:
    out = np.maximum(x.data, 0)
    mask = x.data > 0

    def backward_fn(g):
        return [g * mask if x.requires_grad else None]

    return from_op(out, (x,), "relu", backward_fn)


def sigmoid(x: Tensor4) -> Tensor4:
    # overflow-safe split by sign
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward_fn(g):
        return [g * s * (1.0 - s) if x.requires_grad else None]

    return from_op(s, (x,), "sigmoid", backward_fn)


def softmax_channels(x: Tensor4) -> Tensor4:
    """Softmax along the channel axis; per-pixel channel sums are 1."""
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        if not x.requires_grad:
            return [None]
        dot = (g * p).sum(axis=1, keepdims=True)
        return [p * (g - dot)]

    return from_op(p, (x,), "softmax_channels", backward_fn)


def concat_channels(a: Tensor4, b: Tensor4) -> Tensor4:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels needs matching (n, h, w): {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    ca = a.shape[1]

    def backward_fn(g):
        ga = g[:, :ca] if a.requires_grad else None
        gb = g[:, ca:] if b.requires_grad else None
        return [ga, gb]

    return from_op(out, (a, b), "concat_channels", backward_fn)


def _bilinear_matrix(size_in: int, factor: int, dtype) -> np.ndarray:
    """Dense (size_in*factor, size_in) interpolation matrix, half-pixel centers."""
    size_out = size_in * factor
    src = (np.arange(size_out, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, size_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, size_in - 1)
    frac = src - i0
    m = np.zeros((size_out, size_in), dtype=np.float64)
    m[np.arange(size_out), i0] += 1.0 - frac
    m[np.arange(size_out), i1] += frac
    return m.astype(dtype)


def upsample(x: Tensor4, factor: int, mode: str = "nearest") -> Tensor4:
    """Spatially scale h and w by an integer factor >= 1.

    Bilinear uses the align_corners=false convention (half-pixel centers).
    """
    if factor < 1:
        raise UsageError(f"upsample factor must be >= 1, got {factor}")
    if mode not in ("nearest", "bilinear"):
        raise UsageError(f"unknown upsample mode {mode!r}")
    if factor == 1:
        def backward_id(g):
            return [g if x.requires_grad else None]
        return from_op(x.data.copy(), (x,), "upsample", backward_id)

    n, c, h, w = x.shape
    if mode == "nearest":
        out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

        def backward_fn(g):
            if not x.requires_grad:
                return [None]
            return [g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))]

        return from_op(out, (x,), "upsample", backward_fn)

    rows = _bilinear_matrix(h, factor, x.dtype)
    cols = _bilinear_matrix(w, factor, x.dtype)
    out = np.matmul(np.matmul(rows, x.data), cols.T)

    def backward_fn(g):
        if not x.requires_grad:
            return [None]
        return [np.matmul(np.matmul(rows.T, g), cols)]

    return from_op(out, (x,), "upsample", backward_fn)


# ---------------------------------------------------------------------------
# combining ops (scalars and same-shape tensors)

def add(a: Tensor4, b: Tensor4) -> Tensor4:
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward_fn(g):
        return [g if a.requires_grad else None, g if b.requires_grad else None]

    return from_op(out, (a, b), "add", backward_fn)


def scale(x: Tensor4, k: float) -> Tensor4:
    k = float(k)
    out = x.data * k

    def backward_fn(g):
        return [g * k if x.requires_grad else None]

    return from_op(out, (x,), "scale", backward_fn)


def sum_all(x: Tensor4) -> Tensor4:
    """Sum every element to a (1, 1, 1, 1) scalar node."""
    out = np.array(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)

    def backward_fn(g):
        if not x.requires_grad:
            return [None]
        return [np.full(x.shape, g.reshape(()), dtype=x.dtype)]

    return from_op(out, (x,), "sum_all", backward_fn)


# ---------------------------------------------------------------------------
# reverse pass

def _topo_order(root: Tensor4) -> list[Tensor4]:
    """Iterative postorder over the graph; each tensor appears exactly once."""
    order: list[Tensor4] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor4, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor4) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf's ``.grad``.

    ``loss`` must be scalar (one element). Repeated calls without zero_grad
    accumulate. Each graph node's backward runs exactly once, in reverse
    topological order.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward on a tensor that does not require grad")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
            continue
        parent_grads = t.node.backward_fn(g)
        for parent, pg in zip(t.node.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
