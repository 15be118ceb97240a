"""Dense tensors with a small reverse-mode differentiation engine.

Only the operations the detector needs are provided. Every op takes and returns
:class:`Tensor` objects; the NumPy work happens on ``Tensor.data``. Backward rules
are closures stored on the output tensor, and :func:`backward` replays them over a
:class:`ComputationTape` built from the loss.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError, UsageError

TRAIN_DTYPE = np.float32
VERIFY_DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A NumPy array plus the bookkeeping needed for reverse-mode autodiff.

    Args:
        data: array-like payload. Floating dtypes are kept; anything else is cast
            to ``dtype`` (float32 by default).
        requires_grad: whether gradients should be accumulated into ``grad``.
        dtype: optional dtype override.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(TRAIN_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return elementwise_add(self, _wrap(other, self.dtype))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __sub__(self, other):
        return elementwise_add(self, scalar_mul(_wrap(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return elementwise_mul(self, _wrap(other, self.dtype))

    __radd__ = __add__
    __rmul__ = __mul__


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class ComputationTape:
    """Operations reachable from an output, in topological order.

    ``nodes[k]`` never depends on ``nodes[m]`` for ``m > k``; backward replays the
    list in reverse so each recorded op runs exactly once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS; recursion would overflow on long chains
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Optional[ComputationTape] = None) -> None:
    """Populate ``grad`` on every tensor that requires it and feeds into ``loss``.

    Gradients accumulate additively, both across fan-out within one graph and
    across repeated calls (call ``zero_grad`` between steps).
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward called on a tensor that does not require grad")
    if tape is None:
        tape = ComputationTape.record(loss)

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(id(parent))
            pending[id(parent)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# elementwise ops


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    """Sum of ``a`` and ``b``; ``b`` may have a singleton channel (or any) dim."""
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ConfigError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    if out_shape != a.shape:
        raise ConfigError(f"cannot add shapes {a.shape} and {b.shape}: result must keep a's shape")

    def bw(g):
        return g, _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Product of ``a`` and ``b`` with the same broadcasting rule as :func:`elementwise_add`."""
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ConfigError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    if out_shape != a.shape:
        raise ConfigError(f"cannot multiply shapes {a.shape} and {b.shape}: result must keep a's shape")

    def bw(g):
        ga = g * b.data if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def scalar_mul(a: Tensor, s: float) -> Tensor:
    if not np.isfinite(s):
        raise NumericError(f"scalar_mul factor must be finite, got {s}")
    factor = a.data.dtype.type(s)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "scalar_mul")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ConfigError(f"leaky_relu slope must be in [0, 1), got {slope}")
    pos = x.data > 0
    slope_t = x.data.dtype.type(slope)
    out = np.where(pos, x.data, x.data * slope_t)
    return _make(out, (x,), lambda g: (np.where(pos, g, g * slope_t),), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def channel_mean(a: Tensor) -> Tensor:
    """Per-cell mean over the channel axis: (B, C, H, W) -> (B, 1, H, W)."""
    if a.ndim != 4 or a.shape[1] < 1:
        raise ConfigError(f"channel_mean expects (B, C>=1, H, W), got {a.shape}")
    d = a.shape[1]
    out = a.data.mean(axis=1, keepdims=True)
    inv_d = a.data.dtype.type(1.0 / d)
    return _make(out, (a,), lambda g: (np.broadcast_to(g * inv_d, a.shape).copy(),), "channel_mean")


def broadcast_channels(x: Tensor, channels: int) -> Tensor:
    """Repeat a (B, 1, H, W) tensor along the channel axis."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise ConfigError(f"broadcast_channels expects (B, 1, H, W), got {x.shape}")
    shape = (x.shape[0], channels) + x.shape[2:]
    out = np.broadcast_to(x.data, shape).copy()
    return _make(out, (x,), lambda g: (g.sum(axis=1, keepdims=True),), "broadcast_channels")


# ---------------------------------------------------------------------------
# convolution and pooling


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) via im2col + GEMM.

    Shapes: ``x`` (N, C, H, W), ``weight`` (O, C, kh, kw), ``bias`` (O,).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ConfigError(f"conv2d: weight expects {wc} input channels, input has {c}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: bad stride={stride} / padding={padding}")
    if bias is not None and bias.shape != (o,):
        raise ConfigError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d: output would be {ho}x{wo} for input {h}x{w}, kernel {kh}x{kw}")

    # channel-major im2col: cols[(c, i, j), (n, r, q)] = xpad[n, c, i + stride*r, j + stride*q]
    xt = x.data.transpose(1, 0, 2, 3)
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gmat @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=1)
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            gxt = np.zeros(xt.shape, dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            if padding:
                gxt = gxt[:, :, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(gxt.transpose(1, 0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def max_pool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    """Windowed maximum. Gradient goes to the first max in row-major order."""
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ConfigError(f"max_pool2d expects rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    if k < 1 or stride < 1 or h < k or w < k:
        raise ConfigError(f"max_pool2d: window {k} (stride {stride}) does not fit input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    windows = windows[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    flat = windows.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)  # argmax returns the first occurrence
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, k)
        rows = np.arange(ho)[:, None] * stride + di
        cols = np.arange(wo)[None, :] * stride + dj
        nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(gx, (nn[:, :, None, None], cc[:, :, None, None], rows, cols), g)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), bw, "max_pool2d")
