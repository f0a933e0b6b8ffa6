"""Dense tensors over numpy with a tape-based reverse mode.

Every op takes and returns :class:`Tensor`.  When at least one input requires
a gradient (and recording is enabled) the op appends a node to the calling
thread's current :class:`Tape`; :func:`backward` replays that tape in reverse
and accumulates into :attr:`Parameter.grad`.

Feature maps are laid out ``(C, D, H, W)`` row-major throughout.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, UsageError

__all__ = [
    "Tensor", "Parameter", "Tape", "current_tape", "no_grad", "using_tape",
    "activation_patterns",
    "tensor", "matmul", "transpose", "reshape", "add", "sub", "mul", "scale",
    "add_scalar", "sum", "mean", "relu", "sigmoid", "softmax",
    "global_avg_pool3d", "split", "concat", "channel_scale", "channel_bias",
    "conv1x1x1", "conv3d", "max_pool3d", "upsample2", "downsample2",
    "bce", "masked_l1", "backward", "finite_diff_grad", "relative_error",
]


class Tensor:
    """Immutable n-d array, optionally tracked by the tape."""

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if any(n < 1 for n in arr.shape):
            raise DimensionError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _not_scalar(t):
    raise UsageError(f"expected a scalar tensor, got shape {t.shape}")


class Parameter(Tensor):
    """A learnable leaf.  ``data`` is updated in place by optimizers."""

    __slots__ = ("grad", "name")

    def __init__(self, data, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype, copy=True)
        super().__init__(arr, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def tensor(data, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype))


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of executed differentiable ops."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.last_visit_order: list[int] = []

    def record(self, out, inputs, vjp) -> None:
        self.nodes.append((out, inputs, vjp))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _recording() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    prev = _recording()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


@contextmanager
def activation_patterns():
    """Collect ReLU masks and max-pool argmaxes of every op run inside.

    Two evaluations with equal patterns lie on the same smooth piece of the
    network, which is what a finite-difference comparison needs.
    """
    prev = getattr(_local, "patterns", None)
    log: list[np.ndarray] = []
    _local.patterns = log
    try:
        yield log
    finally:
        _local.patterns = prev


def _log_pattern(arr) -> None:
    log = getattr(_local, "patterns", None)
    if log is not None:
        log.append(arr)


@contextmanager
def using_tape(tape: Tape):
    prev = getattr(_local, "tape", None)
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = prev


def _result(data, inputs, vjp) -> Tensor:
    track = _recording() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        current_tape().record(out, tuple(inputs), vjp)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _need_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected a C x D x H x W tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# basic algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _result(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected 2 axes, got {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + float(c), (a,), lambda g: (g,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _result(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _result(a.data.mean(), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),))


# ---------------------------------------------------------------------------
# pointwise


def relu(x: Tensor) -> Tensor:
    X = x.data
    _log_pattern(X > 0)
    return _result(np.maximum(X, 0), (x,), lambda g: (g * (X > 0),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), vjp)


# ---------------------------------------------------------------------------
# volumetric ops


def global_avg_pool3d(x: Tensor) -> Tensor:
    _need_4d(x, "global_avg_pool3d")
    C, n = x.shape[0], x.data[0].size
    shape, dt = x.shape, x.dtype

    def vjp(g):
        return (np.broadcast_to((g / n).astype(dt)[:, None, None, None], shape).copy(),)

    return _result(x.data.reshape(C, -1).mean(axis=1), (x,), vjp)


def split(x: Tensor, axis: int, groups: int) -> list[Tensor]:
    axis = axis % x.ndim
    extent = x.shape[axis]
    if groups < 1 or extent % groups:
        raise ConfigError(f"split: extent {extent} on axis {axis} is not divisible by G={groups}")
    step = extent // groups
    parts = []
    for i in range(groups):
        index = [slice(None)] * x.ndim
        index[axis] = slice(i * step, (i + 1) * step)
        index = tuple(index)

        def vjp(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        parts.append(_result(x.data[index], (x,), vjp))
    return parts


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat: nothing to concatenate")
    axis = axis % parts[0].ndim
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(ref) or any(a != b for k, (a, b) in enumerate(zip(ref, other)) if k != axis):
            raise DimensionError(f"concat: incompatible shapes {parts[0].shape} and {p.shape}")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    data = np.concatenate([p.data for p in parts], axis=axis)
    return _result(data, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    _need_4d(x, "channel_scale")
    if s.shape != (x.shape[0],):
        raise DimensionError(f"channel_scale: need {x.shape[0]} factors, got shape {s.shape}")
    X, S = x.data, s.data[:, None, None, None]

    def vjp(g):
        return g * S, (g * X).reshape(X.shape[0], -1).sum(axis=1)

    return _result(X * S, (x, s), vjp)


def channel_bias(x: Tensor, b: Tensor) -> Tensor:
    _need_4d(x, "channel_bias")
    if b.shape != (x.shape[0],):
        raise DimensionError(f"channel_bias: need {x.shape[0]} biases, got shape {b.shape}")
    C = x.shape[0]
    return _result(x.data + b.data[:, None, None, None], (x, b),
                   lambda g: (g, g.reshape(C, -1).sum(axis=1)))


def conv1x1x1(x: Tensor, w: Tensor) -> Tensor:
    _need_4d(x, "conv1x1x1")
    if w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise DimensionError(f"conv1x1x1: weight {w.shape} does not match {x.shape[0]} input channels")
    C, D, H, W = x.shape
    X2, Wm = x.data.reshape(C, -1), w.data
    out = (Wm @ X2).reshape(Wm.shape[0], D, H, W)

    def vjp(g):
        g2 = g.reshape(Wm.shape[0], -1)
        return (Wm.T @ g2).reshape(C, D, H, W), g2 @ X2.T

    return _result(out, (x, w), vjp)


def _conv_out(n: int, stride: int, axis: str) -> int:
    if stride == 1:
        return n
    if n % stride:
        raise ConfigError(f"conv3d: extent {n} along {axis} not divisible by stride {stride}")
    return n // stride


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3x3 convolution, zero padding 1, stride 1 or 2."""
    _need_4d(x, "conv3d")
    if w.ndim != 5 or w.shape[1] != x.shape[0] or w.shape[2:] != (3, 3, 3):
        raise DimensionError(f"conv3d: weight {w.shape} incompatible with input {x.shape}")
    if stride not in (1, 2):
        raise ConfigError(f"conv3d: stride must be 1 or 2, got {stride}")
    C, D, H, W = x.shape
    Co = w.shape[0]
    Do, Ho, Wo = (_conv_out(n, stride, a) for n, a in zip((D, H, W), "DHW"))
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (1, 1)))
    Wt = w.data
    taps = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]

    def window(i, j, k):
        return (slice(None), slice(i, i + stride * Do, stride),
                slice(j, j + stride * Ho, stride), slice(k, k + stride * Wo, stride))

    out = np.zeros((Co, Do * Ho * Wo), dtype=np.result_type(x.data, Wt))
    for i, j, k in taps:
        out += Wt[:, :, i, j, k] @ xp[window(i, j, k)].reshape(C, -1)
    out = out.reshape(Co, Do, Ho, Wo)
    if b is not None:
        out = out + b.data[:, None, None, None]

    def vjp(g):
        g2 = g.reshape(Co, -1)
        gw = np.zeros_like(Wt)
        gxp = np.zeros_like(xp)
        for i, j, k in taps:
            win = window(i, j, k)
            gw[:, :, i, j, k] = g2 @ xp[win].reshape(C, -1).T
            gxp[win] += (Wt[:, :, i, j, k].T @ g2).reshape(C, Do, Ho, Wo)
        grads = (gxp[:, 1:-1, 1:-1, 1:-1], gw)
        if b is not None:
            grads += (g2.sum(axis=1),)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, vjp)


def max_pool3d(x: Tensor) -> Tensor:
    """Max over disjoint 2x2x2 blocks."""
    _need_4d(x, "max_pool3d")
    C, D, H, W = x.shape
    for n, a in zip((D, H, W), "DHW"):
        if n % 2:
            raise ConfigError(f"max_pool3d: extent {n} along {a} is odd")
    d, h, w = D // 2, H // 2, W // 2
    blocks = (x.data.reshape(C, d, 2, h, 2, w, 2)
              .transpose(0, 1, 3, 5, 2, 4, 6).reshape(C, d, h, w, 8))
    arg = blocks.argmax(axis=-1)
    _log_pattern(arg)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(C, d, h, w, 2, 2, 2).transpose(0, 1, 4, 2, 5, 3, 6)
        return (gx.reshape(C, D, H, W),)

    return _result(out, (x,), vjp)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 along D, H, W."""
    _need_4d(x, "upsample2")
    C, D, H, W = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :, None],
                          (C, D, 2, H, 2, W, 2)).reshape(C, 2 * D, 2 * H, 2 * W)
    return _result(out, (x,), lambda g: (g.reshape(C, D, 2, H, 2, W, 2).sum(axis=(2, 4, 6)),))


def downsample2(x: Tensor) -> Tensor:
    """Keep every second voxel along D, H, W."""
    _need_4d(x, "downsample2")
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, ::2, ::2, ::2] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[:, ::2, ::2, ::2]), (x,), vjp)


# ---------------------------------------------------------------------------
# losses


def bce(p: Tensor, target: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against soft targets."""
    t = np.asarray(target, dtype=p.dtype)
    if t.shape != p.shape:
        raise DimensionError(f"bce: target {t.shape} vs prediction {p.shape}")
    q = np.clip(p.data, eps, 1.0 - eps)
    n = q.size
    val = -(t * np.log(q) + (1.0 - t) * np.log1p(-q)).mean()
    inside = (p.data > eps) & (p.data < 1.0 - eps)
    return _result(val, (p,), lambda g: (g * inside * (q - t) / (q * (1.0 - q)) / n,))


def masked_l1(x: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean |x - target| over voxels where ``mask`` is set; 0 if none are."""
    t = np.asarray(target, dtype=x.dtype)
    m = np.asarray(mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        return _result(np.zeros((), dtype=x.dtype), (x,), lambda g: (np.zeros_like(x.data),))
    diff = x.data - t
    return _result(np.abs(diff[m]).mean(), (x,), lambda g: (g * np.sign(diff) * m / n,))


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(param) into every reachable Parameter.grad.

    The tape is cleared afterwards, whether or not every node was visited.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss was not produced by taped ops on trainable inputs")
    tape = tape or current_tape()
    if isinstance(loss, Parameter):
        loss.grad += 1.0
        tape.clear()
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    visited = []
    for idx in range(len(tape.nodes) - 1, -1, -1):
        out, inputs, vjp = tape.nodes[idx]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        visited.append(idx)
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if isinstance(t, Parameter):
                t.grad += gi
            elif id(t) in grads:
                grads[id(t)] = grads[id(t)] + gi
            else:
                grads[id(t)] = gi
    tape.last_visit_order = visited
    tape.clear()


def finite_diff_grad(f: Callable[[Parameter], object], p: Parameter, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``p``.

    ``p.data`` is perturbed in place and restored; ``f`` receives ``p``.
    """
    if h <= 0:
        raise ConfigError("finite_diff_grad: step h must be positive")
    flat = p.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(p))
            flat[i] = orig - h
            fm = _scalar(f(p))
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(p.shape)


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||, floor) over the whole tensor."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)
