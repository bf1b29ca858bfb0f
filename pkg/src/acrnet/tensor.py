"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations needed by the ACRNet graph are provided. Every op
records a :class:`Node` on its output when any input requires a gradient;
:func:`backward` walks those nodes in reverse topological order.

Arrays are float32 unless a float64 array is passed in explicitly (used by
gradient checks).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import _kernels as K
from .errors import ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.op}, n_inputs={len(self.inputs)})"


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- graph walk

@dataclass
class Graph:
    """Nodes reachable from an output, in topological order (inputs first)."""

    output: Tensor
    order: list = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None:
                continue
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t.node.inputs:
                if parent.node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(output, order)

    def __len__(self):
        return len(self.order)


def backward(loss: Tensor, grad: Optional[np.ndarray] = None):
    """Populate ``.grad`` on every leaf that requires it.

    Gradients accumulate into existing ``.grad`` arrays; call ``zero_grad``
    on parameters between steps.
    """
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    graph = Graph.from_output(loss)
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for t in reversed(graph.order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        parent_grads = t.node.backward_fn(g)
        for parent, pg in zip(t.node.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is None:
                pg = np.asarray(pg, dtype=parent.dtype)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    if loss.node is None and loss.requires_grad:
        loss.grad = grad if loss.grad is None else loss.grad + grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.data + b.data
    return _result(out, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, "mul", (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, "matmul", (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _result(out, "linear", inputs, bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return _result(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return _result(out, "sum", (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return _result(out, "mean", (x,),
                   lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    target = _wrap(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=pred.dtype)

    def bw(g):
        gp = (2.0 / n) * g * diff
        gp = gp.astype(pred.dtype, copy=False)
        return gp, (-gp if target.requires_grad else None)

    return _result(out, "mse_loss", (pred, target), bw)


# ---------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    mask = x.data >= 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), "relu", (x,),
                   lambda g: (np.where(x.data > 0, g, 0).astype(x.dtype, copy=False),))


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    """Fixed negative slope; shares the PReLU kernel so the two agree bit for bit."""
    c = x.shape[1] if x.ndim > 1 else 1
    slopes = np.full(c, slope, dtype=x.dtype)
    data = x.data if x.ndim == 4 else x.data.reshape(x.shape[0] if x.ndim else 1, c, 1, -1)
    out = K.prelu_fwd(data, slopes).reshape(x.shape)
    return _result(out, "leaky_relu", (x,),
                   lambda g: (K.prelu_bwd(data, slopes, g.reshape(data.shape))[0].reshape(x.shape),))


def prelu(x: Tensor, alphas: Tensor) -> Tensor:
    """Channel-wise PReLU on (N, C, ...) input; ``alphas`` has C or 1 entries."""
    c = x.shape[1] if x.ndim > 1 else 1
    if alphas.ndim != 1 or (alphas.shape[0] not in (1, c)):
        raise ShapeError(f"prelu: {alphas.shape[0]} slopes for {c} channels")
    slopes = np.broadcast_to(alphas.data.astype(x.dtype), (c,)).copy()
    data = x.data if x.ndim == 4 else x.data.reshape(x.shape[0] if x.ndim else 1, c, 1, -1)
    out = K.prelu_fwd(data, slopes).reshape(x.shape)

    def bw(g):
        gx, ga = K.prelu_bwd(data, slopes, np.ascontiguousarray(g).reshape(data.shape))
        if alphas.shape[0] == 1:
            ga = ga.sum(keepdims=True)
        return gx.reshape(x.shape), ga.astype(x.dtype)

    return _result(out, "prelu", (x, alphas), bw)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so every output lies strictly inside (0, 1)."""
    finfo = np.finfo(x.dtype)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.data))
    s = np.clip(s, finfo.tiny, 1.0 - finfo.epsneg).astype(x.dtype, copy=False)
    return _result(s, "sigmoid", (x,), lambda g: (g * s * (1 - s),))


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, weight: Tensor, padding=(0, 0), groups: int = 1,
           bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 grouped cross-correlation. ``weight`` is (out, in/groups, kh, kw)."""
    if weight.dtype != x.dtype:
        raise ShapeError(f"conv2d dtype mismatch: input {x.dtype}, weight {weight.dtype}")
    out, xp = K.conv2d_forward(x.data, weight.data, padding, groups)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx, gw = K.conv2d_backward(g, xp, weight.data, padding, groups)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, "conv2d", inputs, bw)


def repeat_channels(x: Tensor, times: int) -> Tensor:
    """Tile the channel axis: (N, C, H, W) -> (N, times*C, H, W), copies in order."""
    n, c = x.shape[:2]
    out = np.tile(x.data, (1, times, 1, 1))
    return _result(out, "repeat_channels", (x,),
                   lambda g: (g.reshape((n, times, c) + x.shape[2:]).sum(axis=1),))


def group_sum(x: Tensor, groups: int) -> Tensor:
    """Sum consecutive channel groups: (N, groups*C, H, W) -> (N, C, H, W)."""
    n, total = x.shape[:2]
    if total % groups:
        raise ShapeError(f"group_sum: {total} channels not divisible by {groups}")
    c = total // groups
    out = x.data.reshape((n, groups, c) + x.shape[2:]).sum(axis=1)
    return _result(out, "group_sum", (x,),
                   lambda g: (np.tile(g, (1, groups, 1, 1)),))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation of (N, C, H, W) input over (N, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance); in eval mode only the buffers are read.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects (N, C, H, W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine shape {gamma.shape} for {c} channels")
    dt = x.dtype
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean, var = K.channel_moments(x.data)
        running_mean *= (1 - momentum)
        running_mean += (momentum * mean).astype(running_mean.dtype)
        running_var *= (1 - momentum)
        running_var += (momentum * var * m / max(m - 1, 1)).astype(running_var.dtype)
        invstd = (1.0 / np.sqrt(var + eps)).astype(dt)
        xhat, out = K.affine_normalize(x.data, mean.astype(dt), invstd, gamma.data, beta.data)

        def bw(g):
            gx, gg, gb = K.bn_train_bwd(np.ascontiguousarray(g), xhat, gamma.data, invstd)
            return gx, gg.astype(dt), gb.astype(dt)

        return _result(out, "batch_norm", (x, gamma, beta), bw)

    invstd = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(dt)
    xhat, out = K.affine_normalize(x.data, running_mean.astype(dt), invstd, gamma.data, beta.data)
    shape = (1, c, 1, 1)

    def bw_eval(g):
        gx = g * (gamma.data * invstd).reshape(shape) if x.requires_grad else None
        return (gx, (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(dt),
                g.sum(axis=(0, 2, 3), dtype=np.float64).astype(dt))

    return _result(out, "batch_norm", (x, gamma, beta), bw_eval)


# ---------------------------------------------------------------- straight-through ops

def quantize_ste(x: Tensor, bits: int) -> Tensor:
    """Forward: B-bit quantise then dequantise. Backward: identity."""
    from .codec import dequantize, quantize

    out = dequantize(quantize(x.data, bits), bits).astype(x.dtype)
    return _result(out, "quantize_ste", (x,), lambda g: (g,))


def binarize(latent: Tensor) -> Tensor:
    """Row-scaled sign of a 2-d weight, with clipped straight-through gradient.

    Effective weight is ``alpha_r * sign(latent)`` where ``alpha_r`` is the
    mean absolute latent value of row r (sign(0) taken as +1). The gradient
    passes to the latent weight unchanged where ``|latent| <= 1`` and is zero
    elsewhere; no gradient flows through ``alpha``.
    """
    w = latent.data
    if w.ndim != 2:
        raise ShapeError(f"binarize expects a 2-d weight, got {w.shape}")
    alpha = binary_scales(w)
    out = np.where(w >= 0, 1, -1).astype(w.dtype) * alpha[:, None]
    keep = np.abs(w) <= 1
    return _result(out, "binarize", (latent,), lambda g: (np.where(keep, g, 0).astype(w.dtype),))


def binary_scales(w: np.ndarray) -> np.ndarray:
    import warnings

    alpha = np.abs(w).mean(axis=1, dtype=np.float64)
    dead = alpha == 0
    if dead.any():
        warnings.warn(f"{int(dead.sum())} all-zero weight rows; using scale 1e-8", RuntimeWarning,
                      stacklevel=3)
        alpha[dead] = 1e-8
    return alpha.astype(w.dtype)


# ---------------------------------------------------------------- dispatch

OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "linear": linear,
    "reshape": reshape,
    "sum": sum_all,
    "mean": mean_all,
    "mse_loss": mse_loss,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "prelu": prelu,
    "sigmoid": sigmoid,
    "conv2d": conv2d,
    "repeat_channels": repeat_channels,
    "group_sum": group_sum,
    "batch_norm": batch_norm,
    "quantize_ste": quantize_ste,
    "binarize": binarize,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Apply the named op; convenience for callers that pick ops by name."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckResult:
    max_deviation: float
    deviations: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def count(self) -> int:
        return int(self.deviations.size)

    def fraction_below(self, tol: float) -> float:
        if self.deviations.size == 0:
            return 1.0
        return float(np.mean(self.deviations < tol))


def grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], epsilon: float = 1e-3,
               samples_per_param: Optional[int] = None, rng=None,
               exclude: Optional[Callable[[Tensor, int], bool]] = None) -> GradCheckResult:
    """Compare analytic gradients to central finite differences.

    ``loss_fn`` rebuilds the graph and returns a scalar loss each call. Only
    tensors with ``requires_grad`` are probed. Deviation per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``. ``exclude(tensor, flat_index)`` can
    veto coordinates (e.g. activation inputs sitting exactly on a kink).
    """
    params = [p for p in params if p.requires_grad]
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.zero_grad()
    if not params:
        empty = np.zeros(0)
        return GradCheckResult(0.0, empty, empty, empty)
    loss = loss_fn()
    backward(loss)
    analytic, numeric = [], []
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if samples_per_param is not None and flat.size > samples_per_param:
                idx = np.sort(rng.choice(flat.size, samples_per_param, replace=False))
            g = p.grad.reshape(-1)
            for i in idx:
                if exclude is not None and exclude(p, int(i)):
                    continue
                orig = flat[i]
                flat[i] = orig + epsilon
                up = float(loss_fn().data)
                flat[i] = orig - epsilon
                down = float(loss_fn().data)
                flat[i] = orig
                analytic.append(float(g[i]))
                numeric.append((up - down) / (2 * epsilon))
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    dev = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return GradCheckResult(float(dev.max()) if dev.size else 0.0, dev, a, n)
