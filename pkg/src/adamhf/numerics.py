"""Small dense-tensor engine with reverse-mode differentiation.

Everything the network needs is here: a ``Tensor`` that records the ops that
produced it, the handful of primitives used by the architecture (matmul,
token convolutions, softmax, layer norm, adaptive pooling, ...), a FLOP
ledger that ops report into, and a central-difference gradient checker.

Numpy carries the array storage and the elementwise kernels; graph building,
backward rules and FLOP accounting are ours.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

SELU_ALPHA = 1.6732632423543772848170429916717
SELU_SCALE = 1.0507009873554804934193349852946


class ConfigurationError(ValueError):
    """Invalid configuration value (bad kernel size, unknown activation, ...)."""


class ContractError(RuntimeError):
    """Caller violated an operation's precondition."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


# --------------------------------------------------------------------------
# precision mode

_DTYPE: contextvars.ContextVar = contextvars.ContextVar("adamhf_dtype", default=np.float32)


def default_dtype():
    return _DTYPE.get()


@contextlib.contextmanager
def precision(bits: int = 64):
    """Switch newly created tensors to 32- or 64-bit floats inside the block."""
    if bits not in (32, 64):
        raise ConfigurationError(f"precision must be 32 or 64 bits, got {bits}")
    token = _DTYPE.set(np.float64 if bits == 64 else np.float32)
    try:
        yield
    finally:
        _DTYPE.reset(token)


def verification_mode() -> bool:
    return _DTYPE.get() == np.float64


_GRAD_ENABLED: contextvars.ContextVar = contextvars.ContextVar("adamhf_grad", default=True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


# --------------------------------------------------------------------------
# FLOP accounting

_LEDGER: contextvars.ContextVar = contextvars.ContextVar("adamhf_ledger", default=None)


class FlopLedger:
    """Accumulates operation counts per kind while active as a context manager.

    Counts follow the usual convention of 2 per multiply-add, so a matmul of
    (m x k) by (k x n) records ``2*m*k*n``.
    """

    def __init__(self):
        self.counters: dict[str, int] = defaultdict(int)
        self._token = None

    def add(self, kind: str, count: int) -> None:
        if count < 0:
            raise ValueError("flop counts are non-negative")
        self.counters[kind] += int(count)

    def total(self) -> int:
        return int(sum(self.counters.values()))

    def __enter__(self):
        self._token = _LEDGER.set(self)
        return self

    def __exit__(self, *exc):
        _LEDGER.reset(self._token)
        self._token = None
        return False


def record_flops(kind: str, count: int) -> None:
    ledger = _LEDGER.get()
    if ledger is not None:
        ledger.add(kind, count)


def flops_snapshot(ledger: FlopLedger) -> dict[str, int]:
    """Per-kind counts plus ``total``; kinds are sorted for stable output."""
    report = {k: int(ledger.counters[k]) for k in sorted(ledger.counters)}
    report["total"] = ledger.total()
    return report


# --------------------------------------------------------------------------
# Tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties
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
        return float(self.data.reshape(-1)[0])

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        out = Tensor(self.data, requires_grad=self.requires_grad, name=self.name, dtype=dtype)
        return out

    # -- operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _GRAD_ENABLED.get() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs_(x: Tensor) -> Tensor:
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# --------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def selu(x: Tensor) -> Tensor:
    pos = x.data > 0
    neg_part = SELU_SCALE * SELU_ALPHA * np.exp(np.minimum(x.data, 0.0))
    y = np.where(pos, SELU_SCALE * x.data, neg_part - SELU_SCALE * SELU_ALPHA)
    return _result(y.astype(x.data.dtype), (x,), lambda g: (g * np.where(pos, SELU_SCALE, neg_part),))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


_ACTIVATIONS = {"relu": relu, "selu": selu, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data
    n = x.shape[-1]

    def bw(g):
        gxhat = g * gain.data
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _result(y, (x, gain, bias), bw)


# --------------------------------------------------------------------------
# shape manipulation and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    record_flops("matmul", 2 * m * k * n)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), bw)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(y), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return sum_(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    return _result(x.data.T, (x,), lambda g: (g.T,))


def getitem(x: Tensor, idx) -> Tensor:
    y = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(y, copy=True), (x,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    y = np.concatenate([p.data for p in parts], axis=axis)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(y, parts, bw)


def cumsum(x: Tensor, axis: int = 0) -> Tensor:
    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _result(np.cumsum(x.data, axis=axis), (x,), bw)


# --------------------------------------------------------------------------
# token-axis convolutions and pooling


def _pad_tokens(a: np.ndarray, pad: int) -> np.ndarray:
    out = np.zeros((a.shape[0] + 2 * pad, a.shape[1]), dtype=a.dtype)
    out[pad:pad + a.shape[0]] = a
    return out


def conv1d_tokens(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation along the token axis with 'same' zero padding.

    x is (N, d_in), kernel is (k, d_in, d_out) with k odd.
    """
    k, d_in, d_out = kernel.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d_tokens needs an odd kernel size, got {k}")
    n, dx = x.shape
    if dx != d_in:
        raise DimensionError(f"conv1d_tokens shape mismatch: input {x.shape}, kernel {kernel.shape}")
    pad = (k - 1) // 2
    xp = _pad_tokens(x.data, pad)
    # cols[n, j*d_in + c] = xp[n + j, c]
    cols = np.concatenate([xp[j:j + n] for j in range(k)], axis=1)
    w2 = kernel.data.reshape(k * d_in, d_out)
    y = cols @ w2
    record_flops("conv1d", 2 * n * k * d_in * d_out)
    parents = [x, kernel]
    if bias is not None:
        y = y + bias.data
        parents.append(bias)

    def bw(g):
        gw = (cols.T @ g).reshape(kernel.shape)
        gcols = (g @ w2.T).reshape(n, k, d_in)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[j:j + n] += gcols[:, j, :]
        gx = gxp[pad:pad + n]
        if bias is not None:
            return gx, gw, g.sum(axis=0)
        return gx, gw

    return _result(y, parents, bw)


def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel convolution along tokens; x (N, d), kernel (k, d), k odd."""
    k, d = kernel.shape
    if k % 2 == 0:
        raise ConfigurationError(f"depthwise_conv1d needs an odd kernel size, got {k}")
    n = x.shape[0]
    if x.shape[1] != d:
        raise DimensionError(f"depthwise_conv1d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    pad = (k - 1) // 2
    xp = _pad_tokens(x.data, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=0)  # (n, d, k)
    y = np.einsum("ndk,kd->nd", win, kernel.data)
    record_flops("depthwise_conv", 2 * n * k * d)

    def bw(g):
        gk = np.einsum("ndk,nd->kd", win, g)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[j:j + n] += g * kernel.data[j]
        return gxp[pad:pad + n], gk

    return _result(y, (x, kernel), bw)


def pool_groups(n: int, out_n: int) -> list[tuple[int, int]]:
    """Contiguous near-equal [start, stop) groups used by adaptive pooling."""
    if out_n < 1:
        raise ConfigurationError("adaptive pooling needs out_n >= 1")
    if n < 1:
        raise ConfigurationError("adaptive pooling needs at least one token")
    if out_n >= n:
        return [(min(i, n - 1), min(i, n - 1) + 1) for i in range(out_n)]
    return [((i * n) // out_n, ((i + 1) * n) // out_n) for i in range(out_n)]


def adaptive_pool(x: Tensor, out_n: int) -> Tensor:
    """Mean over contiguous token groups; pads by repeating the last token."""
    n, d = x.shape
    groups = pool_groups(n, out_n)
    starts = np.array([s for s, _ in groups])
    sizes = np.array([e - s for s, e in groups], dtype=x.data.dtype)
    if out_n >= n:
        y = x.data[starts]
    else:
        y = np.add.reduceat(x.data, starts, axis=0) / sizes[:, None]
    record_flops("pool", n * d)

    def bw(g):
        gx = np.zeros_like(x.data)
        for i, (s, e) in enumerate(groups):
            gx[s:e] += g[i] / (e - s)
        return (gx,)

    return _result(y, (x,), bw)


# --------------------------------------------------------------------------
# backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.reshape(node.shape)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    parameter_name: str
    max_relative_error: float
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor] | Iterable[tuple[str, Tensor]],
               tol: float = 1e-4, h: float = 1e-5) -> list[GradCheckReport]:
    """Compare backward() against central differences, one report per block.

    ``f`` rebuilds the scalar loss from the current parameter values. Must run
    under ``precision(64)`` with 64-bit parameters.
    """
    if not verification_mode():
        raise ContractError("grad_check requires 64-bit verification mode")
    items = list(params.items()) if isinstance(params, dict) else list(params)
    for _, p in items:
        if p.data.dtype != np.float64:
            raise ContractError("grad_check parameters must be 64-bit")
        p.zero_grad()
    backward(f())
    reports = []

    def evaluate() -> float:
        with no_grad():
            return f().item()

    for name, p in items:
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2 * h)
        err = float(relative_error(analytic, numeric).max()) if analytic.size else 0.0
        reports.append(GradCheckReport(name, err, err <= tol))
    return reports
