"""Dense float64 tensors with reverse-mode automatic differentiation.

A small define-by-run engine: while a Tape is active, every op appends a
backward closure; ``Tape.backward`` replays the closures in exact reverse
construction order. Only the broadcasting the models need is supported
(scalar-with-tensor and equal-shape); anything else is rejected so every
backward rule stays auditable.

All values are float64. When validation is enabled (the default), an op
that produces NaN/Inf from finite inputs raises NonFiniteError instead of
propagating silently.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError

__all__ = [
    "Tensor",
    "Tape",
    "Adam",
    "DimensionError",
    "DomainError",
    "NonFiniteError",
    "set_validation",
    "validation_enabled",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the op (e.g. log of <= 0)."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf from finite inputs."""


_VALIDATE = True


def set_validation(enabled: bool) -> bool:
    """Toggle NaN/Inf output checking; returns the previous setting."""
    global _VALIDATE
    previous = _VALIDATE
    _VALIDATE = bool(enabled)
    return previous


def validation_enabled() -> bool:
    return _VALIDATE


class Tensor:
    """A dense float64 array plus gradient slot.

    Values are treated as immutable after creation; only ``grad`` is
    mutated (by backward passes and optimizer bookkeeping).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records op backward closures in construction order.

    Use as a context manager around forward passes that need gradients.
    Ops executed with no active tape run forward-only.
    """

    current: "Tape | None" = None

    def __init__(self):
        self._nodes = []  # (output tensor, backward closure)

    def __enter__(self) -> "Tape":
        if Tape.current is not None:
            raise ContractError("nested tapes are not supported; one tape per worker")
        Tape.current = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape.current = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(param) into every reachable requires_grad tensor.

        Repeated calls without zeroing accumulate additively into leaf
        gradients; intermediate gradients are reset on each call.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
        for out, _ in self._nodes:
            out.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, node in reversed(self._nodes):
            if out.grad is not None:
                node(out.grad)


def _finite_check(arr: np.ndarray, op: str):
    if not _VALIDATE:
        return
    # A non-finite sum is a complete detector (any NaN/Inf taints it); the
    # exact per-element recheck only runs on alarm, to rule out overflow.
    if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")


def _make(data: np.ndarray, inputs, backward_fn, op: str) -> Tensor:
    """Wrap op output; register the backward closure if a tape is active."""
    _finite_check(data, op)
    out = Tensor(data)
    tape = Tape.current
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append((out, backward_fn))
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)  # own copy; g may be reused
    else:
        t.grad += g


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # Undo scalar broadcasting: a scalar operand receives the summed gradient.
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape) if int(np.prod(shape)) == 1 else g


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} are neither equal nor scalar-broadcastable")


# ---------------------------------------------------------------------------
# arithmetic

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")

    def backward(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")

    def backward(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")

    def backward(g):
        _accum(a, _reduce_to(g * b.data, a.data.shape))
        _accum(b, _reduce_to(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward, "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient w.r.t. the constant)."""
    c = float(c)

    def backward(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), backward, "scale")


def shift(a: Tensor, c: float) -> Tensor:
    """Add a python constant."""
    c = float(c)

    def backward(g):
        _accum(a, g)

    return _make(a.data + c, (a,), backward, "shift")


# ---------------------------------------------------------------------------
# nonlinearities

def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")

    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward, "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def backward(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), backward, "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    # Exact erf form, not the tanh approximation: d/dx = Phi(x) + x * phi(x).
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        _accum(a, g * (cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI))

    return _make(x * cdf, (a,), backward, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    out_data = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # stable for large |x|

    def backward(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward, "sigmoid")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)  # subgradient 0 at exactly 0

    def backward(g):
        _accum(a, g * sign)

    return _make(np.abs(a.data), (a,), backward, "abs")


# ---------------------------------------------------------------------------
# normalization / softmax

def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    if a.data.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last axis")
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        inner = np.sum(g * out_data, axis=-1, keepdims=True)
        _accum(a, out_data * (g - inner))

    return _make(out_data, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    out_data = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))

    def backward(g):
        _accum(a, g - np.exp(out_data) * np.sum(g, axis=-1, keepdims=True))

    return _make(out_data, (a,), backward, "log_softmax")


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(f"layernorm gain/bias must have shape ({d},), got {gain.data.shape} and {bias.data.shape}")
    mean = np.mean(a.data, axis=-1, keepdims=True)
    centered = a.data - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std
    out_data = normed * gain.data + bias.data

    def backward(g):
        reduce_axes = tuple(range(a.data.ndim - 1))
        _accum(gain, np.sum(g * normed, axis=reduce_axes))
        _accum(bias, np.sum(g, axis=reduce_axes))
        gy = g * gain.data
        _accum(a, inv_std * (gy - np.mean(gy, axis=-1, keepdims=True)
                             - normed * np.mean(gy * normed, axis=-1, keepdims=True)))

    return _make(out_data, (a, gain, bias), backward, "layernorm")


# ---------------------------------------------------------------------------
# reductions

def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _make(np.sum(a.data).reshape(()), (a,), backward, "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        _accum(a, np.full_like(a.data, float(g) / n))

    return _make(np.mean(a.data).reshape(()), (a,), backward, "mean")


def mean_rows(a: Tensor) -> Tensor:
    """[N, D] -> [1, D] mean over rows."""
    if a.data.ndim != 2:
        raise DimensionError(f"mean_rows needs a 2-D tensor, got {a.data.shape}")
    n = a.data.shape[0]

    def backward(g):
        _accum(a, np.repeat(g / n, n, axis=0))

    return _make(np.mean(a.data, axis=0, keepdims=True), (a,), backward, "mean_rows")


# ---------------------------------------------------------------------------
# structural ops

def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """[N, D] + [D]-shaped bias broadcast over rows."""
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise DimensionError(f"add_bias: x {x.data.shape} with bias {b.data.shape}")

    def backward(g):
        _accum(x, g)
        _accum(b, np.sum(g, axis=0))

    return _make(x.data + b.data, (x, b), backward, "add_bias")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.data.shape}")

    def backward(g):
        _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), backward, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"cannot reshape {a.data.shape} to {shape}")

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def take_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor by index array (duplicates allowed)."""
    if a.data.ndim != 2:
        raise DimensionError(f"take_rows needs a 2-D tensor, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accum(a, ga)

    return _make(a.data[idx].copy(), (a,), backward, "take_rows")


def tile_rows(a: Tensor, n: int) -> Tensor:
    """Repeat a [1, D] row n times."""
    if a.data.ndim != 2 or a.data.shape[0] != 1:
        raise DimensionError(f"tile_rows needs a [1, D] tensor, got {a.data.shape}")

    def backward(g):
        _accum(a, np.sum(g, axis=0, keepdims=True))

    return _make(np.repeat(a.data, n, axis=0), (a,), backward, "tile_rows")


def concat_rows(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat_rows of empty list")
    widths = {t.data.shape[1] for t in tensors}
    if any(t.data.ndim != 2 for t in tensors) or len(widths) != 1:
        raise DimensionError(f"concat_rows needs 2-D tensors of equal width, got {[t.data.shape for t in tensors]}")
    offsets = np.cumsum([0] + [t.data.shape[0] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, g[lo:hi])

    return _make(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), backward, "concat_rows")


def concat_cols(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat_cols of empty list")
    heights = {t.data.shape[0] for t in tensors}
    if any(t.data.ndim != 2 for t in tensors) or len(heights) != 1:
        raise DimensionError(f"concat_cols needs 2-D tensors of equal height, got {[t.data.shape for t in tensors]}")
    offsets = np.cumsum([0] + [t.data.shape[1] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, g[:, lo:hi])

    return _make(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), backward, "concat_cols")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start < stop <= a.data.shape[1]):
        raise DimensionError(f"slice_cols [{start}:{stop}] of shape {a.data.shape}")

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[:, start:stop] = g
            _accum(a, ga)

    return _make(a.data[:, start:stop].copy(), (a,), backward, "slice_cols")


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Standard Adam with bias correction over a named parameter dict.

    Update order follows the dict's iteration order, which is fixed by
    model construction, so training is bitwise reproducible.
    """

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0.0:
            raise ConfigError(f"Adam lr must be positive, got {lr}")
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
