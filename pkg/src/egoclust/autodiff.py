"""Dense tensors with reverse-mode automatic differentiation.

Just enough machinery for a small vision transformer, its two loss
branches, and AdamW: dense row-major buffers (numpy-backed), a recording
tape, and hand-derived backward rules for every op.  No views, no lazy
evaluation, no broadcasting magic beyond what numpy does and the backward
rules undo.

Usage pattern::

    with Tape() as tape:
        loss = some_forward(params)
        tape.backward(loss)
    # params now carry .grad

Ops executed while no tape is active (or under ``no_grad()``) are pure
forward computations and record nothing.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(ValueError):
    """Base class for tensor/tape contract violations."""


class ShapeError(AutodiffError):
    pass


class DomainError(AutodiffError):
    pass


class NumericsError(AutodiffError):
    """Non-finite value produced by a forward op (debug checks only)."""


_FLOAT_DTYPES = (np.float32, np.float64)

# Debug-mode NaN/Inf detection.  Off by default; the test suite turns it on.
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite value produced by op '{op}'")


class Tensor:
    """A dense n-d float array, optionally tracked for gradients.

    ``data`` is always a contiguous row-major float32/float64 buffer.
    ``grad`` is populated by ``Tape.backward`` and has the same shape as
    ``data`` (or is None before any backward pass).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        # ascontiguousarray promotes 0-d to 1-d, so only call it when needed
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar (all defined as module-level ops below) --
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# Tape


class _Record:
    __slots__ = ("output", "inputs", "rule")

    def __init__(self, output, inputs, rule):
        self.output = output
        self.inputs = inputs
        self.rule = rule


class Tape:
    """Ordered record of differentiable ops, in execution order.

    Execution order is a topological order by construction (an op can only
    consume tensors that already exist), so the backward sweep is a single
    reverse pass that touches every record exactly once.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def clear(self) -> None:
        self._records.clear()

    def backward(self, loss: Tensor, clear: bool = True) -> None:
        """Populate ``.grad`` on every requires_grad tensor reachable from loss.

        ``loss`` must be a scalar.  By default the tape is cleared afterwards;
        pass ``clear=False`` to keep the records (e.g. to backward twice).
        """
        if not isinstance(loss, Tensor):
            raise AutodiffError("backward expects a Tensor loss")
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        # Per-pass gradient flow lives in `pending`; only leaves (tensors that
        # are never an op output on this tape) receive .grad at the end, so a
        # second backward on a retained tape accumulates cleanly.
        outputs = {id(rec.output) for rec in self._records}
        pending: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
        for rec in reversed(self._records):
            entry = pending.pop(id(rec.output), None)
            if entry is None:
                continue
            out_grad = entry[1]
            for t, g in zip(rec.inputs, rec.rule(out_grad)):
                if g is None:
                    continue
                key = id(t)
                if key in pending:
                    pending[key][1] = pending[key][1] + g
                else:
                    pending[key] = [t, g]
        for key, (t, g) in pending.items():
            if key in outputs or not t.requires_grad:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
        if clear:
            self.clear()


_tape_stack: list = []


def active_tape():
    """The innermost live tape, or None when not recording."""
    for t in reversed(_tape_stack):
        if t is None:
            return None
        return t
    return None


class no_grad:
    """Context manager that suspends recording."""

    def __enter__(self):
        _tape_stack.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack.pop()
        return False


def _emit(op: str, inputs: tuple, out_data: np.ndarray, rule) -> Tensor:
    """Wrap an op result; record it if a tape is live and any input is tracked."""
    _check_finite(out_data, op)
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape._records.append(_Record(out, inputs, rule))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_data(a: Tensor, b, op: str):
    bt = _as_tensor(b, a.dtype)
    try:
        np.broadcast_shapes(a.shape, bt.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {bt.shape} do not broadcast") from None
    return bt


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a: Tensor, b) -> Tensor:
    b = _binary_data(a, b, "add")
    out = a.data + b.data

    def rule(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("add", (a, b), out, rule)


def sub(a: Tensor, b) -> Tensor:
    b = _binary_data(a, b, "sub")
    out = a.data - b.data

    def rule(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("sub", (a, b), out, rule)


def mul(a: Tensor, b) -> Tensor:
    b = _binary_data(a, b, "mul")
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g * b_data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a_data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), out, rule)


def div(a: Tensor, b) -> Tensor:
    b = _binary_data(a, b, "div")
    out = a.data / b.data
    a_data, b_data = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g / b_data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a_data / (b_data * b_data), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", (a, b), out, rule)


def neg(a: Tensor) -> Tensor:
    def rule(g):
        return (-g,)

    return _emit("neg", (a,), -a.data, rule)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (thin alias over mul)."""
    return mul(a, float(s))


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def rule(g):
        return (g * out,)

    return _emit("exp", (a,), out, rule)


def tlog(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        bad = float(a.data.min())
        raise DomainError(f"log requires strictly positive input, min value {bad}")
    a_data = a.data

    def rule(g):
        return (g / a_data,)

    return _emit("log", (a,), np.log(a.data), rule)


def tsqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        bad = float(a.data.min())
        raise DomainError(f"sqrt requires non-negative input, min value {bad}")
    out = np.sqrt(a.data)

    def rule(g):
        return (g * 0.5 / out,)

    return _emit("sqrt", (a,), out, rule)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient passes only where a > floor."""
    out = np.maximum(a.data, floor)
    pass_mask = a.data > floor

    def rule(g):
        return (g * pass_mask,)

    return _emit("clamp_min", (a,), out, rule)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    c = 0.7978845608028654  # sqrt(2/pi); python float so f32 inputs stay f32
    x = a.data
    u = c * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def rule(g):
        du = c * (1.0 + 3 * 0.044715 * x * x)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return (g * dx,)

    return _emit("gelu", (a,), out, rule)


# ---------------------------------------------------------------------------
# Matmul / shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        raise AutodiffError("matmul expects two Tensors")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}") from None
    a_data, b_data = a.data, b.data

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b_data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a_data, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, rule)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    in_shape = a.shape

    def rule(g):
        return (g.reshape(in_shape),)

    return _emit("reshape", (a,), out.copy(), rule)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))

    def rule(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _emit("transpose", (a,), out, rule)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            shape = list(in_shape)
            for ax in axis:
                shape[ax] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _emit("sum", (a,), np.asarray(out), rule)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    if axis is None:
        n = a.size
    else:
        n = int(np.prod([a.shape[ax] for ax in axis]))
    out = a.data.mean(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            shape = list(in_shape)
            for ax in axis:
                shape[ax] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g / n, in_shape).copy(),)

    return _emit("mean", (a,), np.asarray(out), rule)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def rule(g):
        dot = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - dot),)

    return _emit("softmax", (a,), out, rule)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm affine shapes {gain.shape}/{bias.shape} do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gain_data = gain.data

    def rule(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain_data
            dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
            dmu = -(dxhat * inv).sum(axis=-1, keepdims=True) + dvar * (-2.0 / d) * xc.sum(axis=-1, keepdims=True)
            gx = dxhat * inv + dvar * (2.0 / d) * xc + dmu / d
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _emit("layernorm", (x, gain, bias), out, rule)


# ---------------------------------------------------------------------------
# Row gather / scatter (for masking, decoding, and grid assembly)


def _check_index(idx: np.ndarray, bound: int, op: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        raise ShapeError(f"{op}: index out of range for length {bound}")
    return idx


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows along axis 0 (idx 1-D) or axis 1 per batch (idx 2-D).

    2-D form: a is (B, T, ...), idx is (B, V); output (B, V, ...).
    """
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim == 1:
        idx = _check_index(idx, a.shape[0], "take_rows")
        out = a.data[idx]
        in_shape = a.shape

        def rule(g):
            acc = np.zeros(in_shape, dtype=g.dtype)
            np.add.at(acc, idx, g)
            return (acc,)

        return _emit("take_rows", (a,), out.copy(), rule)
    if idx.ndim == 2:
        if idx.shape[0] != a.shape[0]:
            raise ShapeError(f"take_rows: batch sizes disagree ({idx.shape[0]} vs {a.shape[0]})")
        idx = _check_index(idx, a.shape[1], "take_rows")
        batch = np.arange(a.shape[0])[:, None]
        out = a.data[batch, idx]
        in_shape = a.shape

        def rule(g):
            acc = np.zeros(in_shape, dtype=g.dtype)
            np.add.at(acc, (batch, idx), g)
            return (acc,)

        return _emit("take_rows", (a,), out.copy(), rule)
    raise ShapeError(f"take_rows: idx must be 1-D or 2-D, got rank {idx.ndim}")


def put_rows(values: Tensor, idx, length: int) -> Tensor:
    """Scatter rows into a zero tensor of `length` rows (inverse of take_rows).

    1-D idx: values (V, ...) -> (length, ...).
    2-D idx: values (B, V, ...) -> (B, length, ...).
    Duplicate indices accumulate.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim == 1:
        idx = _check_index(idx, length, "put_rows")
        if idx.shape[0] != values.shape[0]:
            raise ShapeError("put_rows: index count does not match value rows")
        out = np.zeros((length,) + values.shape[1:], dtype=values.dtype)
        np.add.at(out, idx, values.data)

        def rule(g):
            return (g[idx],)

        return _emit("put_rows", (values,), out, rule)
    if idx.ndim == 2:
        if idx.shape[:2] != values.shape[:2]:
            raise ShapeError("put_rows: index grid does not match value rows")
        idx = _check_index(idx, length, "put_rows")
        batch = np.arange(values.shape[0])[:, None]
        out = np.zeros((values.shape[0], length) + values.shape[2:], dtype=values.dtype)
        np.add.at(out, (batch, idx), values.data)

        def rule(g):
            return (g[batch, idx],)

        return _emit("put_rows", (values,), out, rule)
    raise ShapeError(f"put_rows: idx must be 1-D or 2-D, got rank {idx.ndim}")


# ---------------------------------------------------------------------------
# Gradient checking


def numerical_gradient(f, x: Tensor, h: float | None = None) -> np.ndarray:
    """Central-difference gradient of scalar-valued f at x, per coordinate.

    Step per coordinate is h * max(1, |x_i|); h defaults by dtype
    (1e-3 for float32, 1e-5 for float64).  The probe always runs in
    float64 so the oracle is not limited by single-precision
    cancellation in the difference quotient.
    """
    if h is None:
        h = 1e-5 if x.dtype == np.float64 else 1e-3
    probe = Tensor(x.data.astype(np.float64))
    flat = probe.data.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(float(orig)))
            flat[i] = orig + step
            f_plus = f(probe).item()
            flat[i] = orig - step
            f_minus = f(probe).item()
            flat[i] = orig
            grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad.reshape(x.shape)


def finite_diff_check(f, x: Tensor, h: float | None = None, floor: float = 1.0) -> float:
    """Max relative error between backward() and central finite differences.

    Relative error per coordinate is |ad - fd| / max(|ad|, |fd|, floor);
    the unit floor makes the comparison absolute for near-zero gradients.
    """
    was_grad = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        out = f(x)
        tape.backward(out)
    if x.grad is None:
        analytic = np.zeros_like(x.data)
    else:
        analytic = x.grad.copy()
    x.grad = None
    x.requires_grad = was_grad
    numeric = numerical_gradient(f, x, h=h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def zero_grads(params) -> None:
    """Clear .grad on an iterable (or dict) of tensors."""
    if isinstance(params, dict):
        params = params.values()
    for p in params:
        p.grad = None
