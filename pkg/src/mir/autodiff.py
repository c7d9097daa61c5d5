"""Minimal dense-tensor engine with reverse-mode differentiation.

Everything downstream (embeddings, attention, recurrence, the scoring MLP)
is built from the 2-D float64 primitives in this module.  A forward pass
run inside a ``Tape`` context records one backward closure per primitive;
``Tape.backward`` replays the closures in reverse execution order, which
is a valid reverse topological order because operations are recorded as
they execute.

Only the broadcast patterns the model actually needs are supported
(same shape, scalar, single row, single column); anything else is
rejected so shape bugs surface immediately.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "as_tensor",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "leaky_relu",
    "softplus",
    "softmax_rows",
    "sum_all",
    "mean_all",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "reshape",
    "gather_rows",
    "lift",
    "grads_by_name",
    "finite_diff_check",
]

LEAKY_RELU_SLOPE = 0.01


class ShapeError(ValueError):
    """Operands with incompatible shapes were combined."""


class Tensor:
    """A 2-D float64 array plus gradient bookkeeping.

    Scalars are stored as shape (1, 1) and 1-D input becomes a single row,
    so every value flowing through the model has exactly two axes.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D; got array of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @classmethod
    def _make(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def accumulate_grad(self, g: np.ndarray) -> None:
        # Rebind instead of mutating so accumulated grads never alias each other.
        self.grad = g if self.grad is None else self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar for the common arithmetic.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_ACTIVE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_ACTIVE, "tape", None)


class Tape:
    """Ordered record of the primitives executed during a forward pass.

    One tape belongs to one thread; concurrent instances must each own
    their tape.  Entering a tape while another is active on the same
    thread is a bug and raises.
    """

    def __init__(self):
        self._steps: list[Callable[[], None]] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _ACTIVE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.tape = None
        return False

    def __len__(self) -> int:
        return len(self._steps)

    def record(self, step: Callable[[], None]) -> None:
        self._steps.append(step)

    def backward(self, loss: Tensor) -> None:
        """Seed the scalar loss with gradient 1 and replay all adjoints."""
        if loss.shape != (1, 1):
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        loss.accumulate_grad(np.ones((1, 1)))
        for step in reversed(self._steps):
            step()


def _record(out: Tensor, backward: Callable[[], None]) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(backward)


def lift(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an externally computed forward result as a tape-aware tensor.

    ``backward`` receives the output gradient and must call
    ``accumulate_grad`` on whichever inputs require it.  This is the hook
    fused operations (the recurrence, the feature-affinity reduction) use
    to register a single tape node for a multi-step computation.
    """
    out = Tensor._make(np.asarray(data, dtype=np.float64), any(t.requires_grad for t in inputs))

    def step():
        if out.grad is not None:
            backward(out.grad)

    _record(out, step)
    return out


# ---------------------------------------------------------------------------
# Broadcast support: same shape, (1,1) scalar, (1,q) row, (p,1) column.

def _broadcast_ok(sa: tuple[int, int], sb: tuple[int, int]) -> bool:
    if sa == sb:
        return True
    for s, o in ((sa, sb), (sb, sa)):
        if s == (1, 1):
            return True
        if s[0] == 1 and s[1] == o[1]:
            return True
        if s[1] == 1 and s[0] == o[0]:
            return True
    return False


def _reduce_to(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return g.sum().reshape(1, 1)
    if shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    return g.sum(axis=1, keepdims=True)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast "
                         "(supported: equal, scalar, single row, single column)")


# ---------------------------------------------------------------------------
# Arithmetic primitives.

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
    out = Tensor._make(a.data @ b.data, a.requires_grad or b.requires_grad)

    def step():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    _record(out, step)
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor._make(a.data.T.copy(), a.requires_grad)

    def step():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(out.grad.T)

    _record(out, step)
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = Tensor._make(a.data + b.data, a.requires_grad or b.requires_grad)

    def step():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g, b.shape))

    _record(out, step)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = Tensor._make(a.data - b.data, a.requires_grad or b.requires_grad)

    def step():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(-g, b.shape))

    _record(out, step)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = Tensor._make(a.data * b.data, a.requires_grad or b.requires_grad)

    def step():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g * a.data, b.shape))

    _record(out, step)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor._make(-a.data, a.requires_grad)

    def step():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(-out.grad)

    _record(out, step)
    return out


def scale(a, factor: float) -> Tensor:
    """Multiply by a non-learnable python scalar."""
    a = as_tensor(a)
    factor = float(factor)
    out = Tensor._make(a.data * factor, a.requires_grad)

    def step():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(out.grad * factor)

    _record(out, step)
    return out


# ---------------------------------------------------------------------------
# Elementwise nonlinearities.

def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor._make(y, a.requires_grad)

    def step():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(out.grad * (1.0 - y * y))

    _record(out, step)
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _stable_sigmoid(a.data)
    out = Tensor._make(y, a.requires_grad)

    def step():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(out.grad * y * (1.0 - y))

    _record(out, step)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor._make(y, a.requires_grad)

    def step():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(out.grad * y)

    _record(out, step)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor._make(np.log(a.data), a.requires_grad)

    def step():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(out.grad / a.data)

    _record(out, step)
    return out


def leaky_relu(a, alpha: float = LEAKY_RELU_SLOPE) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, alpha)
    out = Tensor._make(a.data * factor, a.requires_grad)

    def step():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(out.grad * factor)

    _record(out, step)
    return out


def softplus(a) -> Tensor:
    """log(1 + e^x), the smooth positive transform used for decay rates."""
    a = as_tensor(a)
    y = np.logaddexp(0.0, a.data)
    out = Tensor._make(y, a.requires_grad)
    sig = _stable_sigmoid(a.data)

    def step():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(out.grad * sig)

    _record(out, step)
    return out


# ---------------------------------------------------------------------------
# Softmax with masking.

def softmax_rows(a, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax with max-subtraction; masked entries become exactly 0.

    ``mask`` is boolean, either per-entry (p, q) or a single row (q,)
    broadcast over rows.  A fully masked row is an error because its
    normalization is undefined.
    """
    a = as_tensor(a)
    p, q = a.shape
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.ndim == 1:
            m = np.broadcast_to(m.reshape(1, -1), (p, q))
        if m.shape != (p, q):
            raise ShapeError(f"softmax_rows: mask shape {m.shape} does not match logits {a.shape}")
        live = m.sum(axis=1)
        if np.any(live == 0):
            row = int(np.argmin(live))
            raise ValueError(f"softmax_rows: row {row} is fully masked")
        z = np.where(m, a.data, -np.inf)
    else:
        m = None
        z = a.data
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    if m is not None:
        e = np.where(m, e, 0.0)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor._make(y, a.requires_grad)

    def step():
        g = out.grad
        if g is None or not a.requires_grad:
            return
        dot = (g * y).sum(axis=1, keepdims=True)
        a.accumulate_grad(y * (g - dot))

    _record(out, step)
    return out


# ---------------------------------------------------------------------------
# Reductions.

def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor._make(a.data.sum().reshape(1, 1), a.requires_grad)

    def step():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(np.full(a.shape, out.grad[0, 0]))

    _record(out, step)
    return out


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# Structural primitives.

def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows: empty input")
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise ShapeError(f"concat_rows: column counts differ: {[p.shape for p in parts]}")
    out = Tensor._make(np.concatenate([p.data for p in parts], axis=0),
                       any(p.requires_grad for p in parts))
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def step():
        g = out.grad
        if g is None:
            return
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[lo:hi, :])

    _record(out, step)
    return out


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_cols: empty input")
    rows = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows:
            raise ShapeError(f"concat_cols: row counts differ: {[p.shape for p in parts]}")
    out = Tensor._make(np.concatenate([p.data for p in parts], axis=1),
                       any(p.requires_grad for p in parts))
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def step():
        g = out.grad
        if g is None:
            return
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[:, lo:hi])

    _record(out, step)
    return out


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for shape {a.shape}")
    out = Tensor._make(a.data[start:stop, :].copy(), a.requires_grad)

    def step():
        if out.grad is not None and a.requires_grad:
            g = np.zeros(a.shape)
            g[start:stop, :] = out.grad
            a.accumulate_grad(g)

    _record(out, step)
    return out


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for shape {a.shape}")
    out = Tensor._make(a.data[:, start:stop].copy(), a.requires_grad)

    def step():
        if out.grad is not None and a.requires_grad:
            g = np.zeros(a.shape)
            g[:, start:stop] = out.grad
            a.accumulate_grad(g)

    _record(out, step)
    return out


def reshape(a, rows: int, cols: int) -> Tensor:
    a = as_tensor(a)
    if rows * cols != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as ({rows}, {cols})")
    out = Tensor._make(a.data.reshape(rows, cols).copy(), a.requires_grad)

    def step():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(out.grad.reshape(a.shape))

    _record(out, step)
    return out


def gather_rows(table, indices) -> Tensor:
    """Select rows of ``table`` by integer index (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        bad = idx[(idx < 0) | (idx >= table.shape[0])][0]
        raise IndexError(f"gather_rows: index {bad} out of range for table with "
                         f"{table.shape[0]} rows")
    out = Tensor._make(table.data[idx, :].copy(), table.requires_grad)

    def step():
        if out.grad is not None and table.requires_grad:
            g = np.zeros(table.shape)
            np.add.at(g, idx, out.grad)
            table.accumulate_grad(g)

    _record(out, step)
    return out


# ---------------------------------------------------------------------------
# Gradient extraction and verification.

def grads_by_name(tape: Tape, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Run the backward pass and collect one gradient array per named parameter.

    Parameters that did not participate in the forward pass get zeros, so
    the report always covers every name.
    """
    tape.backward(loss)
    out = {}
    for name, p in params.items():
        if not p.requires_grad:
            continue
        out[name] = np.zeros(p.shape) if p.grad is None else p.grad.copy()
    return out


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> dict[str, float]:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` evaluates the scalar objective from the current parameter values;
    it is executed once under a tape for the analytic gradients and then
    2x(entry count) more times, perturbed, for the numeric ones.  Returns
    the relative error max|g_ad - g_fd| / (max|g_fd| + eps) per parameter.
    A non-finite objective value aborts the check.

    The denominator floor absorbs the central-difference noise level
    (~machine epsilon * |f| / step); without it, parameters whose true
    gradient is below that level would report spurious errors.
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.item()):
        raise FloatingPointError(f"finite_diff_check: objective is non-finite ({loss.item()})")
    analytic = grads_by_name(tape, loss, params)

    report: dict[str, float] = {}
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g_fd = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        fd_flat = g_fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError(
                    f"finite_diff_check: non-finite objective while perturbing {name}[{i}]")
            fd_flat[i] = (hi - lo) / (2.0 * step)
        denom = np.abs(g_fd).max() + 1e-6
        report[name] = float(np.abs(analytic[name] - g_fd).max() / denom)
    return report


def check_gradients(report: Mapping[str, float], tolerance: float = 1e-4) -> list[str]:
    """Names whose relative error exceeds the tolerance."""
    return [name for name, err in report.items() if not (err < tolerance)]
