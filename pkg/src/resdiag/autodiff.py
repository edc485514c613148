"""Reverse-mode automatic differentiation on dense float64 matrices.

Every value is a 2-d array; scalars are shaped ``(1, 1)``.  Operations
record themselves on the innermost active :class:`Tape`, which replays
its entries in reverse to accumulate gradients.  Recording order is a
topological order of the expression DAG by construction, so the reverse
walk needs no extra bookkeeping.  Sparse matrices only ever appear as
constant left operands of :func:`spmm`.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import NumericsError

_ACTIVE = threading.local()

# When enabled, every op checks its output for NaN/Inf and raises
# NumericsError immediately; useful when chasing a divergence.
_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _tape_stack() -> list["Tape"]:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 matrix plus an optional gradient buffer of the same shape."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise ValueError(f"tensors are 2-d, got shape {arr.shape}")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.value[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of one forward pass.

    Used as a context manager; ops executed inside record a backward
    closure.  ``backward`` may be called once and walks entries last to
    first, skipping nodes no gradient reached.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False
        self.spmm_multiply_adds = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._entries.append((out, inputs, backward))

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise RuntimeError("tape already replayed; build a fresh tape per forward pass")
        self._consumed = True
        if loss.value.shape != (1, 1):
            raise ValueError(f"backward starts from a scalar, got shape {loss.value.shape}")
        loss.grad = np.ones((1, 1))
        for out, inputs, backward in reversed(self._entries):
            upstream = out.grad
            if upstream is None:
                continue
            pieces = backward(upstream)
            for tensor, piece in zip(inputs, pieces):
                if piece is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.value)
                if tensor.grad.shape != piece.shape:
                    raise ValueError(
                        f"gradient shape {piece.shape} does not match value shape {tensor.grad.shape}"
                    )
                tensor.grad += piece


def _finish(value: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    if _CHECK_FINITE and not np.isfinite(value).all():
        raise NumericsError("non-finite value produced during forward pass")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        tape.record(out, inputs, backward)
    return out


def _expect_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    _expect_same_shape(a, b, "add")
    return _finish(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _expect_same_shape(a, b, "sub")
    return _finish(a.value - b.value, (a, b), lambda g: (g, -g))


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """scale * x + shift with float constants."""
    scale = float(scale)
    return _finish(scale * x.value + float(shift), (x,), lambda g: (g * scale,))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _expect_same_shape(a, b, "elementwise_mul")
    av, bv = a.value, b.value
    return _finish(av * bv, (a, b), lambda g: (g * bv, g * av))


def elementwise_div(a: Tensor, b: Tensor) -> Tensor:
    _expect_same_shape(a, b, "elementwise_div")
    av, bv = a.value, b.value
    return _finish(av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _finish(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def spmm(a: sp.spmatrix, x: Tensor) -> Tensor:
    """Sparse constant @ dense tensor.

    The sparse operand carries no gradient.  Each call adds
    ``nnz(a) * cols(x)`` multiply-adds to the active tape's counter, and
    the backward pass (``aᵀ @ g``) adds the same amount again.
    """
    if not sp.issparse(a):
        raise TypeError("spmm expects a scipy sparse left operand")
    if a.shape[1] != x.shape[0]:
        raise ValueError(f"spmm: inner dims differ, {a.shape} @ {x.shape}")
    a = a.tocsr()
    cost = a.nnz * x.shape[1]
    tape = active_tape()
    if tape is not None:
        tape.spmm_multiply_adds += cost

    def backward(g):
        if tape is not None:
            tape.spmm_multiply_adds += cost
        return (a.T @ g,)

    return _finish(a @ x.value, (x,), backward)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of ``x``; backward scatter-adds into the source rows."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ValueError("gather_rows index must be 1-d")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError("gather_rows index out of range")

    def backward(g):
        piece = np.zeros_like(x.value)
        np.add.at(piece, index, g)
        return (piece,)

    return _finish(x.value[index], (x,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_rows needs at least one tensor")
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise ValueError("concat_rows: column counts differ")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return _finish(np.vstack([p.value for p in parts]), tuple(parts), backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x + bias with bias shaped (1, cols); broadcast down the rows."""
    if bias.shape != (1, x.shape[1]):
        raise ValueError(f"add_bias: bias shape {bias.shape} does not fit {x.shape}")
    return _finish(x.value + bias.value, (x, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))


def add_colvec(x: Tensor, col: Tensor) -> Tensor:
    """x + col with col shaped (rows, 1); broadcast across the columns."""
    if col.shape != (x.shape[0], 1):
        raise ValueError(f"add_colvec: column shape {col.shape} does not fit {x.shape}")
    return _finish(x.value + col.value, (x, col), lambda g: (g, g.sum(axis=1, keepdims=True)))


def mul_colvec(x: Tensor, col: Tensor) -> Tensor:
    """Row-wise scaling: x * col with col shaped (rows, 1)."""
    if col.shape != (x.shape[0], 1):
        raise ValueError(f"mul_colvec: column shape {col.shape} does not fit {x.shape}")
    xv, cv = x.value, col.value
    return _finish(xv * cv, (x, col), lambda g: (g * cv, (g * xv).sum(axis=1, keepdims=True)))


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner product, returns shape (rows, 1)."""
    _expect_same_shape(a, b, "row_dot")
    av, bv = a.value, b.value
    return _finish(
        (av * bv).sum(axis=1, keepdims=True),
        (a, b),
        lambda g: (g * bv, g * av),
    )


# Arguments to sigmoid/tanh/exp are clamped to this magnitude before the
# transcendental call; beyond it the outputs are saturated anyway.
SATURATION_BOUND = 40.0


def sigmoid(x: Tensor) -> Tensor:
    z = np.clip(x.value, -SATURATION_BOUND, SATURATION_BOUND)
    s = 1.0 / (1.0 + np.exp(-z))
    return _finish(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    z = np.clip(x.value, -SATURATION_BOUND, SATURATION_BOUND)
    t = np.tanh(z)
    return _finish(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x: Tensor) -> Tensor:
    z = np.clip(x.value, -SATURATION_BOUND, SATURATION_BOUND)
    e = np.exp(z)
    return _finish(e, (x,), lambda g: (g * e,))


def leaky_relu(x: Tensor, negative_slope: float = 0.01) -> Tensor:
    xv = x.value
    factor = np.where(xv >= 0.0, 1.0, float(negative_slope))
    return _finish(xv * factor, (x,), lambda g: (g * factor,))


def log(x: Tensor) -> Tensor:
    xv = x.value
    return _finish(np.log(xv), (x,), lambda g: (g / xv,))


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.value)
    return _finish(r, (x,), lambda g: (g * 0.5 / r,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xv = x.value
    inside = ((xv >= lo) & (xv <= hi)).astype(np.float64)
    return _finish(np.clip(xv, lo, hi), (x,), lambda g: (g * inside,))


def total_sum(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g):
        return (np.full(shape, g[0, 0]),)

    return _finish(np.array([[x.value.sum()]]), (x,), backward)


def mean(x: Tensor) -> Tensor:
    shape = x.shape
    size = x.value.size
    if size == 0:
        raise ValueError("mean of an empty tensor is undefined")

    def backward(g):
        return (np.full(shape, g[0, 0] / size),)

    return _finish(np.array([[x.value.mean()]]), (x,), backward)


def xavier_init(rows: int, cols: int, rng: np.random.Generator) -> Tensor:
    """Trainable tensor drawn from U(-b, b) with b = sqrt(6 / (rows + cols))."""
    if rows < 1 or cols < 1:
        raise ValueError(f"xavier_init needs positive dims, got ({rows}, {cols})")
    bound = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


class Adam:
    """Adam with bias correction over a fixed, ordered parameter list.

    ``step`` consumes the gradients: missing gradients are a caller bug
    and raise, and all gradient buffers are cleared after the update.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.params = list(params)
        if not self.params:
            raise ValueError("Adam needs at least one parameter")
        if learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {learning_rate}")
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.step_count = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise RuntimeError(
                    f"parameter {i} has no gradient; every parameter must be reached "
                    "by the loss before calling step()"
                )
            g = p.grad
            m, v = self._m[i], self._v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)
            p.value -= self.learning_rate * update
            p.grad = None
