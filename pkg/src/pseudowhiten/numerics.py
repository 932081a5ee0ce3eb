"""Dense float64 tensors with reverse-mode automatic differentiation.

The substrate for everything else in the package: a small Tensor type backed
by numpy, a per-forward tape consumed by a single backward pass, the
operations needed by the training losses (matmul, elementwise arithmetic,
reductions, per-column statistics), z-score normalization, the Adam optimizer
with decoupled weight decay, and the two learning-rate schedules used by the
training and evaluation phases.

Design notes:

* Everything is float64; desk-scale gradient checks need the headroom.
* Ops record onto an implicit "current" tape only while some input requires
  gradients and grad mode is on.  ``backward`` walks that tape in reverse,
  then consumes it; a second backward on the same tape is an error.
* Tensors from an already-consumed tape act as leaves in later graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "no_grad",
    "matmul",
    "transpose",
    "reshape",
    "add",
    "subtract",
    "multiply",
    "divide",
    "negate",
    "scalar_multiply",
    "power",
    "relu",
    "exp",
    "log",
    "tensor_sum",
    "tensor_mean",
    "tensor_from_op",
    "accumulate_grad",
    "col_sum",
    "col_mean",
    "col_std",
    "row_sum",
    "zscore_normalize",
    "backward",
    "AdamState",
    "init_adam",
    "adam_step",
    "collect_grads",
    "zero_grads",
    "LrSchedule",
    "lr_schedule",
]

STD_EPS = 1e-12
# Tiny positive shift inside square roots so that the derivative of sqrt
# stays finite at exactly-zero variance (the masked path then sees 0 * finite
# instead of 0 * inf).
_SQRT_GUARD = 1e-300


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class TapeError(RuntimeError):
    """Backward invoked on a tensor that is not a live tape output."""


class Tape:
    """Ordered record of one forward pass; consumed by a single backward."""

    __slots__ = ("nodes", "consumed")

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self.consumed = False


_CURRENT_TAPE: Tape | None = None
_GRAD_ENABLED = True


def _active_tape() -> Tape:
    global _CURRENT_TAPE
    if _CURRENT_TAPE is None or _CURRENT_TAPE.consumed:
        _CURRENT_TAPE = Tape()
    return _CURRENT_TAPE


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self) -> "no_grad":
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc) -> None:
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev


class Tensor:
    """Dense row-major float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite (no NaN/Inf)")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: int | None = None
        self.tape: Tape | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        out = _make(self.data, False)
        return out

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar; the module-level functions are the real API ----

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __neg__(self):
        return negate(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def backward(self) -> None:
        backward(self)


def _make(data: np.ndarray, requires_grad: bool) -> Tensor:
    """Internal constructor that skips validation (data already float64)."""
    t = object.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = requires_grad
    t.node = None
    t.tape = None
    return t


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return _make(np.asarray(x, dtype=np.float64), False)


def _record(out: Tensor, fn: Callable[[np.ndarray], None]) -> None:
    tape = _active_tape()
    out.tape = tape
    out.node = len(tape.nodes)
    tape.nodes.append((out, fn))


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Callers must hand over arrays the receiver may own: fresh allocations,
    # or copies where the upstream gradient would be passed through as-is.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if g.base is None and g.flags.owndata else g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ts) in enumerate(zip(g.shape, shape)):
        if ts == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    if g.shape != shape:
        g = g.reshape(shape)
    return g


def tensor_from_op(data, inputs: tuple, backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap a custom fused operation as a single tape node.

    ``backward_fn`` receives the upstream gradient and is responsible for
    calling :func:`accumulate_grad` on each input it differentiates.
    """
    out = _make(np.asarray(data, dtype=np.float64), any(t.requires_grad for t in inputs))
    if out.requires_grad and _GRAD_ENABLED:
        _record(out, backward_fn)
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution to a tensor (for custom op backwards)."""
    _accum(t, np.asarray(g, dtype=np.float64))


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{op}: produced non-finite values")
    return arr


def _guarded(fn, op: str) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return _check_finite(fn(), op)


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Forward operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} vs {b.shape}")
    out = _make(a.data @ b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad and _GRAD_ENABLED:
        ad, bd = a.data, b.data

        def fn(g: np.ndarray) -> None:
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)

        _record(out, fn)
    return out


def transpose(a: Tensor) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expects a 2-D operand, got {a.shape}")
    out = _make(np.ascontiguousarray(a.data.T), a.requires_grad)
    if out.requires_grad and _GRAD_ENABLED:

        def fn(g: np.ndarray) -> None:
            _accum(a, np.ascontiguousarray(g.T))

        _record(out, fn)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = _make(a.data.reshape(shape).copy(), a.requires_grad)
    if out.requires_grad and _GRAD_ENABLED:
        orig = a.shape

        def fn(g: np.ndarray) -> None:
            _accum(a, g.reshape(orig).copy())

        _record(out, fn)
    return out


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("add", a, b)
    out = _make(a.data + b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad and _GRAD_ENABLED:
        sa, sb = a.shape, b.shape

        def fn(g: np.ndarray) -> None:
            ga = _unbroadcast(g, sa)
            _accum(a, ga.copy() if ga is g else ga)
            gb = _unbroadcast(g, sb)
            _accum(b, gb.copy() if gb is g else gb)

        _record(out, fn)
    return out


def subtract(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("subtract", a, b)
    out = _make(a.data - b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad and _GRAD_ENABLED:
        sa, sb = a.shape, b.shape

        def fn(g: np.ndarray) -> None:
            ga = _unbroadcast(g, sa)
            _accum(a, ga.copy() if ga is g else ga)
            _accum(b, _unbroadcast(-g, sb))

        _record(out, fn)
    return out


def multiply(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("multiply", a, b)
    out = _make(a.data * b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad and _GRAD_ENABLED:
        ad, bd = a.data, b.data
        sa, sb = a.shape, b.shape

        def fn(g: np.ndarray) -> None:
            _accum(a, _unbroadcast(g * bd, sa))
            _accum(b, _unbroadcast(g * ad, sb))

        _record(out, fn)
    return out


def divide(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("divide", a, b)
    out = _make(_guarded(lambda: a.data / b.data, "divide"), a.requires_grad or b.requires_grad)
    if out.requires_grad and _GRAD_ENABLED:
        ad, bd = a.data, b.data
        sa, sb = a.shape, b.shape

        def fn(g: np.ndarray) -> None:
            _accum(a, _unbroadcast(g / bd, sa))
            _accum(b, _unbroadcast(-g * ad / (bd * bd), sb))

        _record(out, fn)
    return out


def negate(a) -> Tensor:
    a = _wrap(a)
    out = _make(-a.data, a.requires_grad)
    if out.requires_grad and _GRAD_ENABLED:

        def fn(g: np.ndarray) -> None:
            _accum(a, -g)

        _record(out, fn)
    return out


def scalar_multiply(a, s: float) -> Tensor:
    a = _wrap(a)
    s = float(s)
    out = _make(a.data * s, a.requires_grad)
    if out.requires_grad and _GRAD_ENABLED:

        def fn(g: np.ndarray) -> None:
            _accum(a, g * s)

        _record(out, fn)
    return out


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    p = float(p)
    out = _make(_guarded(lambda: a.data**p, "power"), a.requires_grad)
    if out.requires_grad and _GRAD_ENABLED:
        ad = a.data

        def fn(g: np.ndarray) -> None:
            _accum(a, g * p * ad ** (p - 1.0))

        _record(out, fn)
    return out


def relu(a) -> Tensor:
    a = _wrap(a)
    out = _make(np.maximum(a.data, 0.0), a.requires_grad)
    if out.requires_grad and _GRAD_ENABLED:
        mask = a.data > 0.0

        def fn(g: np.ndarray) -> None:
            _accum(a, g * mask)

        _record(out, fn)
    return out


def exp(a) -> Tensor:
    a = _wrap(a)
    out = _make(_guarded(lambda: np.exp(a.data), "exp"), a.requires_grad)
    if out.requires_grad and _GRAD_ENABLED:
        od = out.data

        def fn(g: np.ndarray) -> None:
            _accum(a, g * od)

        _record(out, fn)
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    out = _make(_guarded(lambda: np.log(a.data), "log"), a.requires_grad)
    if out.requires_grad and _GRAD_ENABLED:
        ad = a.data

        def fn(g: np.ndarray) -> None:
            _accum(a, g / ad)

        _record(out, fn)
    return out


def tensor_sum(a) -> Tensor:
    a = _wrap(a)
    out = _make(np.array(a.data.sum()), a.requires_grad)
    if out.requires_grad and _GRAD_ENABLED:
        shape = a.shape

        def fn(g: np.ndarray) -> None:
            _accum(a, np.full(shape, float(g)))

        _record(out, fn)
    return out


def tensor_mean(a) -> Tensor:
    a = _wrap(a)
    out = _make(np.array(a.data.mean()), a.requires_grad)
    if out.requires_grad and _GRAD_ENABLED:
        shape, n = a.shape, a.size

        def fn(g: np.ndarray) -> None:
            _accum(a, np.full(shape, float(g) / n))

        _record(out, fn)
    return out


def _col_reduce(a: Tensor, scale: float) -> Tensor:
    out = _make(a.data.sum(axis=0) * scale, a.requires_grad)
    if out.requires_grad and _GRAD_ENABLED:
        n = a.shape[0]

        def fn(g: np.ndarray) -> None:
            _accum(a, np.tile(g * scale, (n, 1)))

        _record(out, fn)
    return out


def col_sum(a) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"col_sum: expects a 2-D operand, got {a.shape}")
    return _col_reduce(a, 1.0)


def col_mean(a) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"col_mean: expects a 2-D operand, got {a.shape}")
    return _col_reduce(a, 1.0 / a.shape[0])


def col_std(a) -> Tensor:
    """Per-column population standard deviation, differentiable."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"col_std: expects a 2-D operand, got {a.shape}")
    if a.shape[0] < 2:
        raise ShapeError("col_std: needs at least 2 rows")
    centered = subtract(a, col_mean(a))
    var = col_mean(multiply(centered, centered))
    return power(add(var, _SQRT_GUARD), 0.5)


def row_sum(a) -> Tensor:
    """Sum along axis 1, keeping the row axis ([N x D] -> [N x 1])."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"row_sum: expects a 2-D operand, got {a.shape}")
    out = _make(a.data.sum(axis=1, keepdims=True), a.requires_grad)
    if out.requires_grad and _GRAD_ENABLED:
        d = a.shape[1]

        def fn(g: np.ndarray) -> None:
            _accum(a, np.tile(g, (1, d)))

        _record(out, fn)
    return out


def zscore_normalize(z, eps: float = STD_EPS) -> Tensor:
    """Center each column and divide by its population standard deviation.

    Columns whose std falls below ``eps`` are returned mean-centered with a
    unit divisor instead of blowing up.
    """
    z = _wrap(z)
    if z.ndim != 2:
        raise ShapeError(f"zscore_normalize: expects a 2-D operand, got {z.shape}")
    if z.shape[0] < 2:
        raise ShapeError("zscore_normalize: needs at least 2 rows (std undefined)")
    centered = subtract(z, col_mean(z))
    var = col_mean(multiply(centered, centered))
    std = power(add(var, _SQRT_GUARD), 0.5)
    std_data = np.sqrt(var.data)
    keep = (std_data >= eps).astype(np.float64)
    divisor = add(multiply(std, _wrap(keep)), _wrap(1.0 - keep))
    return divide(centered, divisor)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss; consumes the tape."""
    global _CURRENT_TAPE
    if loss.data.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise TapeError("backward: loss is not on a tape (nothing requires grad)")
    if tape.consumed:
        raise TapeError("backward: tape already consumed by a previous backward")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape.nodes):
        if out.grad is not None:
            fn(out.grad)
    tape.consumed = True
    tape.nodes.clear()
    if _CURRENT_TAPE is tape:
        _CURRENT_TAPE = None


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates plus hyperparameters for Adam.

    Moments live in one flat buffer per state; the ``m``/``v`` dicts expose
    per-parameter views of it, so the fused whole-state update and the
    per-parameter fallback see the same storage (and produce bit-identical
    results, since the update is elementwise).
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    flat_m: np.ndarray | None = None
    flat_v: np.ndarray | None = None
    layout: list[tuple[str, int, int]] = field(default_factory=list)  # (name, offset, size)


def init_adam(
    params: Mapping[str, Tensor],
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamState:
    state = AdamState(learning_rate, beta1, beta2, epsilon, weight_decay)
    total = sum(p.data.size for p in params.values())
    state.flat_m = np.zeros(total)
    state.flat_v = np.zeros(total)
    offset = 0
    for name, p in params.items():
        size = p.data.size
        state.layout.append((name, offset, size))
        state.m[name] = state.flat_m[offset : offset + size].reshape(p.data.shape)
        state.v[name] = state.flat_v[offset : offset + size].reshape(p.data.shape)
        offset += size
    return state


def _adam_update(p: np.ndarray, g: np.ndarray, m, v, state: AdamState, bc1: float, bc2: float) -> None:
    lr = state.learning_rate
    if state.weight_decay:
        p *= 1.0 - lr * state.weight_decay
    m *= state.beta1
    m += (1.0 - state.beta1) * g
    v *= state.beta2
    v += (1.0 - state.beta2) * (g * g)
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> None:
    """One Adam update in place.

    Decoupled weight decay shrinks parameters before the Adam delta.
    Parameters absent from ``grads`` are left untouched (including decay),
    matching the convention that untouched leaves receive no update.  When
    every registered parameter has a gradient the update runs fused over
    the flat moment buffers.
    """
    state.step_count += 1
    bc1 = 1.0 - state.beta1**state.step_count
    bc2 = 1.0 - state.beta2**state.step_count

    fused = (
        state.flat_m is not None
        and len(state.layout) == len(params)
        and all(name in grads and grads[name] is not None for name, _, _ in state.layout)
    )
    if fused:
        flat_g = np.concatenate([np.ravel(grads[name]) for name, _, _ in state.layout])
        if not np.all(np.isfinite(flat_g)):
            fused = False  # fall through to report the offending parameter
        else:
            flat_p = np.concatenate(
                [np.ravel(params[name].data) for name, _, _ in state.layout]
            )
            _adam_update(flat_p, flat_g, state.flat_m, state.flat_v, state, bc1, bc2)
            for name, offset, size in state.layout:
                p = params[name]
                p.data[...] = flat_p[offset : offset + size].reshape(p.data.shape)
            return

    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != param shape {p.data.shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"adam_step: non-finite gradient for parameter '{name}'")
        if name not in state.m:
            raise KeyError(f"adam_step: parameter '{name}' was not registered with init_adam")
        _adam_update(p.data, g, state.m[name], state.v[name], state, bc1, bc2)


def collect_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.grad for name, p in params.items() if p.grad is not None}


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# Learning-rate schedules
# ---------------------------------------------------------------------------


@dataclass
class LrSchedule:
    """Either a constant-warmup/constant-main schedule or exponential decay."""

    kind: str = "warmup_constant"  # warmup_constant | exp_decay
    warmup_epochs: int = 0
    warmup_lr: float = 0.15
    main_lr: float = 1e-3
    total_epochs: int = 0
    lr_start: float = 1e-3
    lr_end: float = 1e-6


def lr_schedule(epoch: int, sched: LrSchedule) -> float:
    if epoch < 0:
        raise ValueError("lr_schedule: epoch must be >= 0")
    if sched.kind == "warmup_constant":
        return sched.warmup_lr if epoch < sched.warmup_epochs else sched.main_lr
    if sched.kind == "exp_decay":
        if sched.total_epochs <= 1:
            return sched.lr_start
        e = min(epoch, sched.total_epochs - 1)
        frac = e / (sched.total_epochs - 1)
        return sched.lr_start * math.exp(frac * math.log(sched.lr_end / sched.lr_start))
    raise ValueError(f"lr_schedule: unknown schedule kind '{sched.kind}'")
