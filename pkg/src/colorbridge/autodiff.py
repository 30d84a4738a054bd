"""Dense float32 tensors with reverse-mode automatic differentiation.

Differentiable operations are recorded on an explicit :class:`ComputeTape`
while one is active (used as a context manager).  ``ComputeTape.backward``
replays the records in exact reverse execution order, once each, and
accumulates ``dLoss/dtheta`` into the ``grad`` buffer of every trainable
:class:`Variable` on the path to the loss.  Intermediate gradients flow
through an internal buffer keyed by node, so the ``grad`` field of
non-trainable Variables is never written.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Variable",
    "ComputeTape",
    "ShapeMismatch",
    "NonFiniteError",
    "TapeError",
    "working_precision",
    "as_variable",
    "record_op",
    "active_tape",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "max_with",
    "vsum",
    "vmean",
    "finite_diff_check",
]

_STATE = threading.local()


def _dtype():
    return getattr(_STATE, "dtype", np.float32)


class working_precision:
    """Temporarily override the dtype new tensors are created with.

    Production code runs entirely in float32.  Test harnesses (finite
    differences in particular) re-enter the forward pass under float64 so
    that the comparison tolerance is not dominated by float32 rounding.
    """

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype)

    def __enter__(self):
        self._saved = _dtype()
        _STATE.dtype = self.dtype
        return self

    def __exit__(self, *exc):
        _STATE.dtype = self._saved
        return False


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the attempted operation."""

    def __init__(self, op, left, right):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{op}: shape mismatch {self.left} vs {self.right}")


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or infinity."""


class TapeError(RuntimeError):
    """Misuse of a ComputeTape (empty tape, non-scalar loss, ...)."""


class Tensor:
    """Dense n-dimensional array of 32-bit floats.

    Shape entries are positive; a scalar is represented with shape (1,).
    """

    __slots__ = ("data",)

    def __init__(self, data, copy=True):
        if isinstance(data, Tensor):
            data = data.data
        dt = _dtype()
        if copy:
            arr = np.array(data, dtype=dt)
        else:
            arr = np.asarray(data)
            if arr.dtype != dt:
                arr = arr.astype(dt)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ShapeMismatch("tensor", arr.shape, ("non-empty",))
        self.data = arr

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return int(self.data.size)

    def copy(self):
        return Tensor(self.data, copy=True)

    def item(self):
        if self.size != 1:
            raise ShapeMismatch("item", self.shape, (1,))
        return float(self.data.reshape(-1)[0])

    @staticmethod
    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=_dtype()), copy=False)

    @staticmethod
    def full(shape, value):
        return Tensor(np.full(shape, value, dtype=_dtype()), copy=False)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype})"


class Variable:
    """A tensor participating in the autodiff graph.

    ``trainable=True`` marks a leaf whose ``grad`` buffer receives
    ``dLoss/dvalue`` during backward; optimizers update exactly these.
    Variables produced by recorded operations stay non-trainable and their
    ``grad`` is left untouched (gradient flows through tape-internal
    buffers instead).
    """

    __slots__ = ("value", "grad", "trainable", "name", "_tracked")

    def __init__(self, value, trainable=False, name=None):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.grad = Tensor.zeros(self.value.shape)
        self.trainable = bool(trainable)
        self.name = name
        self._tracked = self.trainable

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.data[...] = 0.0

    def detach(self):
        return Variable(self.value.copy(), trainable=False, name=self.name)

    def __repr__(self):
        flag = "trainable" if self.trainable else "constant"
        return f"Variable(shape={tuple(self.shape)}, {flag}, name={self.name!r})"

    # Operator sugar routed through `elementwise`.
    def __add__(self, other):
        return elementwise("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", other, self)

    def __neg__(self):
        return elementwise("mul", self, -1.0)


def as_variable(x):
    """Wrap plain data as a constant Variable; pass Variables through."""
    if isinstance(x, Variable):
        return x
    return Variable(x if isinstance(x, Tensor) else Tensor(x))


def active_tape():
    stack = getattr(_STATE, "tapes", None)
    if stack:
        return stack[-1]
    return None


class ComputeTape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self._records = []

    def __len__(self):
        return len(self._records)

    def __enter__(self):
        stack = getattr(_STATE, "tapes", None)
        if stack is None:
            stack = _STATE.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _STATE.tapes.pop()
        return False

    def backward(self, loss):
        """Accumulate dLoss/dtheta into every trainable Variable on the path.

        The loss must be a scalar produced while this tape was active.
        Each recorded node is visited exactly once, in reverse execution
        order; gradients for repeated uses of a Variable accumulate.
        """
        if not isinstance(loss, Variable):
            raise TapeError(f"backward expects a Variable, got {type(loss).__name__}")
        if loss.value.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
        if not self._records:
            raise TapeError("backward on an empty tape")
        flow = {id(loss): np.ones(loss.value.shape, dtype=loss.value.data.dtype)}
        if loss.trainable:
            loss.grad.data += flow[id(loss)]
        for out, inputs, vjp in reversed(self._records):
            g = flow.pop(id(out), None)
            if g is None:
                continue
            partials = vjp(g)
            for var, gi in zip(inputs, partials):
                if gi is None:
                    continue
                if var.trainable:
                    var.grad.data += gi.reshape(var.grad.shape).astype(
                        var.grad.data.dtype, copy=False
                    )
                elif var._tracked:
                    acc = flow.get(id(var))
                    flow[id(var)] = gi if acc is None else acc + gi


def record_op(value, inputs, vjp):
    """Create the output Variable of an op and record it if tracking applies.

    ``vjp(g)`` must return one gradient array (or None) per input, in
    order.  It is only ever invoked for outputs on the path to the loss.
    """
    out = Variable(Tensor(value, copy=False))
    tape = active_tape()
    if tape is not None and any(v._tracked for v in inputs):
        out._tracked = True
        tape._records.append((out, inputs, vjp))
    return out


def needs_grad(var):
    """True when a vjp should bother producing this input's partial."""
    return var.trainable or var._tracked


_ELEMENTWISE_KINDS = ("add", "sub", "mul", "div", "max-with")


def _unbroadcast(g, shape):
    # Only scalar-with-tensor broadcasting exists; reduce back to (1,).
    if tuple(shape) == (1,) and g.shape != (1,):
        return g.sum(dtype=g.dtype).reshape(1)
    return g


def elementwise(kind, a, b):
    """Elementwise combine two tensors of equal shape, or tensor and scalar."""
    if kind not in _ELEMENTWISE_KINDS:
        raise ValueError(f"unknown elementwise kind {kind!r}; expected one of {_ELEMENTWISE_KINDS}")
    a = as_variable(a)
    b = as_variable(b)
    ash, bsh = a.shape, b.shape
    if ash != bsh and ash != (1,) and bsh != (1,):
        raise ShapeMismatch(f"elementwise:{kind}", ash, bsh)
    x, y = a.value.data, b.value.data
    if kind == "add":
        out = x + y

        def vjp(g):
            return (
                _unbroadcast(g, ash) if needs_grad(a) else None,
                _unbroadcast(g, bsh) if needs_grad(b) else None,
            )

    elif kind == "sub":
        out = x - y

        def vjp(g):
            return (
                _unbroadcast(g, ash) if needs_grad(a) else None,
                _unbroadcast(-g, bsh) if needs_grad(b) else None,
            )

    elif kind == "mul":
        out = x * y

        def vjp(g):
            return (
                _unbroadcast(g * y, ash) if needs_grad(a) else None,
                _unbroadcast(g * x, bsh) if needs_grad(b) else None,
            )

    elif kind == "div":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = x / y
        if not np.isfinite(out).all():
            raise NonFiniteError("div: non-finite result")

        def vjp(g):
            return (
                _unbroadcast(g / y, ash) if needs_grad(a) else None,
                _unbroadcast(-g * x / (y * y), bsh) if needs_grad(b) else None,
            )

    else:  # max-with
        out = np.maximum(x, y)
        take_a = x >= y  # ties send the gradient to the first operand

        def vjp(g):
            return (
                _unbroadcast(g * take_a, ash) if needs_grad(a) else None,
                _unbroadcast(g * (~take_a), bsh) if needs_grad(b) else None,
            )

    return record_op(out, (a, b), vjp)


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def div(a, b):
    return elementwise("div", a, b)


def max_with(a, b):
    return elementwise("max-with", a, b)


def vsum(x):
    """Sum of all elements, as a scalar of shape (1,)."""
    x = as_variable(x)
    shape = x.shape
    out = x.value.data.sum(dtype=x.value.data.dtype).reshape(1)

    def vjp(g):
        return (np.full(shape, g.reshape(-1)[0], dtype=g.dtype),)

    return record_op(out, (x,), vjp)


def vmean(x):
    """Mean of all elements, as a scalar of shape (1,)."""
    x = as_variable(x)
    shape = x.shape
    n = x.value.size
    out = (x.value.data.sum(dtype=x.value.data.dtype) / n).reshape(1)

    def vjp(g):
        return (np.full(shape, g.reshape(-1)[0] / n, dtype=g.dtype),)

    return record_op(out, (x,), vjp)


def _eval_scalar(fn, var):
    out = fn(var)
    if not isinstance(out, Variable) or out.value.size != 1:
        raise TapeError("finite_diff_check: fn must return a scalar Variable")
    val = float(out.value.data.reshape(-1)[0])
    if not np.isfinite(val):
        raise NonFiniteError("finite_diff_check: fn produced a non-finite value")
    return val


def finite_diff_check(fn, x, step=1e-3):
    """Max relative disagreement between analytic and central-difference grads.

    ``fn`` maps one Variable to a scalar Variable and must be re-runnable
    (it is evaluated 2*size + 1 times).  Everything is evaluated under
    float64 so the returned error reflects the gradient code, not float32
    rounding.  Relative error per coordinate is
    ``|analytic - central| / max(1e-8, |central|)``.
    """
    if step <= 0:
        raise ValueError(f"finite_diff_check: step must be positive, got {step}")
    with working_precision(np.float64):
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        var = Variable(Tensor(np.array(data, dtype=np.float64)), trainable=True)
        with ComputeTape() as tape:
            out = fn(var)
            if not isinstance(out, Variable) or out.value.size != 1:
                raise TapeError("finite_diff_check: fn must return a scalar Variable")
            if not np.isfinite(out.value.data).all():
                raise NonFiniteError("finite_diff_check: fn produced a non-finite value")
        tape.backward(out)
        analytic = var.grad.data.reshape(-1).copy()

        flat = var.value.data.reshape(-1)
        central = np.empty_like(analytic)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _eval_scalar(fn, var)
            flat[i] = orig - step
            fm = _eval_scalar(fn, var)
            flat[i] = orig
            central[i] = (fp - fm) / (2.0 * step)

        rel = np.abs(analytic - central) / np.maximum(1e-8, np.abs(central))
        return float(rel.max())
