"""Tape-based reverse-mode differentiation over dense numpy arrays.

Every primitive is registered as a (forward, vjp) pair and dispatched through
:func:`apply`. Operations are recorded only while a :class:`Tape` is active,
so inference and finite-difference probing run without graph overhead.
"""

from __future__ import annotations

import threading
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPES = {"fp32": np.float32, "fp64": np.float64}


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""

    def __init__(self, op_kind: str, detail: str = ""):
        self.op_kind = op_kind
        msg = f"non-finite values produced by op '{op_kind}'"
        super().__init__(msg + (f": {detail}" if detail else ""))


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable dense array that may participate in a recorded graph."""

    __array_ufunc__ = None
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad

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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return apply("add", [self, self._wrap(other)])

    def __radd__(self, other):
        return apply("add", [self._wrap(other), self])

    def __sub__(self, other):
        return apply("sub", [self, self._wrap(other)])

    def __rsub__(self, other):
        return apply("sub", [self._wrap(other), self])

    def __mul__(self, other):
        return apply("mul", [self, self._wrap(other)])

    def __rmul__(self, other):
        return apply("mul", [self._wrap(other), self])

    def __truediv__(self, other):
        return apply("div", [self, self._wrap(other)])

    def __rtruediv__(self, other):
        return apply("div", [self._wrap(other), self])

    def __neg__(self):
        return apply("neg", [self])

    def __matmul__(self, other):
        return apply("matmul", [self, self._wrap(other)])

    def __getitem__(self, index):
        return apply("slice", [self], index=index)

    def sum(self, axes=None, keepdims=False):
        return apply("sum", [self], axes=axes, keepdims=keepdims)

    def mean(self, axes=None, keepdims=False):
        return apply("mean", [self], axes=axes, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", [self], shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply("transpose", [self], axes=axes or None)

    @property
    def T(self):
        return self.transpose()


class Parameter(Tensor):
    """Trainable tensor with an accumulated gradient buffer."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError(f"{self.name}: shape {value.shape} != {self.data.shape}")
        self.data = value
        if self.grad.dtype != value.dtype:
            self.grad = self.grad.astype(value.dtype)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


@dataclass
class _Record:
    op_kind: str
    inputs: list
    output: Tensor
    ctx: Any
    attrs: dict


@dataclass
class Tape:
    """Ordered log of recorded ops plus the parameters they touched."""

    records: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def register(self, params: Iterable[Parameter]) -> None:
        for p in params:
            self.params.setdefault(id(p), p)

    @property
    def touched(self) -> set[str]:
        """Names of parameters that fed at least one recorded op."""
        names = set()
        for rec in self.records:
            for t in rec.inputs:
                if isinstance(t, Parameter):
                    names.add(t.name)
        return names

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.check_finite = True


_state = _State()


def current_tape() -> Tape | None:
    return _state.stack[-1] if _state.stack else None


class no_finite_check:
    """Context manager that disables the per-op NaN/Inf check."""

    def __enter__(self):
        self._prev = _state.check_finite
        _state.check_finite = False

    def __exit__(self, *exc):
        _state.check_finite = self._prev


# ---------------------------------------------------------------------------
# primitive registry

FORWARD: dict[str, Callable] = {}
BACKWARD: dict[str, Callable] = {}


def primitive(name: str):
    def deco(fwd):
        FORWARD[name] = fwd
        return fwd

    return deco


def vjp(name: str):
    def deco(bwd):
        BACKWARD[name] = bwd
        return bwd

    return deco


def apply(op_kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run primitive ``op_kind`` on ``inputs``; record it if a tape is active."""
    try:
        fwd = FORWARD[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    datas = [t.data for t in inputs]
    try:
        out, ctx = fwd(*datas, **attrs)
    except ValueError as exc:
        shapes = [d.shape for d in datas]
        raise ShapeError(f"{op_kind}: incompatible shapes {shapes}: {exc}") from exc
    if _state.check_finite and not np.isfinite(out).all():
        raise NonFiniteError(op_kind)
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.requires_grad = needs
    if needs:
        tape.records.append(_Record(op_kind, list(inputs), result, ctx, attrs))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor, tape: Tape, params: Iterable[Parameter] | None = None) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every registered parameter.

    Gradients are added to whatever the buffers already hold; callers zero them
    once per optimizer step.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        tape.register(params)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    param_grads: dict[int, np.ndarray] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = BACKWARD[rec.op_kind](g, rec.ctx, [t.data for t in rec.inputs],
                                         rec.output.data, **rec.attrs)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = _unbroadcast(gi, t.shape)
            store = param_grads if isinstance(t, Parameter) else grads
            key = id(t)
            if key in store:
                store[key] = store[key] + gi
            else:
                store[key] = gi
            if isinstance(t, Parameter):
                tape.params.setdefault(key, t)
    if id(loss) in grads and isinstance(loss, Parameter):
        param_grads[id(loss)] = grads[id(loss)]
    missing = []
    for key, p in tape.params.items():
        g = param_grads.get(key)
        if g is None:
            missing.append(p.name)
            continue
        p.grad = p.grad + g.astype(p.grad.dtype, copy=False)
    if missing:
        warnings.warn(f"{len(missing)} parameter(s) disconnected from loss; gradient is zero: "
                      + ", ".join(missing[:5]), stacklevel=2)


# ---------------------------------------------------------------------------
# elementwise


@primitive("add")
def _add_f(a, b):
    return a + b, None


@vjp("add")
def _add_b(g, ctx, ins, out):
    return g, g


@primitive("sub")
def _sub_f(a, b):
    return a - b, None


@vjp("sub")
def _sub_b(g, ctx, ins, out):
    return g, -g


@primitive("mul")
def _mul_f(a, b):
    return a * b, None


@vjp("mul")
def _mul_b(g, ctx, ins, out):
    a, b = ins
    return g * b, g * a


@primitive("div")
def _div_f(a, b):
    return a / b, None


@vjp("div")
def _div_b(g, ctx, ins, out):
    a, b = ins
    return g / b, -g * out / b


@primitive("neg")
def _neg_f(a):
    return -a, None


@vjp("neg")
def _neg_b(g, ctx, ins, out):
    return (-g,)


@primitive("exp")
def _exp_f(a):
    with np.errstate(over="ignore"):
        return np.exp(a), None


@vjp("exp")
def _exp_b(g, ctx, ins, out):
    return (g * out,)


@primitive("log")
def _log_f(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(a), None


@vjp("log")
def _log_b(g, ctx, ins, out):
    return (g / ins[0],)


@primitive("abs")
def _abs_f(a):
    return np.abs(a), None


@vjp("abs")
def _abs_b(g, ctx, ins, out):
    return (g * np.sign(ins[0]),)


@primitive("sigmoid")
def _sigmoid_f(a):
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out, None


@vjp("sigmoid")
def _sigmoid_b(g, ctx, ins, out):
    return (g * out * (1 - out),)


@primitive("relu")
def _relu_f(a):
    return np.maximum(a, 0), None


@vjp("relu")
def _relu_b(g, ctx, ins, out):
    return (g * (ins[0] > 0),)


_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


@primitive("gelu")
def _gelu_f(a):
    cdf = 0.5 * (1.0 + erf(a * a.dtype.type(_SQRT1_2)))
    return a * cdf, cdf


@vjp("gelu")
def _gelu_b(g, cdf, ins, out):
    a = ins[0]
    pdf = a.dtype.type(_INV_SQRT_2PI) * np.exp(-0.5 * a * a)
    return (g * (cdf + a * pdf),)


@primitive("maximum")
def _maximum_f(a, b):
    return np.maximum(a, b), None


@vjp("maximum")
def _maximum_b(g, ctx, ins, out):
    a, b = ins
    mask = a >= b
    return g * mask, g * ~mask


@primitive("minimum")
def _minimum_f(a, b):
    return np.minimum(a, b), None


@vjp("minimum")
def _minimum_b(g, ctx, ins, out):
    a, b = ins
    mask = a <= b
    return g * mask, g * ~mask


# ---------------------------------------------------------------------------
# linear algebra and normalisation


@primitive("matmul")
def _matmul_f(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner dims {a.shape[-1]} != {b.shape[-2]}")
    return a @ b, None


@vjp("matmul")
def _matmul_b(g, ctx, ins, out):
    a, b = ins
    return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


@primitive("softmax")
def _softmax_f(a, axis=-1):
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True), None


@vjp("softmax")
def _softmax_b(g, ctx, ins, out, axis=-1):
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


@primitive("log_softmax")
def _log_softmax_f(a, axis=-1):
    z = a - a.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True)), None


@vjp("log_softmax")
def _log_softmax_b(g, ctx, ins, out, axis=-1):
    return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


@primitive("layer_norm")
def _layer_norm_f(a, axis=-1, eps=1e-5):
    mu = a.mean(axis=axis, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


@vjp("layer_norm")
def _layer_norm_b(g, inv, ins, out, axis=-1, eps=1e-5):
    gm = g.mean(axis=axis, keepdims=True)
    gxm = (g * out).mean(axis=axis, keepdims=True)
    return (inv * (g - gm - out * gxm),)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


@primitive("sum")
def _sum_f(a, axes=None, keepdims=False):
    return a.sum(axis=_norm_axes(axes, a.ndim), keepdims=keepdims), None


@vjp("sum")
def _sum_b(g, ctx, ins, out, axes=None, keepdims=False):
    a = ins[0]
    return (_expand(g, a.shape, _norm_axes(axes, a.ndim), keepdims),)


@primitive("mean")
def _mean_f(a, axes=None, keepdims=False):
    return a.mean(axis=_norm_axes(axes, a.ndim), keepdims=keepdims), None


@vjp("mean")
def _mean_b(g, ctx, ins, out, axes=None, keepdims=False):
    a = ins[0]
    ax = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[i] for i in ax])) if ax else 1
    return (_expand(g, a.shape, ax, keepdims) / a.dtype.type(count),)


def _extreme_b(g, ins, out, axes, keepdims):
    a = ins[0]
    ax = _norm_axes(axes, a.ndim)
    hit = a == _expand(out, a.shape, ax, keepdims)
    # ties share the gradient evenly
    share = hit / hit.sum(axis=ax, keepdims=True)
    return (_expand(g, a.shape, ax, keepdims) * share,)


@primitive("amax")
def _amax_f(a, axes=None, keepdims=False):
    return a.max(axis=_norm_axes(axes, a.ndim), keepdims=keepdims), None


@vjp("amax")
def _amax_b(g, ctx, ins, out, axes=None, keepdims=False):
    return _extreme_b(g, ins, out, axes, keepdims)


@primitive("amin")
def _amin_f(a, axes=None, keepdims=False):
    return a.min(axis=_norm_axes(axes, a.ndim), keepdims=keepdims), None


@vjp("amin")
def _amin_b(g, ctx, ins, out, axes=None, keepdims=False):
    return _extreme_b(g, ins, out, axes, keepdims)


# ---------------------------------------------------------------------------
# shape manipulation


@primitive("reshape")
def _reshape_f(a, shape):
    return a.reshape(shape), None


@vjp("reshape")
def _reshape_b(g, ctx, ins, out, shape):
    return (g.reshape(ins[0].shape),)


@primitive("transpose")
def _transpose_f(a, axes=None):
    return np.transpose(a, axes), None


@vjp("transpose")
def _transpose_b(g, ctx, ins, out, axes=None):
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


@primitive("concat")
def _concat_f(*arrays, axis=0):
    sizes = [a.shape[axis] for a in arrays]
    return np.concatenate(arrays, axis=axis), np.cumsum(sizes)[:-1]


@vjp("concat")
def _concat_b(g, splits, ins, out, axis=0):
    return tuple(np.split(g, splits, axis=axis))


@primitive("slice")
def _slice_f(a, index):
    return np.array(a[index]), None


@vjp("slice")
def _slice_b(g, ctx, ins, out, index):
    full = np.zeros_like(ins[0])
    np.add.at(full, index, g)
    return (full,)


@primitive("broadcast")
def _broadcast_f(a, shape):
    return np.array(np.broadcast_to(a, shape)), None


@vjp("broadcast")
def _broadcast_b(g, ctx, ins, out, shape):
    return (_unbroadcast(g, ins[0].shape),)


# ---------------------------------------------------------------------------
# functional helpers


def exp(x):
    return apply("exp", [x])


def log(x):
    return apply("log", [x])


def abs(x):  # noqa: A001 - mirrors numpy naming
    return apply("abs", [x])


def sigmoid(x):
    return apply("sigmoid", [x])


def relu(x):
    return apply("relu", [x])


def gelu(x):
    return apply("gelu", [x])


def maximum(a, b):
    return apply("maximum", [a, b])


def minimum(a, b):
    return apply("minimum", [a, b])


def softmax(x, axis=-1):
    return apply("softmax", [x], axis=axis)


def log_softmax(x, axis=-1):
    return apply("log_softmax", [x], axis=axis)


def layer_norm(x, axis=-1, eps=1e-5):
    return apply("layer_norm", [x], axis=axis, eps=eps)


def amax(x, axes=None, keepdims=False):
    return apply("amax", [x], axes=axes, keepdims=keepdims)


def amin(x, axes=None, keepdims=False):
    return apply("amin", [x], axes=axes, keepdims=keepdims)


def concat(xs, axis=0):
    return apply("concat", list(xs), axis=axis)


def broadcast(x, shape):
    return apply("broadcast", [x], shape=tuple(shape))


def constant(value, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_error: float
    per_param: list  # (name, worst error, flat index), sorted worst first


def grad_check_report(scalar_fn: Callable[[], Tensor], params: Sequence[Parameter],
                      step: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of ``scalar_fn`` against central differences.

    The error for each entry is ``|analytic - numeric| / max(1, |numeric|)``.
    All parameters must be fp64.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs fp64 parameters; {p.name} is {p.dtype}")
        p.zero_grad()
    with Tape() as tape:
        loss = scalar_fn()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        backward(loss, tape, params)

    def probe() -> float:
        val = float(scalar_fn().data)
        if not np.isfinite(val):
            raise NonFiniteError("grad_check", "finite-difference probe")
        return val

    per_param = []
    worst = 0.0
    for p in params:
        analytic = p.grad.ravel()
        base = p.data.copy()
        flat = base.ravel()
        errs = np.empty(flat.size)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + step
            p.data = bumped.reshape(base.shape)
            plus = probe()
            bumped[i] = flat[i] - step
            p.data = bumped.reshape(base.shape)
            minus = probe()
            numeric = (plus - minus) / (2 * step)
            errs[i] = np.abs(analytic[i] - numeric) / max(1.0, np.abs(numeric))
        p.data = base
        idx = int(errs.argmax()) if errs.size else 0
        e = float(errs.max()) if errs.size else 0.0
        per_param.append((p.name, e, idx))
        worst = max(worst, e)
    per_param.sort(key=lambda r: r[1], reverse=True)
    return GradCheckReport(worst, per_param)


def grad_check(scalar_fn: Callable[[], Tensor], params: Sequence[Parameter],
               step: float = 1e-6) -> float:
    return grad_check_report(scalar_fn, params, step).max_error
