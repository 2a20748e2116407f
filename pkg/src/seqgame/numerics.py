"""Numeric foundations: dense solvers, ridge regression, and tape autodiff.

Values live in :class:`Tensor` (64-bit, row-major).  Operations applied while
a :class:`Tape` is active are appended to the tape in execution order;
:func:`backward` replays the records in exact reverse order and accumulates
vector-Jacobian products into a gradient map for every watched tensor.
Operations applied with no active tape just compute, which is the evaluation
fast path.  Every public operation validates that its output is finite; NaN
or Inf raise :class:`NonFiniteError` instead of propagating.

The linear-algebra half is plain numpy over immutable inputs:
:func:`linear_solve` refuses ill-conditioned systems instead of returning
garbage, and :func:`solve_ridge` fits ridge regression with an unpenalized
intercept by default.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GradCheckReport",
    "IllConditionedError",
    "NonFiniteError",
    "PRIMITIVES",
    "RidgeProblem",
    "SingularMatrixError",
    "Tape",
    "TapeError",
    "Tensor",
    "add",
    "backward",
    "conv1d_causal",
    "div",
    "exp",
    "grad_check",
    "linear_solve",
    "log",
    "matmul",
    "mul",
    "neg",
    "reshape",
    "rows",
    "rowwise_matvec",
    "scale",
    "sigmoid",
    "solve_ridge",
    "square",
    "stack_rows",
    "sub",
    "sum_all",
    "tanh",
]


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Invalid tape use: wrong output tensor, reuse after backward, nesting."""


_STATE = threading.local()


def _current_tape():
    return getattr(_STATE, "tape", None)


class Tensor:
    """Dense float64 array; participates in taping when watched or derived."""

    __slots__ = ("data", "_tape")

    def __init__(self, data, _check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _check and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed from non-finite values")
        self.data = arr
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass(frozen=True)
class _Record:
    name: str
    inputs: tuple
    output: Tensor
    vjp: Callable


class Tape:
    """Ordered record of operations; one thread, one backward pass."""

    def __init__(self):
        self._records: list[_Record] = []
        self._watched: list[Tensor] = []
        self._used = False
        self._thread = None

    def __enter__(self):
        if _current_tape() is not None:
            raise TapeError("another tape is already active on this thread")
        self._thread = threading.get_ident()
        _STATE.tape = self
        return self

    def __exit__(self, *exc):
        _STATE.tape = None
        return False

    def watch(self, tensor: Tensor) -> Tensor:
        """Mark a tensor as a gradient target; returns it for chaining.

        A tensor last used with another (necessarily inactive) tape is
        rebound to this one.
        """
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        if tensor._tape is not self:
            tensor._tape = self
            self._watched.append(tensor)
        elif tensor not in self._watched:
            self._watched.append(tensor)
        return tensor

    @property
    def records(self):
        return tuple(self._records)

    @property
    def watched(self):
        return tuple(self._watched)

    def reset(self):
        self._records.clear()
        self._watched.clear()
        self._used = False

    def _append(self, record: _Record):
        if self._used:
            raise TapeError("tape already replayed; reset before recording again")
        if self._thread is not None and threading.get_ident() != self._thread:
            raise TapeError("tape is confined to the thread that opened it")
        self._records.append(record)
        record.output._tape = self


def backward(tape: Tape, output: Tensor) -> dict[Tensor, np.ndarray]:
    """Replay ``tape`` in reverse from scalar ``output``.

    Returns a map from each watched tensor to its accumulated gradient;
    watched tensors the output never touched map to zeros.  The tape is
    consumed afterwards.
    """
    if not isinstance(output, Tensor) or output._tape is not tape:
        raise TapeError("output is not recorded on this tape")
    if output.ndim != 0:
        raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
    if tape._used:
        raise TapeError("tape already replayed")
    tape._used = True

    grads: dict[int, np.ndarray] = {id(output): np.ones(())}
    for rec in reversed(tape._records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return {
        w: np.asarray(grads.get(id(w), np.zeros(w.shape)), dtype=np.float64)
        for w in tape._watched
    }


# ---------------------------------------------------------------------------
# primitives

PRIMITIVES: dict[str, Callable] = {}


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _finish(name: str, data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"operation '{name}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out._tape = None
    tape = _current_tape()
    if tape is not None and any(t._tape is tape for t in inputs):
        tape._append(_Record(name, inputs, out, vjp))
    return out


def _primitive(name: str):
    def deco(fn):
        PRIMITIVES[name] = fn
        fn.__name__ = name
        return fn

    return deco


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce ``g`` back to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


@_primitive("add")
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _finish("add", data, (a, b), vjp)


@_primitive("sub")
def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _finish("sub", data, (a, b), vjp)


@_primitive("mul")
def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _finish("mul", data, (a, b), vjp)


@_primitive("div")
def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        )

    return _finish("div", data, (a, b), vjp)


@_primitive("neg")
def neg(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (-g,)

    return _finish("neg", -a.data, (a,), vjp)


@_primitive("matmul")
def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    data = ad @ bd

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        raise TapeError("matmul supports 1-D and 2-D operands only")

    if ad.ndim > 2 or bd.ndim > 2 or ad.ndim == 0 or bd.ndim == 0:
        raise ValueError("matmul supports 1-D and 2-D operands only")
    return _finish("matmul", data, (a, b), vjp)


@_primitive("exp")
def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _finish("exp", data, (a,), vjp)


@_primitive("log")
def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _finish("log", data, (a,), vjp)


@_primitive("tanh")
def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - data * data),)

    return _finish("tanh", data, (a,), vjp)


@_primitive("sigmoid")
def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # both where-branches evaluate, so the inactive one may overflow benignly
    with np.errstate(over="ignore", invalid="ignore"):
        data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _finish("sigmoid", data, (a,), vjp)


@_primitive("sum_all")
def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("sum_all", np.asarray(a.data.sum()), (a,), vjp)


@_primitive("reshape")
def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return _finish("reshape", a.data.reshape(shape), (a,), vjp)


@_primitive("rows")
def rows(a, start: int, stop: int) -> Tensor:
    """Contiguous row slice ``a[start:stop]`` of a matrix or vector."""
    a = _as_tensor(a)
    if not 0 <= start <= stop <= a.data.shape[0]:
        raise ValueError(f"row slice [{start}:{stop}] outside length {a.data.shape[0]}")
    shape = a.data.shape

    def vjp(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _finish("rows", a.data[start:stop].copy(), (a,), vjp)


@_primitive("stack_rows")
def stack_rows(parts: Sequence) -> Tensor:
    """Stack equal-shape vectors into a matrix, one input per row."""
    ts = tuple(_as_tensor(p) for p in parts)
    if not ts:
        raise ValueError("stack_rows needs at least one row")
    data = np.stack([t.data for t in ts])

    def vjp(g):
        return tuple(g[i] for i in range(len(ts)))

    return _finish("stack_rows", data, ts, vjp)


@_primitive("conv1d_causal")
def conv1d_causal(x, w, b) -> Tensor:
    """Causal 1-D convolution: out[t] = b + sum_j x[t-j] @ w[j], zero-padded."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim != 2 or wd.ndim != 3 or bd.ndim != 1:
        raise ValueError("conv1d_causal wants x (L,C), w (W,C,F), b (F,)")
    length, cin = xd.shape
    width, wcin, filters = wd.shape
    if wcin != cin or bd.shape[0] != filters:
        raise ValueError("conv1d_causal shape mismatch")
    data = np.tile(bd, (length, 1))
    for j in range(min(width, length)):
        data[j:] += xd[: length - j] @ wd[j]

    def vjp(g):
        gx = np.zeros_like(xd)
        gw = np.zeros_like(wd)
        for j in range(min(width, length)):
            gx[: length - j] += g[j:] @ wd[j].T
            gw[j] = xd[: length - j].T @ g[j:]
        return gx, gw, g.sum(axis=0)

    return _finish("conv1d_causal", data, (x, w, b), vjp)


@_primitive("rowwise_matvec")
def rowwise_matvec(coeffs, vecs) -> Tensor:
    """Per-row matrix-vector product: out[t] = coeffs[t].reshape(n,n) @ vecs[t]."""
    coeffs, vecs = _as_tensor(coeffs), _as_tensor(vecs)
    cd, vd = coeffs.data, vecs.data
    if cd.ndim != 2 or vd.ndim != 2 or cd.shape[0] != vd.shape[0]:
        raise ValueError("rowwise_matvec wants coeffs (L,n*n) and vecs (L,n)")
    length, n = vd.shape
    if cd.shape[1] != n * n:
        raise ValueError("rowwise_matvec: coeff rows must have n*n entries")
    mats = cd.reshape(length, n, n)
    data = np.einsum("tij,tj->ti", mats, vd)

    def vjp(g):
        gc = np.einsum("ti,tj->tij", g, vd).reshape(length, n * n)
        gv = np.einsum("tij,ti->tj", mats, g)
        return gc, gv

    return _finish("rowwise_matvec", data, (coeffs, vecs), vjp)


def scale(a, c: float) -> Tensor:
    """Multiply by a plain float constant."""
    return mul(a, Tensor(np.float64(c)))


def square(a) -> Tensor:
    return mul(a, a)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    """Per-coordinate comparison of tape gradients with central differences.

    Relative error per coordinate is |analytic - numeric| scaled by
    max(1, |analytic|, |numeric|), so O(1) gradients are compared relatively
    and near-zero ones absolutely.
    """

    passed: bool
    max_rel_error: float
    worst_input: int
    worst_coord: tuple
    rel_errors: list
    analytic: list
    numeric: list


def grad_check(
    fn: Callable,
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of ``fn`` against central finite differences.

    ``fn`` takes one Tensor per entry of ``inputs`` and returns a scalar
    Tensor; it is evaluated once on a tape for the analytic gradients and
    repeatedly off-tape for the numeric ones.  Evaluation failures at
    perturbed points propagate to the caller.
    """
    base = [np.asarray(x, dtype=np.float64) for x in inputs]
    with Tape() as tape:
        ts = [tape.watch(Tensor(x.copy())) for x in base]
        out = fn(*ts)
    if out.ndim != 0:
        raise TapeError("grad_check needs a scalar-valued function")
    gmap = backward(tape, out)
    analytic = [gmap[t] for t in ts]

    def value_at(points):
        return fn(*[Tensor(p) for p in points]).item()

    numeric = [np.zeros_like(x) for x in base]
    for i in range(len(base)):
        flat = numeric[i].reshape(-1)
        for j in range(base[i].size):
            hi = [x.copy() for x in base]
            lo = [x.copy() for x in base]
            hi[i].reshape(-1)[j] += step
            lo[i].reshape(-1)[j] -= step
            flat[j] = (value_at(hi) - value_at(lo)) / (2.0 * step)

    rel_errors = []
    worst = (0.0, 0, ())
    for i, (a, n) in enumerate(zip(analytic, numeric)):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        err = np.abs(a - n) / denom
        rel_errors.append(err)
        if err.size and err.max() > worst[0]:
            idx = np.unravel_index(np.argmax(err), err.shape)
            worst = (float(err.max()), i, idx)
    return GradCheckReport(
        passed=worst[0] <= tol,
        max_rel_error=worst[0],
        worst_input=worst[1],
        worst_coord=worst[2],
        rel_errors=rel_errors,
        analytic=analytic,
        numeric=numeric,
    )

# ---------------------------------------------------------------------------
# dense linear algebra

COND_LIMIT = 1e12


class SingularMatrixError(ValueError):
    """The system matrix is singular (or numerically indistinguishable)."""


class IllConditionedError(SingularMatrixError):
    """Condition estimate exceeds the trust limit for a direct solve."""


def linear_solve(a: np.ndarray, b: np.ndarray, cond_limit: float = COND_LIMIT) -> np.ndarray:
    """Solve ``a @ x = b`` for square ``a``, refusing unreliable systems.

    Raises SingularMatrixError / IllConditionedError when the condition
    estimate exceeds ``cond_limit``; the returned solution satisfies
    ``|a @ x - b|_inf <= 1e-9 * (1 + |b|_inf)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite entries in linear system")

    cond = np.linalg.cond(a)
    if not np.isfinite(cond):
        raise SingularMatrixError("matrix is singular")
    if cond > cond_limit:
        raise IllConditionedError(f"condition estimate {cond:.3e} exceeds {cond_limit:.1e}")
    try:
        x = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as err:
        raise SingularMatrixError(str(err)) from err

    # one refinement step if the residual is above contract tolerance
    tol = 1e-9 * (1.0 + np.abs(b).max(initial=0.0))
    residual = np.abs(a @ x - b).max(initial=0.0)
    if residual > tol:
        x = x + np.linalg.solve(a, b - a @ x)
        residual = np.abs(a @ x - b).max(initial=0.0)
        if residual > tol:
            raise IllConditionedError(f"residual {residual:.3e} exceeds tolerance {tol:.3e}")
    return x


@dataclass(frozen=True)
class RidgeProblem:
    """Ridge regression ``min |X W + b - Y|^2 + alpha |W|^2``.

    The intercept ``b`` is excluded from the penalty unless
    ``penalize_intercept`` is set, mirroring the usual library default.
    """

    design: np.ndarray
    targets: np.ndarray
    alpha: float = 1.0
    penalize_intercept: bool = False

    def __post_init__(self):
        x = np.asarray(self.design, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"design must be 2-D, got {x.shape}")
        if y.ndim != 2:
            raise ValueError(f"targets must be 2-D, got {y.shape}")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"row mismatch: {x.shape[0]} designs vs {y.shape[0]} targets")
        if x.shape[0] < 1:
            raise ValueError("at least one row required")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("non-finite entries in ridge problem")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        object.__setattr__(self, "design", x)
        object.__setattr__(self, "targets", y)


def solve_ridge(problem: RidgeProblem) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(W, b)`` minimizing the ridge objective of ``problem``.

    With the intercept unpenalized the fit is computed on mean-centered data,
    so the intercept absorbs the column means exactly.  ``alpha = 0`` on a
    design that is rank-deficient after centering raises a singularity error
    rather than falling back to a pseudo-inverse.
    """
    x, y = problem.design, problem.targets
    n_features = x.shape[1]
    if problem.penalize_intercept:
        z = np.hstack([x, np.ones((x.shape[0], 1))])
        gram = z.T @ z + problem.alpha * np.eye(n_features + 1)
        coef = linear_solve(gram, z.T @ y)
        return coef[:n_features], coef[n_features]

    x_mean = x.mean(axis=0)
    y_mean = y.mean(axis=0)
    xc = x - x_mean
    yc = y - y_mean
    gram = xc.T @ xc + problem.alpha * np.eye(n_features)
    weights = linear_solve(gram, xc.T @ yc)
    intercept = y_mean - x_mean @ weights
    return weights, intercept
