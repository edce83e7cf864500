"""Dense-matrix primitives with reverse-mode differentiation.

Everything differentiable in this package is built from the operations in
this module. Values are 2-D float64 numpy arrays wrapped in :class:`Matrix`;
running ops inside a ``with Tape() as tape:`` block records the computation
so :meth:`Tape.gradients` can push a scalar's gradient back to any leaf.

Arrays are frozen (read-only) once wrapped. Parameters are updated between
tapes by rebinding ``.data`` to a fresh array, never by in-place mutation,
so saved forward values stay valid for the backward pass and for replay.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import ConfigurationError, DomainError

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def _check_values(arr: np.ndarray, what: str, allow_neg_inf: bool = False) -> None:
    if np.isnan(arr).any():
        raise DomainError(f"{what} produced NaN")
    if (arr == np.inf).any():
        raise DomainError(f"{what} produced +inf")
    if not allow_neg_inf and (arr == -np.inf).any():
        raise DomainError(f"{what} produced -inf")


class Matrix:
    """A 2-D float64 value, optionally recorded on the active tape.

    ``rows x cols``, row-major. 1-D input is treated as a single row, a
    Python scalar as 1x1. The wrapped array is read-only; see module notes
    on how parameters are updated.
    """

    __slots__ = ("data", "_parents", "_vjp", "name")

    def __init__(self, data, *, name: str | None = None, allow_neg_inf: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ConfigurationError(f"Matrix requires 0/1/2-D data, got ndim={arr.ndim}")
        arr = np.array(arr, dtype=np.float64, order="C", copy=True)
        _check_values(arr, "Matrix", allow_neg_inf=allow_neg_inf)
        self.data = _freeze(arr)
        self._parents: tuple[Matrix, ...] = ()
        self._vjp: Callable | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Matrix":
        m = cls.__new__(cls)
        m.data = _freeze(arr)
        m._parents = ()
        m._vjp = None
        m.name = None
        return m

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ConfigurationError(f"item() needs a 1x1 matrix, got {self.data.shape}")
        return float(self.data[0, 0])

    def assign(self, new_data) -> None:
        """Rebind the stored array (parameter update between tapes)."""
        arr = np.asarray(new_data, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ConfigurationError(
                f"assign shape mismatch: {arr.shape} vs {self.data.shape}"
            )
        _check_values(arr, f"assign to {self.name or 'matrix'}")
        self.data = _freeze(np.array(arr, dtype=np.float64, order="C", copy=True))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Matrix({self.rows}x{self.cols}{tag})"

    # Convenience arithmetic used sparingly in calling code.
    def __add__(self, other: "Matrix") -> "Matrix":
        return add(self, other)

    def __sub__(self, other: "Matrix") -> "Matrix":
        return sub(self, other)

    def __matmul__(self, other: "Matrix") -> "Matrix":
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "fn", "args")

    def __init__(self, out: Matrix, fn: Callable, args: tuple):
        self.out = out
        self.fn = fn
        self.args = args


_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tape:
    """Ordered record of primitive applications on one thread.

    Used as a context manager; ops executed inside the block append nodes.
    ``gradients`` runs the reverse pass, ``replay`` recomputes every node
    from its recorded inputs and checks bit-identical agreement.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise ConfigurationError("nested Tape contexts are not supported")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _append(self, node: _Node) -> None:
        self._nodes.append(node)

    def gradients(self, output: Matrix, wrt: Iterable[Matrix]) -> dict[Matrix, np.ndarray]:
        """Gradients of a 1x1 ``output`` with respect to each matrix in ``wrt``."""
        if output.shape != (1, 1):
            raise ConfigurationError("gradients() needs a scalar (1x1) output")
        wrt = list(wrt)
        acc: dict[int, np.ndarray] = {id(output): np.ones((1, 1))}
        keep = {id(w) for w in wrt}
        for node in reversed(self._nodes):
            g = acc.get(id(node.out))
            if g is None:
                continue
            if node.out._vjp is not None:
                for parent, pg in zip(node.out._parents, node.out._vjp(g)):
                    if pg is None:
                        continue
                    pid = id(parent)
                    if pid in acc:
                        acc[pid] = acc[pid] + pg
                    else:
                        acc[pid] = pg
            if id(node.out) not in keep:
                del acc[id(node.out)]
        return {w: acc.get(id(w), np.zeros_like(w.data)) for w in wrt}

    def replay(self) -> int:
        """Recompute every node from its recorded inputs; bit-exact or raise."""
        for i, node in enumerate(self._nodes):
            redone = node.fn(*node.args)
            if not np.array_equal(redone, node.out.data):
                raise DomainError(f"tape replay diverged at node {i}")
        return len(self._nodes)


def _record(out_data: np.ndarray, parents: Sequence[Matrix], vjp: Callable | None,
            fn: Callable, args: tuple) -> Matrix:
    out = Matrix._wrap(out_data)
    tape = _active_tape()
    if tape is not None:
        out._parents = tuple(parents)
        out._vjp = vjp
        tape._append(_Node(out, fn, args))
    return out


def constant(data, *, allow_neg_inf: bool = False) -> Matrix:
    """A matrix that never receives gradients (masks, frozen targets)."""
    return Matrix(data, allow_neg_inf=allow_neg_inf)


# ---------------------------------------------------------------------------
# primitive forward kernels (pure, reused by replay)

def _k_matmul(a, b):
    return a @ b


def _k_transpose(a):
    return np.ascontiguousarray(a.T)


def _k_add(a, b):
    return a + b


def _k_sub(a, b):
    return a - b


def _k_mul(a, b):
    return a * b


def _k_scale(a, c):
    return a * c


def _k_add_const(a, c):
    return a + c


def _k_scale_by(a, s):
    return a * s[0, 0]


def _k_recip(a):
    return 1.0 / a


def _k_exp(a):
    return np.exp(a)


def _k_log(a):
    return np.log(a)


def _k_sigmoid(a):
    return expit(a)


def _k_clamp_min(a, c):
    return np.maximum(a, c)


def _k_normalize_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def _k_softmax_rows(a):
    shift = a - np.max(a, axis=1, keepdims=True)
    e = np.exp(shift)
    return e / e.sum(axis=1, keepdims=True)


def _k_layer_norm(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * gain + bias


def _k_gelu(x):
    return x * 0.5 * (1.0 + erf(x / _SQRT_2))


def _k_cross_entropy(logits, targets):
    shift = logits - np.max(logits, axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1))
    picked = shift[np.arange(logits.shape[0]), targets]
    return np.array([[float(np.mean(lse - picked))]])


def _k_take_rows(m, idx):
    return m[idx]


def _k_slice_rows(m, start, count):
    return np.ascontiguousarray(m[start:start + count])


def _k_slice_cols(m, start, count):
    return np.ascontiguousarray(m[:, start:start + count])


def _k_concat_rows(*mats):
    return np.concatenate(mats, axis=0)


def _k_concat_cols(*mats):
    return np.concatenate(mats, axis=1)


def _k_sum_all(m):
    return np.array([[m.sum()]])


def _k_mean_all(m):
    return np.array([[m.mean()]])


def _k_col_mean(m):
    return m.mean(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# differentiable operations

def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product ``a @ b``."""
    if a.cols != b.rows:
        raise ConfigurationError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _k_matmul(a.data, b.data)
    _check_values(out, "matmul")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _record(out, (a, b), vjp, _k_matmul, (ad, bd))


def transpose(a: Matrix) -> Matrix:
    out = _k_transpose(a.data)

    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return _record(out, (a,), vjp, _k_transpose, (a.data,))


def add(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise sum of same-shape matrices. -inf entries are allowed so a
    causal/diagonal mask can be added ahead of softmax_rows."""
    if a.shape != b.shape:
        raise ConfigurationError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = _k_add(a.data, b.data)
    _check_values(out, "add", allow_neg_inf=True)

    def vjp(g):
        return g, g

    return _record(out, (a, b), vjp, _k_add, (a.data, b.data))


def sub(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ConfigurationError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out = _k_sub(a.data, b.data)
    _check_values(out, "sub")

    def vjp(g):
        return g, -g

    return _record(out, (a, b), vjp, _k_sub, (a.data, b.data))


def mul(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise (Hadamard) product of same-shape matrices."""
    if a.shape != b.shape:
        raise ConfigurationError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = _k_mul(a.data, b.data)
    _check_values(out, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return g * bd, g * ad

    return _record(out, (a, b), vjp, _k_mul, (ad, bd))


def scale(a: Matrix, c: float) -> Matrix:
    c = float(c)
    out = _k_scale(a.data, c)
    _check_values(out, "scale")

    def vjp(g):
        return (g * c,)

    return _record(out, (a,), vjp, _k_scale, (a.data, c))


def add_const(a: Matrix, c: float) -> Matrix:
    c = float(c)
    out = _k_add_const(a.data, c)
    _check_values(out, "add_const")

    def vjp(g):
        return (g,)

    return _record(out, (a,), vjp, _k_add_const, (a.data, c))


def scale_by(a: Matrix, s: Matrix) -> Matrix:
    """Multiply a matrix by a 1x1 matrix (learned scalar gates, prefactors)."""
    if s.shape != (1, 1):
        raise ConfigurationError(f"scale_by needs a 1x1 scalar, got {s.shape}")
    out = _k_scale_by(a.data, s.data)
    _check_values(out, "scale_by")
    ad, sd = a.data, s.data

    def vjp(g):
        return g * sd[0, 0], np.array([[float((g * ad).sum())]])

    return _record(out, (a, s), vjp, _k_scale_by, (ad, sd))


def recip(a: Matrix) -> Matrix:
    with np.errstate(divide="ignore"):
        out = _k_recip(a.data)
    _check_values(out, "recip")
    ad = a.data

    def vjp(g):
        return (-g / (ad * ad),)

    return _record(out, (a,), vjp, _k_recip, (ad,))


def exp(a: Matrix) -> Matrix:
    out = _k_exp(a.data)
    _check_values(out, "exp")

    def vjp(g, out=out):
        return (g * out,)

    return _record(out, (a,), vjp, _k_exp, (a.data,))


def log(a: Matrix) -> Matrix:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = _k_log(a.data)
    _check_values(out, "log")
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _record(out, (a,), vjp, _k_log, (ad,))


def sigmoid(a: Matrix) -> Matrix:
    out = _k_sigmoid(a.data)
    _check_values(out, "sigmoid")

    def vjp(g, out=out):
        return (g * out * (1.0 - out),)

    return _record(out, (a,), vjp, _k_sigmoid, (a.data,))


def clamp_min(a: Matrix, c: float) -> Matrix:
    """max(a, c) elementwise; gradient passes only where a > c."""
    c = float(c)
    out = _k_clamp_min(a.data, c)
    _check_values(out, "clamp_min")
    mask = a.data > c

    def vjp(g):
        return (g * mask,)

    return _record(out, (a,), vjp, _k_clamp_min, (a.data, c))


def relu(a: Matrix) -> Matrix:
    return clamp_min(a, 0.0)


def normalize_rows(a: Matrix) -> Matrix:
    """Project every row onto the unit sphere. Zero rows are a hard error."""
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    if (norms == 0.0).any():
        raise DomainError("normalize_rows: zero-norm row")
    out = a.data / norms
    _check_values(out, "normalize_rows")
    inv = 1.0 / norms

    def vjp(g, out=out):
        return ((g - out * np.sum(out * g, axis=1, keepdims=True)) * inv,)

    return _record(out, (a,), vjp, _k_normalize_rows, (a.data,))


def softmax_rows(a: Matrix) -> Matrix:
    """Row-wise softmax with per-row max subtraction.

    Entries equal to -inf act as mask sentinels and map to exactly 0. A row
    of all -inf has no well-defined distribution and raises.
    """
    row_max = np.max(a.data, axis=1, keepdims=True)
    if (row_max == -np.inf).any():
        raise DomainError("softmax_rows: row of all -inf")
    if np.isnan(a.data).any():
        raise DomainError("softmax_rows: NaN input")
    out = _k_softmax_rows(a.data)
    _check_values(out, "softmax_rows")

    def vjp(g, out=out):
        return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)

    return _record(out, (a,), vjp, _k_softmax_rows, (a.data,))


def layer_norm(x: Matrix, gain: Matrix, bias: Matrix, eps: float = 1e-5) -> Matrix:
    """Per-row standardization followed by the affine map gain, bias (1xH).

    Divides by sqrt(var + eps), so a constant row maps to the bias vector.
    """
    h = x.cols
    if gain.shape != (1, h) or bias.shape != (1, h):
        raise ConfigurationError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {h}"
        )
    eps = float(eps)
    xd = x.data
    out = _k_layer_norm(xd, gain.data, bias.data, eps)
    _check_values(out, "layer_norm")
    mu = xd.mean(axis=1, keepdims=True)
    var = np.mean((xd - mu) ** 2, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gain.data

    def vjp(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True)
        )
        dgain = (g * xhat).sum(axis=0, keepdims=True)
        dbias = g.sum(axis=0, keepdims=True)
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), vjp, _k_layer_norm,
                   (xd, gain.data, bias.data, eps))


def gelu(x: Matrix) -> Matrix:
    """Exact Gaussian-CDF GELU, x * Phi(x), elementwise."""
    xd = x.data
    out = _k_gelu(xd)
    _check_values(out, "gelu")
    phi_cdf = 0.5 * (1.0 + erf(xd / _SQRT_2))

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (phi_cdf + xd * pdf),)

    return _record(out, (x,), vjp, _k_gelu, (xd,))


def cross_entropy(logits: Matrix, targets: np.ndarray) -> Matrix:
    """Mean next-token negative log-likelihood over all rows.

    ``targets`` is an integer vector with one class index per logits row.
    """
    targets = np.asarray(targets)
    if targets.ndim != 1 or targets.shape[0] != logits.rows:
        raise ConfigurationError(
            f"cross_entropy targets shape {targets.shape} vs {logits.rows} rows"
        )
    if not np.issubdtype(targets.dtype, np.integer):
        raise ConfigurationError("cross_entropy targets must be integers")
    if (targets < 0).any() or (targets >= logits.cols).any():
        raise DomainError("cross_entropy: target index out of range")
    targets = targets.astype(np.int64)
    ld = logits.data
    n = ld.shape[0]
    out = _k_cross_entropy(ld, targets)
    _check_values(out, "cross_entropy")
    shift = ld - np.max(ld, axis=1, keepdims=True)
    e = np.exp(shift)
    probs = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), targets] -= 1.0
        return (d * (g[0, 0] / n),)

    return _record(out, (logits,), vjp, _k_cross_entropy, (ld, targets))


def take_rows(m: Matrix, idx: np.ndarray) -> Matrix:
    """Gather rows by integer index (embedding lookup); repeats accumulate."""
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ConfigurationError("take_rows needs a 1-D integer index vector")
    if (idx < 0).any() or (idx >= m.rows).any():
        raise DomainError("take_rows: index out of range")
    idx = idx.astype(np.int64)
    out = _k_take_rows(m.data, idx)
    shape = m.shape

    def vjp(g):
        gm = np.zeros(shape)
        np.add.at(gm, idx, g)
        return (gm,)

    return _record(out, (m,), vjp, _k_take_rows, (m.data, idx))


def slice_rows(m: Matrix, start: int, count: int) -> Matrix:
    if start < 0 or count < 1 or start + count > m.rows:
        raise ConfigurationError(f"slice_rows [{start}:{start + count}) out of {m.rows}")
    out = _k_slice_rows(m.data, start, count)
    shape = m.shape

    def vjp(g):
        gm = np.zeros(shape)
        gm[start:start + count] = g
        return (gm,)

    return _record(out, (m,), vjp, _k_slice_rows, (m.data, start, count))


def slice_cols(m: Matrix, start: int, count: int) -> Matrix:
    if start < 0 or count < 1 or start + count > m.cols:
        raise ConfigurationError(f"slice_cols [{start}:{start + count}) out of {m.cols}")
    out = _k_slice_cols(m.data, start, count)
    shape = m.shape

    def vjp(g):
        gm = np.zeros(shape)
        gm[:, start:start + count] = g
        return (gm,)

    return _record(out, (m,), vjp, _k_slice_cols, (m.data, start, count))


def concat_rows(mats: Sequence[Matrix]) -> Matrix:
    if not mats:
        raise ConfigurationError("concat_rows of nothing")
    cols = mats[0].cols
    if any(m.cols != cols for m in mats):
        raise ConfigurationError("concat_rows: column mismatch")
    out = _k_concat_rows(*[m.data for m in mats])
    splits = np.cumsum([m.rows for m in mats])[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=0))

    return _record(out, tuple(mats), vjp, _k_concat_rows, tuple(m.data for m in mats))


def concat_cols(mats: Sequence[Matrix]) -> Matrix:
    if not mats:
        raise ConfigurationError("concat_cols of nothing")
    rows = mats[0].rows
    if any(m.rows != rows for m in mats):
        raise ConfigurationError("concat_cols: row mismatch")
    out = _k_concat_cols(*[m.data for m in mats])
    splits = np.cumsum([m.cols for m in mats])[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return _record(out, tuple(mats), vjp, _k_concat_cols, tuple(m.data for m in mats))


def sum_all(m: Matrix) -> Matrix:
    out = _k_sum_all(m.data)
    shape = m.shape

    def vjp(g):
        return (np.full(shape, g[0, 0]),)

    return _record(out, (m,), vjp, _k_sum_all, (m.data,))


def mean_all(m: Matrix) -> Matrix:
    out = _k_mean_all(m.data)
    shape = m.shape
    n = m.data.size

    def vjp(g):
        return (np.full(shape, g[0, 0] / n),)

    return _record(out, (m,), vjp, _k_mean_all, (m.data,))


def col_mean(m: Matrix) -> Matrix:
    """Mean over rows, result 1 x cols (batch pooling of routing weights)."""
    out = _k_col_mean(m.data)
    n = m.rows
    shape = m.shape

    def vjp(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _record(out, (m,), vjp, _k_col_mean, (m.data,))


# ---------------------------------------------------------------------------
# finite-difference checking

def grad_check(f: Callable[[], Matrix], params: dict[str, Matrix],
               h: float = 1e-5) -> float:
    """Worst relative error of tape gradients vs central differences.

    ``f`` rebuilds the scalar from the current contents of ``params``; it is
    taped once for analytic gradients, then re-evaluated untaped at
    elementwise perturbations theta +- h. The error denominator is
    max(|analytic|, |numeric|, 1e-8).
    """
    with Tape() as tape:
        out = f()
    if out.shape != (1, 1):
        raise ConfigurationError("grad_check needs a scalar-valued computation")
    if not np.isfinite(out.data[0, 0]):
        raise DomainError("grad_check: non-finite objective")
    analytic = tape.gradients(out, params.values())

    worst = 0.0
    for p in params.values():
        base = p.data
        grad = analytic[p]
        flat = base.ravel()
        for k in range(flat.size):
            saved = flat[k]
            bumped = base.copy()
            bumped.ravel()[k] = saved + h
            p.assign(bumped)
            f_plus = f().item()
            bumped.ravel()[k] = saved - h
            p.assign(bumped)
            f_minus = f().item()
            p.assign(base)
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise DomainError("grad_check: non-finite objective at perturbed point")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = grad.ravel()[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
