"""Dense linear-algebra kernel with a reverse-mode gradient contract.

Matrices are 2-D C-contiguous numpy arrays: float32 on production paths,
float64 when gradients are being verified against finite differences.
Every op accepts either a raw ndarray or a `Tensor`; passing Tensors
builds a computation graph that `backward` walks to fill parameter
gradients. Reductions keep numpy's fixed order so repeated runs on the
same machine are bit-identical, which the serving parity checks rely on.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Shape mismatch in a kernel operation."""


class GradCheckAborted(RuntimeError):
    """Raised when the loss under check evaluates to a non-finite value."""


# ---------------------------------------------------------------------------
# Graph nodes

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A value in the computation graph plus its accumulated gradient.

    Parameters are Tensors with ``requires_grad=True`` and a name; their
    ``grad`` buffer persists across backward calls until ``zero_grad``.
    Intermediate nodes are created by the ops below and freed with the
    graph.
    """

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype}{tag})"


def param(name: str, value: np.ndarray) -> Tensor:
    """Create a named trainable parameter with a zeroed gradient buffer."""
    t = Tensor(np.array(value, copy=True), requires_grad=True, name=name)
    t.grad = np.zeros_like(t.value)
    return t


def zero_grad(params) -> None:
    for p in params:
        if p.grad is None or p.grad.shape != p.value.shape:
            p.grad = np.zeros_like(p.value)
        else:
            p.grad.fill(0.0)


def constant(value, dtype=None) -> Tensor:
    arr = np.asarray(value, dtype=dtype)
    return Tensor(arr)


def _is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def _node(value, parents, backward) -> Tensor:
    out = Tensor(value)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # First touch copies: g may be a view into (or the same object as)
        # another node's gradient, so taking it by reference is unsafe.
        t.grad = np.array(g, dtype=t.value.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable parameter's grad."""
    if loss.value.size != 1:
        raise DimensionError("backward expects a scalar loss")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _toposort(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# Value-level kernels (shared by the raw and graph paths)


def _check_2d(m, op: str):
    if m.ndim != 2:
        raise DimensionError(f"{op} expects a 2-D matrix, got shape {m.shape}")


def _matmul_values(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape} do not chain")
    return a @ b


def _softmax_rows_values(m: np.ndarray) -> np.ndarray:
    _check_2d(m, "softmax_rows")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    # Keep entries strictly positive: exp underflow on extreme score
    # ranges would otherwise round the smallest weights to exact zero.
    return np.clip(out, np.finfo(out.dtype).tiny, 1.0)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # Stable two-branch form; output clamped into the open interval (0, 1)
    # so saturated activations never round to an exact 0 or 1.
    x = np.asarray(x)
    pos = 1.0 / (1.0 + np.exp(-np.clip(x, 0.0, None)))
    ex = np.exp(np.clip(x, None, 0.0))
    neg = ex / (1.0 + ex)
    out = np.where(x >= 0, pos, neg).astype(x.dtype, copy=False)
    lo = np.finfo(out.dtype).tiny
    hi = np.nextafter(out.dtype.type(1.0), out.dtype.type(0.0))
    return np.clip(out, lo, hi)


def _layer_norm_rows_values(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, xc, inv, xhat


# ---------------------------------------------------------------------------
# Ops: raw ndarray in -> ndarray out, Tensor in -> graph node out


def matmul(a, b):
    """Standard matrix product, strict 2-D."""
    if not (_is_tensor(a) or _is_tensor(b)):
        return _matmul_values(a, b)
    ta = a if _is_tensor(a) else Tensor(a)
    tb = b if _is_tensor(b) else Tensor(b)
    value = _matmul_values(ta.value, tb.value)

    def bw(g):
        _accum(ta, g @ tb.value.T)
        _accum(tb, ta.value.T @ g)

    return _node(value, (ta, tb), bw)


def transpose(a):
    if not _is_tensor(a):
        return a.T
    value = a.value.T

    def bw(g):
        _accum(a, g.T)

    return _node(value, (a,), bw)


def matmul_t(a, b):
    """a @ b.T without materializing the transpose (attention scores)."""
    if not (_is_tensor(a) or _is_tensor(b)):
        return a @ b.T
    ta = a if _is_tensor(a) else Tensor(a)
    tb = b if _is_tensor(b) else Tensor(b)
    _check_2d(ta.value, "matmul_t")
    _check_2d(tb.value, "matmul_t")
    if ta.value.shape[1] != tb.value.shape[1]:
        raise DimensionError(f"matmul_t shapes {ta.value.shape} x {tb.value.shape} do not chain")
    value = ta.value @ tb.value.T

    def bw(g):
        _accum(ta, g @ tb.value)
        _accum(tb, g.T @ ta.value)

    return _node(value, (ta, tb), bw)


def add(a, b):
    if not (_is_tensor(a) or _is_tensor(b)):
        return a + b
    ta = a if _is_tensor(a) else Tensor(np.asarray(a))
    tb = b if _is_tensor(b) else Tensor(np.asarray(b))
    value = ta.value + tb.value

    def bw(g):
        _accum(ta, _unbroadcast(g, ta.value.shape))
        _accum(tb, _unbroadcast(g, tb.value.shape))

    return _node(value, (ta, tb), bw)


def sub(a, b):
    if not (_is_tensor(a) or _is_tensor(b)):
        return a - b
    ta = a if _is_tensor(a) else Tensor(np.asarray(a))
    tb = b if _is_tensor(b) else Tensor(np.asarray(b))
    value = ta.value - tb.value

    def bw(g):
        _accum(ta, _unbroadcast(g, ta.value.shape))
        _accum(tb, _unbroadcast(-g, tb.value.shape))

    return _node(value, (ta, tb), bw)


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    if not (_is_tensor(a) or _is_tensor(b)):
        return a * b
    ta = a if _is_tensor(a) else Tensor(np.asarray(a))
    tb = b if _is_tensor(b) else Tensor(np.asarray(b))
    value = ta.value * tb.value

    def bw(g):
        _accum(ta, _unbroadcast(g * tb.value, ta.value.shape))
        _accum(tb, _unbroadcast(g * ta.value, tb.value.shape))

    return _node(value, (ta, tb), bw)


def div(a, b):
    if not (_is_tensor(a) or _is_tensor(b)):
        return a / b
    ta = a if _is_tensor(a) else Tensor(np.asarray(a))
    tb = b if _is_tensor(b) else Tensor(np.asarray(b))
    value = ta.value / tb.value

    def bw(g):
        _accum(ta, _unbroadcast(g / tb.value, ta.value.shape))
        _accum(tb, _unbroadcast(-g * ta.value / (tb.value * tb.value), tb.value.shape))

    return _node(value, (ta, tb), bw)


def scale(a, c: float):
    """Multiply by a python scalar constant."""
    if not _is_tensor(a):
        return a * c
    value = a.value * a.value.dtype.type(c)

    def bw(g):
        _accum(a, g * a.value.dtype.type(c))

    return _node(value, (a,), bw)


def sigmoid(m):
    """Logistic function, stable for large positive or negative inputs."""
    if not _is_tensor(m):
        return _sigmoid_values(np.asarray(m))
    s = _sigmoid_values(m.value)

    def bw(g):
        _accum(m, g * s * (1.0 - s))

    return _node(s, (m,), bw)


def softmax_rows(m):
    """Row-wise softmax with per-row max subtraction."""
    if not _is_tensor(m):
        return _softmax_rows_values(np.asarray(m))
    y = _softmax_rows_values(m.value)

    def bw(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(m, y * (g - dot))

    return _node(y, (m,), bw)


def layer_norm_rows(x, gain, bias, eps: float = 1e-5):
    """Layer normalization applied independently to every row.

    gain and bias are (1, d) parameters; variance is the population
    variance of the row and eps sits inside the square root.
    """
    if not _is_tensor(x):
        g = gain.value if _is_tensor(gain) else gain
        b = bias.value if _is_tensor(bias) else bias
        return _layer_norm_rows_values(np.asarray(x), g, b, eps)[0]
    tg = gain if _is_tensor(gain) else Tensor(np.asarray(gain))
    tb = bias if _is_tensor(bias) else Tensor(np.asarray(bias))
    y, xc, inv, xhat = _layer_norm_rows_values(x.value, tg.value, tb.value, eps)
    d = x.value.shape[1]

    def bw(g):
        dxhat = g * tg.value
        dvar = (dxhat * xc).sum(axis=1, keepdims=True) * (-0.5) * inv ** 3
        dmu = -(dxhat * inv).sum(axis=1, keepdims=True) + dvar * (-2.0) * xc.mean(
            axis=1, keepdims=True
        )
        _accum(x, dxhat * inv + dvar * (2.0 / d) * xc + dmu / d)
        _accum(tg, _unbroadcast(g * xhat, tg.value.shape))
        _accum(tb, _unbroadcast(g, tb.value.shape))

    return _node(y, (x, tg, tb), bw)


def layer_norm(v, gain, bias, eps: float = 1e-5) -> np.ndarray:
    """1-D convenience form of layer_norm_rows for plain vectors."""
    v = np.asarray(v)
    gain = np.asarray(gain)
    bias = np.asarray(bias)
    if v.ndim != 1 or gain.shape != v.shape or bias.shape != v.shape:
        raise DimensionError("layer_norm expects equal-length 1-D vectors")
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = _layer_norm_rows_values(
        v.reshape(1, -1), gain.reshape(1, -1), bias.reshape(1, -1), eps
    )[0]
    return out.reshape(-1)


def frobenius_norm(m):
    """sqrt of the sum of squared entries."""
    if not _is_tensor(m):
        m = np.asarray(m)
        return float(np.sqrt((m * m).sum()))
    return sqrt_scalar(sum_all(mul(m, m)))


def log(x):
    # Invalid inputs propagate NaN; the training loop and grad_check both
    # treat non-finite losses as divergence, so no warning here.
    if not _is_tensor(x):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.log(x)
    with np.errstate(invalid="ignore", divide="ignore"):
        value = np.log(x.value)

    def bw(g):
        _accum(x, g / x.value)

    return _node(value, (x,), bw)


def sqrt_scalar(x):
    """Elementwise sqrt; the derivative denominator is floored so an exact
    zero input (degenerate but legal) yields a zero gradient, not NaN."""
    if not _is_tensor(x):
        return np.sqrt(x)
    value = np.sqrt(x.value)

    def bw(g):
        denom = np.maximum(value, np.asarray(1e-12, dtype=value.dtype))
        _accum(x, g * 0.5 / denom)

    return _node(value, (x,), bw)


def clamp(x, lo: float, hi: float):
    """Clip values into [lo, hi]; gradient passes only strictly inside."""
    if not _is_tensor(x):
        return np.clip(x, lo, hi)
    value = np.clip(x.value, lo, hi)
    mask = (x.value > lo) & (x.value < hi)

    def bw(g):
        _accum(x, g * mask)

    return _node(value, (x,), bw)


def gather_rows(table, indices):
    """Select rows of a table by integer index (embedding lookup)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("gather_rows expects a 1-D index array")
    n = table.value.shape[0] if _is_tensor(table) else table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range [0, {n})")
    if not _is_tensor(table):
        return table[idx]
    value = table.value[idx]

    def bw(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.value)
            _scatter_add_rows(table.grad, idx, g)

    return _node(value, (table,), bw)


def _scatter_add_rows(target: np.ndarray, idx: np.ndarray, g: np.ndarray) -> None:
    # bincount over flattened (row, col) indices is several times faster
    # than ufunc.at for the long duplicate-heavy index vectors sequences
    # produce.
    rows, cols = target.shape
    flat = (idx[:, None] * cols + np.arange(cols)[None, :]).ravel()
    target += np.bincount(flat, weights=np.asarray(g, dtype=np.float64).ravel(),
                          minlength=rows * cols).reshape(rows, cols).astype(target.dtype)


def concat_rows(parts):
    """Stack (r_i, c) blocks vertically."""
    if not any(_is_tensor(p) for p in parts):
        return np.concatenate(parts, axis=0)
    ts = [p if _is_tensor(p) else Tensor(np.asarray(p)) for p in parts]
    value = np.concatenate([t.value for t in ts], axis=0)
    sizes = [t.value.shape[0] for t in ts]

    def bw(g):
        start = 0
        for t, n in zip(ts, sizes):
            _accum(t, g[start : start + n])
            start += n

    return _node(value, tuple(ts), bw)


def concat_cols(parts):
    """Stack (r, c_i) blocks horizontally."""
    if not any(_is_tensor(p) for p in parts):
        return np.concatenate(parts, axis=1)
    ts = [p if _is_tensor(p) else Tensor(np.asarray(p)) for p in parts]
    value = np.concatenate([t.value for t in ts], axis=1)
    sizes = [t.value.shape[1] for t in ts]

    def bw(g):
        start = 0
        for t, n in zip(ts, sizes):
            _accum(t, g[:, start : start + n])
            start += n

    return _node(value, tuple(ts), bw)


def sum_all(x):
    if not _is_tensor(x):
        return np.asarray(x).sum()
    value = x.value.sum()

    def bw(g):
        _accum(x, np.broadcast_to(g, x.value.shape).astype(x.value.dtype, copy=False))

    return _node(value, (x,), bw)


def mean_all(x):
    if not _is_tensor(x):
        return np.asarray(x).mean()
    n = x.value.size
    value = x.value.mean()

    def bw(g):
        _accum(x, np.broadcast_to(g / n, x.value.shape).astype(x.value.dtype, copy=False))

    return _node(value, (x,), bw)


def mean_rows(x):
    """Mean over rows: (L, d) -> (1, d)."""
    if not _is_tensor(x):
        return np.asarray(x).mean(axis=0, keepdims=True)
    n = x.value.shape[0]
    value = x.value.mean(axis=0, keepdims=True)

    def bw(g):
        _accum(x, np.broadcast_to(g / n, x.value.shape).astype(x.value.dtype, copy=False))

    return _node(value, (x,), bw)


def sum_rows(x):
    """Row sums: (K, d) -> (K, 1)."""
    if not _is_tensor(x):
        return np.asarray(x).sum(axis=1, keepdims=True)
    value = x.value.sum(axis=1, keepdims=True)

    def bw(g):
        _accum(x, np.broadcast_to(g, x.value.shape).astype(x.value.dtype, copy=False))

    return _node(value, (x,), bw)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    """Result of comparing analytic gradients to central finite differences."""

    max_rel_err: float
    worst_param: str | None
    worst_index: int | None
    tol: float
    passed: bool
    per_param: dict = field(default_factory=dict)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        where = f" at {self.worst_param}[{self.worst_index}]" if self.worst_param else ""
        return f"grad_check {status}: max rel err {self.max_rel_err:.3e}{where} (tol {self.tol:.1e})"


def grad_check(loss_fn, params, h: float = 1e-4, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against (f(x+h) - f(x-h)) / 2h entrywise.

    loss_fn rebuilds the loss graph from the current parameter values on
    every call. Relative error uses a denominator floor of 1e-3 so entries
    whose true gradient is zero are judged on the absolute scale of the
    finite-difference noise. Requires float64 parameters.
    """
    params = list(params)
    for p in params:
        if p.value.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters, {p.name} is {p.value.dtype}")
    zero_grad(params)
    loss = loss_fn()
    if not np.isfinite(loss.value).all():
        raise GradCheckAborted(f"loss is non-finite: {loss.value!r}")
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    floor = 1e-3
    max_rel = 0.0
    worst = (None, None)
    per_param = {}
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        aflat = a.reshape(-1)
        worst_here = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                f_plus = float(loss_fn().value)
            flat[i] = orig - h
            with no_grad():
                f_minus = float(loss_fn().value)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradCheckAborted(f"non-finite loss while perturbing {p.name}[{i}]")
            fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(aflat[i] - fd) / max(abs(aflat[i]), abs(fd), floor)
            if rel > worst_here:
                worst_here = rel
            if rel > max_rel:
                max_rel = rel
                worst = (p.name, i)
        per_param[p.name] = worst_here
    return GradCheckReport(
        max_rel_err=max_rel,
        worst_param=worst[0],
        worst_index=worst[1],
        tol=tol,
        passed=max_rel < tol,
        per_param=per_param,
    )
