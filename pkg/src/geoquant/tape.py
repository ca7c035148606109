"""Define-by-run reverse-mode differentiation over float64 arrays.

Every op computes its value eagerly with numpy and, while gradients are
enabled, records a vector-Jacobian closure. Quantizers get surrogate
backward rules: clipped pass-through for scalar grids and a tangent-space
projection for codebook directions, with an optional hard (zero-gradient)
variant kept around as the failure-mode baseline.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import quantizers as qz
from .codebook import nearest_many
from .errors import NonScalarLossError

_grad_enabled = True

# Updated by the projection backward rule when debug_checks is on; tests and
# the trainer read max_abs_dot to verify tangency of every direction gradient.
debug_checks = False
gste_stats = {"max_abs_dot": 0.0, "count": 0}


def reset_gste_stats() -> None:
    gste_stats["max_abs_dot"] = 0.0
    gste_stats["count"] = 0


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Var:
    """A node holding a float64 array, its gradient, and its backward rule."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents if _grad_enabled else ()
        self._vjp = vjp if _grad_enabled else None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_var(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_var(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_var(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, as_var(-1.0))


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value / b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        ),
    )


def matmul(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def sum_(x: Var, axis=None, keepdims: bool = False) -> Var:
    x = as_var(x)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.value.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.value.shape).copy(),)

    return Var(x.value.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def mean_(x: Var, axis=None) -> Var:
    x = as_var(x)
    n = x.value.size if axis is None else x.value.shape[axis]
    return sum_(x, axis=axis) * as_var(1.0 / n)


def abs_(x: Var) -> Var:
    x = as_var(x)
    return Var(np.abs(x.value), (x,), lambda g: (g * np.sign(x.value),))


def exp(x: Var) -> Var:
    x = as_var(x)
    out = np.exp(x.value)
    return Var(out, (x,), lambda g: (g * out,))


def sqrt(x: Var) -> Var:
    x = as_var(x)
    out = np.sqrt(x.value)
    return Var(out, (x,), lambda g: (g * 0.5 / out,))


def silu(x: Var) -> Var:
    x = as_var(x)
    sig = 1.0 / (1.0 + np.exp(-x.value))
    return Var(
        x.value * sig,
        (x,),
        lambda g: (g * (sig + x.value * sig * (1.0 - sig)),),
    )


def reshape(x: Var, shape) -> Var:
    x = as_var(x)
    return Var(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.value.shape),))


def expand_dims(x: Var, axis: int) -> Var:
    x = as_var(x)
    return Var(np.expand_dims(x.value, axis), (x,), lambda g: (np.squeeze(g, axis=axis),))


def concat(parts: list[Var], axis: int = -1) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return Var(
        np.concatenate([p.value for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def gather(x: Var, idx: np.ndarray) -> Var:
    """Select rows along axis 0; duplicate indices accumulate in backward."""
    x = as_var(x)

    def vjp(g):
        out = np.zeros_like(x.value)
        np.add.at(out, idx, g)
        return (out,)

    return Var(x.value[idx], (x,), vjp)


def segment_sum(x: Var, idx: np.ndarray, n: int) -> Var:
    """Sum rows of x into n buckets keyed by idx along axis 0."""
    x = as_var(x)
    out = np.zeros((n,) + x.value.shape[1:])
    np.add.at(out, idx, x.value)
    return Var(out, (x,), lambda g: (g[idx],))


def vnorm(v: Var, axis: int = -1) -> Var:
    """Euclidean norm along an axis with a zero-safe gradient."""
    v = as_var(v)
    out = np.linalg.norm(v.value, axis=axis)

    def vjp(g):
        safe = np.where(out > 1e-12, out, 1.0)
        unit = v.value / np.expand_dims(safe, axis)
        gg = np.expand_dims(g * (out > 1e-12), axis) * unit
        return (gg,)

    return Var(out, (v,), vjp)


def fnorm(x: Var) -> Var:
    """Frobenius norm over all elements; exactly zero input gives zero output
    and a zero (rather than undefined) gradient."""
    x = as_var(x)
    out = np.linalg.norm(x.value)

    def vjp(g):
        if out <= 1e-300:
            return (np.zeros_like(x.value),)
        return (g * x.value / out,)

    return Var(out, (x,), vjp)


def vdir(v: Var, fallback_eps: float = 1e-9) -> Var:
    """Normalize (..., 3) rows; rows with tiny norm map to e_z with zero gradient."""
    v = as_var(v)
    norms = np.linalg.norm(v.value, axis=-1, keepdims=True)
    ok = norms > fallback_eps
    safe = np.where(ok, norms, 1.0)
    out = np.where(ok, v.value / safe, np.array([0.0, 0.0, 1.0]))

    def vjp(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        gg = (g - dot * out) / safe
        return (np.where(ok, gg, 0.0),)

    return Var(out, (v,), vjp)


# --- quantizer surrogates ---------------------------------------------------


def quantize_linear_ste(x: Var, scheme: qz.QuantScheme) -> Var:
    """Forward quantize; gradient passes through inside the clamp range only."""
    x = as_var(x)
    out = qz.quantize_linear(x.value, scheme)
    inside = np.abs(x.value) <= (qz.qmax(scheme.bits) + 0.5) * np.asarray(scheme.scale)
    return Var(np.asarray(out), (x,), lambda g: (g * inside,))


def quantize_magnitude_ste(m: Var, scheme: qz.QuantScheme) -> Var:
    """Log-grid magnitude quantizer with pass-through gradient in range."""
    m = as_var(m)
    out = qz.quantize_magnitude(m.value, scheme)
    span = (qz.qmax(scheme.bits) + 0.5) * np.asarray(scheme.scale)
    with np.errstate(divide="ignore"):
        logs = np.log(np.where(m.value > 0, m.value, 1.0))
    inside = (m.value > 0) & (np.abs(logs) <= span)
    return Var(np.asarray(out), (m,), lambda g: (g * inside,))


def quantize_direction_ste(x: Var, scheme: qz.QuantScheme, hard: bool = False) -> Var:
    """Snap (..., 3) unit rows to codewords.

    The backward rule projects the upstream gradient onto the tangent plane at
    the pre-quantization direction, so updates never carry a radial component.
    With hard=True the gradient is cut entirely (hard vector assignment).
    """
    x = as_var(x)
    _, words = nearest_many(scheme.codebook, x.value)
    u = x.value

    def vjp(g):
        if hard:
            return (np.zeros_like(u),)
        dot = np.sum(g * u, axis=-1, keepdims=True)
        out = g - dot * u
        if debug_checks:
            residual = np.abs(np.sum(out * u, axis=-1))
            gste_stats["max_abs_dot"] = max(gste_stats["max_abs_dot"], float(residual.max(initial=0.0)))
            gste_stats["count"] += 1
        return (out,)

    return Var(words, (x,), vjp)


def backward(loss: Var) -> None:
    """Reverse accumulation from a scalar loss into every reachable node."""
    if loss.value.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.value.shape}")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
            else:
                parent.grad = parent.grad + g


# --- gradient verification ---------------------------------------------------


@dataclass
class FDCheckResult:
    fd: np.ndarray
    proj: np.ndarray
    skipped: np.ndarray

    @property
    def max_rel_err(self) -> float:
        keep = ~self.skipped
        if not keep.any():
            return 0.0
        denom = np.maximum(np.maximum(np.abs(self.fd[keep]), np.abs(self.proj[keep])), 1e-12)
        return float(np.max(np.abs(self.fd[keep] - self.proj[keep]) / denom))


def finite_difference_check(f, x: np.ndarray, directions, h: float, cell_fn=None) -> FDCheckResult:
    """Compare tape gradients against central differences along directions.

    f maps a Var to a scalar Var. When cell_fn is given it must return a
    hashable description of every active quantizer cell at a point; a
    direction whose probes straddle a cell boundary is skipped, since the
    finite difference is meaningless across the jump.
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = Var(x)
    loss = f(leaf)
    backward(loss)
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(x)

    fd, proj, skipped = [], [], []
    for d in directions:
        d = np.asarray(d, dtype=np.float64)
        if cell_fn is not None and cell_fn(x + h * d) != cell_fn(x - h * d):
            fd.append(0.0)
            proj.append(0.0)
            skipped.append(True)
            continue
        with no_grad():
            hi = float(f(Var(x + h * d)).value)
            lo = float(f(Var(x - h * d)).value)
        fd.append((hi - lo) / (2.0 * h))
        proj.append(float(np.sum(grad * d)))
        skipped.append(False)
    return FDCheckResult(np.array(fd), np.array(proj), np.array(skipped))
