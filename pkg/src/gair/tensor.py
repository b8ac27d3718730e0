"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

Small numpy-backed engine: each op records its parents and a closure that
accumulates gradients into them. Enough to express patch-based image
encoders, a location MLP, continuous feature interpolation, and InfoNCE
losses, and to validate every backward rule against finite differences.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "GradCheckReport",
    "ShapeMismatchError",
    "DomainError",
    "NumericError",
    "ContractError",
    "concat",
    "matmul",
    "softmax_rows",
    "l2_normalize_rows",
    "gather_cells",
    "backward",
    "grad_check",
]


class ShapeMismatchError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


# Name of a deliberately corrupted backward rule, used as a negative control
# by the gradient-audit command. Never set outside tests/audits.
_FAULT_OP = os.environ.get("GAIR_FAULT_OP", "")

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the differentiation graph, wrapping a dense float array."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.values = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def _accumulate(self, g: np.ndarray):
        g = g.astype(self.values.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # -- graph construction helper ------------------------------------------

    @staticmethod
    def _make(values, parents, backward):
        out = Tensor(values)
        if any(p.requires_grad or p._parents for p in parents):
            out.requires_grad = any(p.requires_grad for p in parents)
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- arithmetic ----------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.values.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        out_vals = self.values + other.values

        def bwd(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._make(out_vals, (self, other), bwd)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        out_vals = self.values - other.values

        def bwd(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(-_unbroadcast(g, other.shape))

        return Tensor._make(out_vals, (self, other), bwd)

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        out_vals = self.values * other.values
        a_vals, b_vals = self.values, other.values

        def bwd(g):
            self._accumulate(_unbroadcast(g * b_vals, self.shape))
            other._accumulate(_unbroadcast(g * a_vals, other.shape))

        return Tensor._make(out_vals, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        if np.any(other.values == 0.0):
            raise DomainError("division by exact zero")
        out_vals = self.values / other.values
        a_vals, b_vals = self.values, other.values

        def bwd(g):
            self._accumulate(_unbroadcast(g / b_vals, self.shape))
            other._accumulate(_unbroadcast(-g * a_vals / (b_vals * b_vals), other.shape))

        return Tensor._make(out_vals, (self, other), bwd)

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __neg__(self):
        def bwd(g):
            self._accumulate(-g)

        return Tensor._make(-self.values, (self,), bwd)

    def scale(self, c: float) -> "Tensor":
        c = float(c)

        def bwd(g):
            self._accumulate(g * c)

        return Tensor._make(self.values * c, (self,), bwd)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- elementwise functions ----------------------------------------------

    def exp(self):
        out_vals = np.exp(self.values)

        def bwd(g):
            self._accumulate(g * out_vals)

        return Tensor._make(out_vals, (self,), bwd)

    def log(self):
        if np.any(self.values <= 0.0):
            raise DomainError("log of non-positive input")
        vals = self.values

        def bwd(g):
            self._accumulate(g / vals)

        return Tensor._make(np.log(vals), (self,), bwd)

    def sqrt(self):
        if np.any(self.values < 0.0):
            raise DomainError("sqrt of negative input")
        out_vals = np.sqrt(self.values)

        def bwd(g):
            self._accumulate(g / (2.0 * out_vals))

        return Tensor._make(out_vals, (self,), bwd)

    def sin(self):
        vals = self.values

        def bwd(g):
            self._accumulate(g * np.cos(vals))

        return Tensor._make(np.sin(vals), (self,), bwd)

    def cos(self):
        vals = self.values

        def bwd(g):
            self._accumulate(-g * np.sin(vals))

        return Tensor._make(np.cos(vals), (self,), bwd)

    def gelu(self):
        """Exact (erf-based) GELU."""
        x = self.values
        phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        out_vals = x * phi
        dens = np.exp(-0.5 * x * x) * _INV_SQRT_2PI

        def bwd(g):
            self._accumulate(g * (phi + x * dens))

        return Tensor._make(out_vals, (self,), bwd)

    # -- shape manipulation --------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.shape

        def bwd(g):
            self._accumulate(g.reshape(old_shape))

        return Tensor._make(self.values.reshape(shape), (self,), bwd)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(range(self.ndim))[::-1]
        inverse = np.argsort(axes)

        def bwd(g):
            self._accumulate(g.transpose(inverse))

        return Tensor._make(self.values.transpose(axes), (self,), bwd)

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, key):
        out_vals = self.values[key]
        shape, dtype = self.shape, self.values.dtype

        def bwd(g):
            full = np.zeros(shape, dtype=dtype)
            full[key] = g
            self._accumulate(full)

        return Tensor._make(out_vals, (self,), bwd)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_vals = self.values.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def bwd(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, shape).copy())
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, shape).copy())

        return Tensor._make(out_vals, (self,), bwd)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims).scale(1.0 / n)


# -- free functions -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast, last two contract."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatchError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out_vals = np.matmul(a.values, b.values)
    a_vals, b_vals = a.values, b.values

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b_vals, -1, -2))
        gb = np.matmul(np.swapaxes(a_vals, -1, -2), g)
        if _FAULT_OP == "matmul":
            ga = ga * 1.01
        a._accumulate(_unbroadcast(ga, a.shape))
        b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._make(out_vals, (a, b), bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    out_vals = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return Tensor._make(out_vals, tuple(tensors), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Numerically stabilized softmax along the last axis."""
    if np.any(np.isnan(x.values)):
        raise NumericError("softmax of NaN input")
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_vals = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out_vals).sum(axis=-1, keepdims=True)
        x._accumulate(out_vals * (g - dot))

    return Tensor._make(out_vals, (x,), bwd)


def log_softmax_rows(x: Tensor) -> Tensor:
    """log(softmax) along the last axis, computed stably."""
    if np.any(np.isnan(x.values)):
        raise NumericError("log_softmax of NaN input")
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_vals = shifted - lse
    soft = np.exp(out_vals)

    def bwd(g):
        x._accumulate(g - soft * g.sum(axis=-1, keepdims=True))

    return Tensor._make(out_vals, (x,), bwd)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by max(||row||, eps)."""
    norms = np.sqrt((x.values * x.values).sum(axis=-1, keepdims=True))
    denom = np.maximum(norms, eps)
    out_vals = x.values / denom
    vals = x.values
    live = norms > eps

    def bwd(g):
        dot = (g * vals).sum(axis=-1, keepdims=True)
        gx = g / denom - np.where(live, vals * dot / (denom**3), 0.0)
        if _FAULT_OP == "l2_normalize_rows":
            gx = g / denom
        x._accumulate(gx)

    return Tensor._make(out_vals, (x,), bwd)


def gather_cells(grid: Tensor, rows, cols) -> Tensor:
    """Pick cell vectors grid[i, rows[i], cols[i], :] for each batch index i."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    n = grid.shape[0]
    idx = np.arange(n)
    out_vals = grid.values[idx, rows, cols, :]
    shape, dtype = grid.shape, grid.values.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, (idx, rows, cols), g)
        grid._accumulate(full)

    return Tensor._make(out_vals, (grid,), bwd)


# -- backward pass ------------------------------------------------------------


def backward(root: Tensor):
    """Reverse-accumulate gradients from a scalar root through the graph."""
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    order = []
    seen = set()
    stack = [(root, False)]
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
    root.grad = np.ones_like(root.values)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


@dataclass
class GradCheckReport:
    op_name: str
    max_relative_error: float
    tolerance: float
    passed: bool


def grad_check(fn, inputs, tolerance=1e-4, op_name="fn", zero_floor=1e-7) -> GradCheckReport:
    """Compare backward gradients of fn(*inputs) against central differences.

    Inputs must be 64-bit tensors; finite differences use a per-element step
    h = 1e-6 * max(1, |x|). Relative error is |g_ad - g_fd| scaled by
    max(1e-8, |g_ad| + |g_fd|). Components where both gradients sit below
    `zero_floor` are counted as matching: central differences of a constant
    direction only return float cancellation noise (~1e-9), which would
    otherwise swamp the 1e-8 denominator floor for structurally zero
    gradients.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("grad_check requires 64-bit inputs")
        t.zero_grad()
        t.requires_grad = True
    out = fn(*inputs)
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.values) for t in inputs]

    max_err = 0.0
    for t, g_ad in zip(inputs, analytic):
        flat = t.values.reshape(-1)
        g_fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            h = 1e-6 * max(1.0, abs(orig))
            flat[i] = orig + h
            f_plus = float(fn(*inputs).values)
            flat[i] = orig - h
            f_minus = float(fn(*inputs).values)
            flat[i] = orig
            g_fd[i] = (f_plus - f_minus) / (2.0 * h)
        g_ad_flat = g_ad.reshape(-1)
        if not (np.all(np.isfinite(g_ad_flat)) and np.all(np.isfinite(g_fd))):
            raise NumericError(f"non-finite gradient in grad_check of {op_name}")
        denom = np.maximum(1e-8, np.abs(g_ad_flat) + np.abs(g_fd))
        rel = np.abs(g_ad_flat - g_fd) / denom
        rel[(np.abs(g_ad_flat) < zero_floor) & (np.abs(g_fd) < zero_floor)] = 0.0
        err = float(np.max(rel)) if flat.size else 0.0
        max_err = max(max_err, err)

    return GradCheckReport(op_name=op_name, max_relative_error=max_err, tolerance=tolerance, passed=max_err <= tolerance)
