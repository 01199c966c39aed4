"""Dense-tensor numerics with reverse-mode automatic differentiation.

Small numpy-backed engine: each op builds a node in an acyclic graph and
registers a closure that scatters the upstream gradient into its parents.
No broadcasting beyond trailing-axis bias addition; callers reshape
explicitly.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class IndexLookupError(IndexError):
    """Raised when an embedding/gather index is out of table range."""


class GradCheckError(RuntimeError):
    """Raised when a gradient check cannot be run (e.g. nondeterministic f)."""


class Tensor:
    """N-d array wrapped in a differentiation graph node.

    data is always a numpy float array (float32 or float64); grad, when
    populated, has the same shape and dtype.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        parents: tuple = (),
        backward: Callable[[np.ndarray], None] | None = None,
        name: str | None = None,
    ):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


def _node(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    track = any(p.requires_grad or p._parents for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, parents=parents, backward=backward)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; also allows adding a 1-D bias along the last axis."""
    b = _as_tensor(b, a)
    if a.shape == b.shape:
        out_data = a.data + b.data

        def bwd(g):
            a.accumulate_grad(g)
            b.accumulate_grad(g)

    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out_data = a.data + b.data

        def bwd(g):
            a.accumulate_grad(g)
            axes = tuple(range(g.ndim - 1))
            b.accumulate_grad(g.sum(axis=axes) if axes else g)

    else:
        raise ShapeMismatchError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _node(out_data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data - b.data

    def bwd(g):
        a.accumulate_grad(g)
        b.accumulate_grad(-g)

    return _node(out_data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product of same-shape tensors (or tensor * python scalar)."""
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, float(b))
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data * b.data

    def bwd(g):
        a.accumulate_grad(g * b.data)
        b.accumulate_grad(g * a.data)

    return _node(out_data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = a.data * c

    def bwd(g):
        a.accumulate_grad(g * c)

    return _node(out_data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands or batched 3-D operands."""
    if a.data.ndim == 2 and b.data.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(f"matmul: inner extents disagree: {a.shape} x {b.shape}")
    elif a.data.ndim == 3 and b.data.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeMismatchError(f"matmul: incompatible batched shapes {a.shape} x {b.shape}")
    else:
        raise ShapeMismatchError(f"matmul: unsupported ranks {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        a.accumulate_grad(g @ np.swapaxes(b.data, -1, -2))
        b.accumulate_grad(np.swapaxes(a.data, -1, -2) @ g)

    return _node(out_data, (a, b), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        a.accumulate_grad(np.transpose(g, inv))

    return _node(out_data, (a,), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)
    orig = a.shape

    def bwd(g):
        a.accumulate_grad(g.reshape(orig))

    return _node(out_data, (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            p.accumulate_grad(piece)

    return _node(out_data, tuple(parts), bwd)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds (indices may repeat)."""
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexLookupError(f"row index out of range for table with {n} rows")
    out_data = a.data[idx]

    def bwd(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        a.accumulate_grad(acc)

    return _node(out_data, (a,), bwd)


def embedding_lookup(ids, table: Tensor) -> Tensor:
    """Row gather from an embedding table; gradients scatter back."""
    return take_rows(table, ids)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out_data = a.data[start:stop]

    def bwd(g):
        acc = np.zeros_like(a.data)
        acc[start:stop] = g
        a.accumulate_grad(acc)

    return _node(out_data, (a,), bwd)


def gather_last(a: Tensor, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeMismatchError(f"gather_last: need 2-D tensor and per-row index, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexLookupError(f"column index out of range for width {a.shape[1]}")
    rows = np.arange(a.shape[0])
    out_data = a.data[rows, idx]

    def bwd(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, (rows, idx), g)
        a.accumulate_grad(acc)

    return _node(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax: max-subtraction keeps exp in range."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a.accumulate_grad(out_data * (g - inner))

    return _node(out_data, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    p = np.exp(out_data)

    def bwd(g):
        a.accumulate_grad(g - p * g.sum(axis=axis, keepdims=True))

    return _node(out_data, (a,), bwd)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU (GPT-2 lineage)."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    out_data = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du
        a.accumulate_grad(g * local)

    return _node(out_data, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each trailing-axis vector to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError(f"layer_norm: gain/bias must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        x.accumulate_grad(inv * (dxhat - m1 - xhat * m2))
        lead = tuple(range(g.ndim - 1))
        gain.accumulate_grad((g * xhat).sum(axis=lead) if lead else g * xhat)
        bias.accumulate_grad(g.sum(axis=lead) if lead else g)

    return _node(out_data, (x, gain, bias), bwd)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out_data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        a.accumulate_grad(np.full_like(a.data, g))

    return _node(out_data, (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def bwd(g):
        a.accumulate_grad(np.full_like(a.data, g / n))

    return _node(out_data, (a,), bwd)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype)
    factor = 1.0 / (1.0 - rate)
    out_data = a.data * keep * factor

    def bwd(g):
        a.accumulate_grad(g * keep * factor)

    return _node(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Reverse-accumulate gradients of a scalar loss over its graph."""
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# finite-difference oracle harness


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> dict:
    """Compare analytic gradients of f() against central finite differences.

    f must be deterministic (verified by double evaluation) and should be
    built on float64 parameters; finite differences are unreliable at
    float32.  Returns {"max_rel_error", "per_param", "passed"}.
    """
    params = list(params)
    v1 = float(f().data)
    v2 = float(f().data)
    if v1 != v2:
        raise GradCheckError("f is nondeterministic: double evaluation mismatch")

    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    per_param = {}
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().data)
            flat[i] = orig - step
            lo = float(f().data)
            flat[i] = orig
            num[i] = (hi - lo) / (2.0 * step)
        ana = analytic[pi].reshape(-1)
        # per-tensor relative error: elementwise deviation scaled by the
        # tensor's gradient magnitude, so near-zero entries at the
        # finite-difference noise floor do not dominate
        denom = max(float(np.abs(ana).max(initial=0.0)), float(np.abs(num).max(initial=0.0)), 1e-8)
        rel = float(np.abs(ana - num).max(initial=0.0)) / denom
        name = p.name or f"param{pi}"
        per_param[name] = rel
        worst = max(worst, rel)
    return {"max_rel_error": worst, "per_param": per_param, "passed": worst < tolerance}
