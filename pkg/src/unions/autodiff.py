"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every operation appends a node to an implicit acyclic graph
that lives only for the current forward pass.  ``backward`` walks the graph
once and returns gradients keyed by parameter name.  All arithmetic is
64-bit; two identical forward passes produce bit-identical outputs.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import NumericalError, ValidationError


class ShapeError(ValidationError):
    """Operand shapes are incompatible."""


class ContractError(ValidationError):
    """Operation called outside its contract (e.g. non-scalar loss)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense f64 array plus an optional handle into the computation graph.

    A Tensor without parents is a leaf; leaves with ``requires_grad`` and a
    ``name`` are parameters and show up in the gradient map returned by
    :func:`backward`.  Tensors outside any graph are immutable by convention
    and safe to share read-only.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], list[tuple[Tensor, np.ndarray]]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; constants are wrapped as gradient-free leaves
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes that numpy broadcasting introduced."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g, b.shape)))
        return out

    return _from_op(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(-g, b.shape)))
        return out

    return _from_op(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g * b.data, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g * a.data, b.shape)))
        return out

    return _from_op(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        return [(a, g * s)]

    return _from_op(a.data * s, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast (both operands >= 2-D)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")

    def bwd(g):
        out = []
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            out.append((a, _unbroadcast(ga, a.shape)))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            out.append((b, _unbroadcast(gb, b.shape)))
        return out

    return _from_op(a.data @ b.data, (a, b), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        return [(a, g * out_data)]

    return _from_op(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        return [(a, g / a.data)]

    return _from_op(np.log(a.data), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    def bwd(g):
        return [(a, g * (a.data > 0.0))]

    return _from_op(np.maximum(a.data, 0.0), (a,), bwd)


def clip_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo) elementwise; gradient is zero where the floor is active."""

    def bwd(g):
        return [(a, g * (a.data > lo))]

    return _from_op(np.maximum(a.data, lo), (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if axis is None:
            return [(a, np.broadcast_to(g, a.shape).copy())]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(gg, a.shape).copy())]

    return _from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]

    def bwd(g):
        if axis is None:
            return [(a, np.broadcast_to(g / n, a.shape).copy())]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(gg / n, a.shape).copy())]

    return _from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(g):
        return [(a, g.reshape(a.shape))]

    return _from_op(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return [(a, g.transpose(inv))]

    return _from_op(a.data.transpose(axes), (a,), bwd)


# ---------------------------------------------------------------------------
# fused ops with closed-form backward passes
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, computed with max-subtraction.

    Each output row is nonnegative and sums to 1 within 1e-12.  NaN in the
    input is refused rather than silently propagated.
    """
    if np.isnan(np.min(x.data)):
        raise NumericalError("NaN input to softmax_rows")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return [(x, y * (g - dot))]

    return _from_op(y, (x,), bwd)


def log_softmax_rows(x: Tensor) -> Tensor:
    if np.isnan(np.min(x.data)):
        raise NumericalError("NaN input to log_softmax_rows")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse
    probs = np.exp(out_data)

    def bwd(g):
        return [(x, g - probs * g.sum(axis=-1, keepdims=True))]

    return _from_op(out_data, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis vector to mean 0 / variance 1, then affine."""
    d = x.shape[-1]
    if d < 1:
        raise ContractError("layer_norm needs a non-empty last axis")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g):
        out = []
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.sum(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
            out.append((x, inv / d * (d * dxhat - m1 - xhat * m2)))
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            out.append((gamma, (g * xhat).sum(axis=lead)))
        if beta.requires_grad:
            out.append((beta, g.sum(axis=lead)))
        return out

    return _from_op(gamma.data * xhat + beta.data, (x, gamma, beta), bwd)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from an embedding table; ids is an integer array."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding id out of range")

    def bwd(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return [(weight, gw)]

    return _from_op(weight.data[ids], (weight,), bwd)


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry per vector along the last axis: out[..] = x[.., idx[..]]."""
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"gather index shape {idx.shape} != {x.shape[:-1]}")
    flat_idx = idx.ravel()
    rows = np.arange(flat_idx.size)
    out_data = x.data.reshape(-1, x.shape[-1])[rows, flat_idx].reshape(idx.shape)

    def bwd(g):
        gx = np.zeros_like(x.data).reshape(-1, x.shape[-1])
        gx[rows, flat_idx] = g.ravel()
        return [(x, gx.reshape(x.shape))]

    return _from_op(out_data, (x,), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout driven by an explicit generator; identity when off."""
    if rng is None or p <= 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def bwd(g):
        return [(x, g * mask)]

    return _from_op(x.data * mask, (x,), bwd)


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------

GradientMap = dict


def backward(loss: Tensor) -> dict[str, Tensor]:
    """Reverse-mode sweep from a scalar loss.

    Returns gradients keyed by parameter name for every named leaf reachable
    from the loss; unreachable parameters are absent.  Also materializes
    ``.grad`` on every reachable leaf.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in node._backward(g):
            if not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    out: dict[str, Tensor] = {}
    for node in topo:
        if node._backward is None and node.requires_grad:
            g = grads.get(id(node))
            if g is not None:
                node.grad = g
                if node.name is not None:
                    out[node.name] = Tensor(g)
    return out


def finite_diff_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
) -> float:
    """Compare ``backward`` against central finite differences.

    Perturbs every coordinate of every parameter by +-eps and compares
    (f(th+eps) - f(th-eps)) / (2 eps) to the reverse-mode gradient.  Returns
    the largest coordinate-wise discrepancy divided by the gradient's
    max-magnitude scale, floored at 1e-8 so a constant function scores 0.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"eps {eps} outside [1e-7, 1e-3]")

    gmap = backward(f(params))
    max_diff = 0.0
    grad_scale = 0.0
    for name, p in params.items():
        analytic = gmap[name].data.ravel() if name in gmap else np.zeros(p.data.size)
        flat = p.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = f(params).item()
                flat[i] = orig - eps
                fm = f(params).item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            max_diff = max(max_diff, abs(fd - analytic[i]))
            grad_scale = max(grad_scale, abs(fd), abs(analytic[i]))
    return max_diff / max(grad_scale, 1e-8)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Scaled uniform init with bound sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = shape[0], shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)
