"""Dense float64 tensor with reverse-mode differentiation, plus shared loss primitives.

Every operation builds a node graph; Tensor.backward() runs the reverse sweep
in topological order. Gradients of all ops are verifiable by central finite
differences through grad_check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

EPS = 1e-7


class Tensor:
    """Immutable dense value with an optional gradient.

    `values` is always a float64 ndarray. Leaf tensors created with
    requires_grad=True accumulate into `.grad` during backward().
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, parents=(), backward=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        """A constant view of the same values; gradients stop here."""
        return Tensor(self.values)

    def backward(self, seed=None):
        """Reverse-mode sweep from this (typically scalar) tensor."""
        if seed is None:
            if self.values.size != 1:
                raise ValueError("backward() without seed needs a scalar tensor")
            seed = np.ones_like(self.values)
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic sugar; non-Tensor operands become constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.values + b.values
    return Tensor(
        out,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.values, parents=(a,), backward=lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.values * b.values
    return Tensor(
        out,
        parents=(a, b),
        backward=lambda g: (
            _unbroadcast(g * b.values, a.shape),
            _unbroadcast(g * a.values, b.shape),
        ),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.values / b.values
    return Tensor(
        out,
        parents=(a, b),
        backward=lambda g: (
            _unbroadcast(g / b.values, a.shape),
            _unbroadcast(-g * a.values / (b.values * b.values), b.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError("matmul expects 2-D operands; reshape vectors first")
    out = a.values @ b.values
    return Tensor(
        out,
        parents=(a, b),
        backward=lambda g: (g @ b.values.T, a.values.T @ g),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return Tensor(out, parents=(a,), backward=lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.values), parents=(a,), backward=lambda g: (g / a.values,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.values))
    return Tensor(out, parents=(a,), backward=lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return Tensor(out, parents=(a,), backward=lambda g: (g * (1.0 - out * out),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the clamp is inactive."""
    out = np.clip(a.values, lo, hi)
    inside = (a.values > lo) & (a.values < hi)
    return Tensor(out, parents=(a,), backward=lambda g: (g * inside,))


def clamp_guard(a: Tensor, lo: float, hi: float) -> Tensor:
    """Numerical guard for loss interiors: values are clamped but the gradient
    passes through unchanged, so saturated predictions can still recover.
    Identical to clip wherever the clamp is inactive."""
    out = np.clip(a.values, lo, hi)
    return Tensor(out, parents=(a,), backward=lambda g: (g,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return Tensor(out, parents=(a,), backward=backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.values.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.values.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def take(a: Tensor, idx) -> Tensor:
    """numpy indexing with scatter-add backward."""
    out = a.values[idx]

    def backward(g):
        ga = np.zeros_like(a.values)
        np.add.at(ga, idx, g)
        return (ga,)

    return Tensor(out, parents=(a,), backward=backward)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor(
        a.values.reshape(shape),
        parents=(a,),
        backward=lambda g: (g.reshape(a.shape),),
    )


def transpose(a: Tensor) -> Tensor:
    return Tensor(a.values.T, parents=(a,), backward=lambda g: (g.T,))


def softmax(a: Tensor, axis: int) -> Tensor:
    """Stable softmax along one axis; slices sum to 1."""
    shift = a.values.max(axis=axis, keepdims=True)  # constant shift, zero gradient
    e = exp(a - Tensor(shift))
    return e / tsum(e, axis=axis, keepdims=True)


def logsumexp(a: Tensor, axis: int) -> Tensor:
    shift = a.values.max(axis=axis, keepdims=True)
    return log(tsum(exp(a - Tensor(shift)), axis=axis, keepdims=True)) + Tensor(shift)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """2-D convolution, x: (Cin, H, W), w: (Cout, Cin, kh, kw), b: (Cout,)."""
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin}, weight {cin_w}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.zeros((cin, hp, wp))
    xp[:, pad : pad + h, pad : pad + wd] = x.values

    cols = np.empty((cin * kh * kw, ho * wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
            cols[(i * kw + j) * cin : (i * kw + j + 1) * cin] = patch.reshape(cin, -1)
    wf = w.values.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = (wf @ cols + b.values[:, None]).reshape(cout, ho, wo)

    def backward(g):
        gf = g.reshape(cout, -1)
        gw = (gf @ cols.T).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gb = gf.sum(axis=1)
        gcols = wf.T @ gf
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    (i * kw + j) * cin : (i * kw + j + 1) * cin
                ].reshape(cin, ho, wo)
        gx = gxp[:, pad : pad + h, pad : pad + wd]
        return (gx, gw, gb)

    return Tensor(out, parents=(x, w, b), backward=backward)


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of a 2-D map by an integer factor."""
    if a.values.ndim != 2:
        raise ValueError("upsample_nearest expects a 2-D map")
    h, w = a.shape
    out = np.repeat(np.repeat(a.values, factor, axis=0), factor, axis=1)

    def backward(g):
        return (g.reshape(h, factor, w, factor).sum(axis=(1, 3)),)

    return Tensor(out, parents=(a,), backward=backward)


def topk_avg_pool(a: Tensor, fraction: float) -> Tensor:
    """Mean of the k = max(1, floor(fraction*size)) largest values of a map.

    The subgradient routes to the selected elements; exact ties are broken
    toward the lowest flat index.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    flat = a.values.ravel()
    k = max(1, int(fraction * flat.size))
    picked = np.argsort(-flat, kind="stable")[:k]
    out = flat[picked].mean()

    def backward(g):
        ga = np.zeros_like(flat)
        ga[picked] = g / k
        return (ga.reshape(a.shape),)

    return Tensor(out, parents=(a,), backward=backward)


def bce(pred: Tensor, target) -> Tensor:
    """Binary cross entropy, summed over elements for vector inputs.

    Predictions are clamped to [EPS, 1-EPS] internally; this is the single
    numerical guard shared by every loss built on bce. The guard clamps
    values only, so gradients keep flowing at saturation.
    """
    t = np.asarray(target, dtype=np.float64)
    p = clamp_guard(pred, EPS, 1.0 - EPS)
    losses = neg(Tensor(t) * log(p) + Tensor(1.0 - t) * log(1.0 - p))
    return tsum(losses) if losses.values.ndim else losses


def weighted_ce(probs: Tensor, label: int, weight: float) -> Tensor:
    """-weight * ln(probs[label]) for a distribution over classes."""
    n = probs.values.shape[-1]
    if not 0 <= label < n:
        raise ValueError(f"label {label} out of range for {n} classes")
    p = clamp_guard(take(probs, label), EPS, 1.0)
    return neg(log(p)) * weight


@dataclass
class GradCheckEntry:
    """Per-input worst case of one finite-difference comparison."""

    index: int
    max_rel_err: float
    max_abs_analytic: float


@dataclass
class GradCheckReport:
    """Result of checking one operation's analytic gradients."""

    name: str
    max_rel_err: float
    entries: list[GradCheckEntry]

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(
    loss_fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    name: str = "op",
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `loss_fn` maps leaf Tensors to a scalar Tensor and must be deterministic.
    Relative error per element is |analytic - numeric| divided by
    max(1e-8, |analytic| + |numeric|).
    """
    leaves = [Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for v in inputs]
    out = loss_fn(*leaves)
    if not np.isfinite(out.values).all():
        raise ValueError(f"{name}: non-finite loss at the evaluation point")
    out.backward()
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values) for leaf in leaves
    ]

    entries = []
    for i, leaf in enumerate(leaves):
        base = leaf.values
        numeric = np.zeros_like(base)
        flat = base.ravel()
        num_flat = numeric.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = loss_fn(*leaves).item()
            flat[j] = orig - step
            lo = loss_fn(*leaves).item()
            flat[j] = orig
            num_flat[j] = (hi - lo) / (2.0 * step)
        denom = np.maximum(1e-8, np.abs(analytic[i]) + np.abs(numeric))
        rel = np.abs(analytic[i] - numeric) / denom
        entries.append(
            GradCheckEntry(
                index=i,
                max_rel_err=float(rel.max()) if rel.size else 0.0,
                max_abs_analytic=float(np.abs(analytic[i]).max()) if rel.size else 0.0,
            )
        )
    worst = max((e.max_rel_err for e in entries), default=0.0)
    return GradCheckReport(name=name, max_rel_err=worst, entries=entries)
