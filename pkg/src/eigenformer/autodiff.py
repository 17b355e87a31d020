"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every differentiable op builds a node holding its parents and a closure that
maps the output gradient to parent gradients. ``backward`` orders the nodes
reachable from the loss by creation index (a valid reverse topological order,
since outputs are always created after their inputs), runs each closure once,
and then releases the recorded graph.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "BackwardError",
    "NondeterministicFunctionError",
    "BatchNormState",
    "no_grad",
    "tensor",
    "parameter",
    "backward",
    "grad_check",
    "gradient_comparison",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "concat",
    "reshape",
    "transpose",
    "take",
    "softmax",
    "relu",
    "dropout",
    "batch_norm",
    "reduce_sum",
    "reduce_mean",
    "segment_sum",
    "segment_mean",
    "mae_loss",
    "softmax_cross_entropy",
    "sigmoid_bce",
]

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


class NondeterministicFunctionError(RuntimeError):
    pass


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "_parents", "_backward", "_id", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _make(value: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(value)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {', '.join(map(str, shapes))}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("add", a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    av, bv = a.value, b.value

    def bw(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _make(av * bv, (a, b), bw)


def neg(a) -> Tensor:
    a = tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    av, bv = a.value, b.value

    def bw(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(av @ bv, (a, b), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, bw)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a, index) -> Tensor:
    """Gather rows along axis 0 (an embedding lookup when ``a`` is a table)."""
    a = tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise ShapeError(f"take: index out of range for axis of size {a.shape[0]}")

    def bw(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.value[index], (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = a.value.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(out, (a,), bw)


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` that share a segment id."""
    a = tensor(a)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape != a.shape[:1]:
        raise ShapeError(f"segment_sum: {ids.shape[0]} ids for {a.shape[0]} rows")
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, ids, a.value)
    return _make(out, (a,), lambda g: (g[ids],))


def segment_mean(a, segment_ids, num_segments: int) -> Tensor:
    ids = np.asarray(segment_ids, dtype=np.int64)
    counts = np.maximum(np.bincount(ids, minlength=num_segments), 1).astype(np.float64)
    total = segment_sum(a, ids, num_segments)
    shape = (num_segments,) + (1,) * (total.ndim - 1)
    return mul(total, 1.0 / counts.reshape(shape))


# ---------------------------------------------------------------------------
# activations and normalisation


def softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (a,), bw)


def dropout(a, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: keep with probability ``1 - rate`` and rescale."""
    a = tensor(a)
    if not train or rate <= 0.0:
        return a
    if rate >= 1.0:
        raise ValueError("dropout rate must be below 1")
    if rng is None:
        raise ValueError("dropout at train time needs a random generator")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.value * mask, (a,), lambda g: (g * mask,))


class BatchNormState:
    """Running statistics for one batch-norm site."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state: BatchNormState, train: bool) -> Tensor:
    """Per-feature normalisation over rows of a 2-D input.

    Train mode uses biased batch variance and updates the running estimates
    (unbiased variance); eval mode uses the running estimates.
    """
    x, gamma, beta = tensor(x), tensor(gamma), tensor(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    xv, gv = x.value, gamma.value
    eps = state.eps
    if train:
        n = xv.shape[0]
        mu = xv.mean(axis=0)
        var = xv.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mu) * inv_std
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        state.running_var = (1 - m) * state.running_var + m * unbiased

        def bw(g):
            dxhat = g * gv
            dx = inv_std / n * (
                n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
            )
            return dx, np.sum(g * xhat, axis=0), g.sum(axis=0)

    else:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (xv - state.running_mean) * inv_std

        def bw(g):
            return g * gv * inv_std, np.sum(g * xhat, axis=0), g.sum(axis=0)

    return _make(xhat * gv + beta.value, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# losses (all return the mean over entries, as a 0-d tensor)


def mae_loss(pred, target) -> Tensor:
    pred = tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"mae_loss: prediction {pred.shape} vs target {t.shape}")
    diff = pred.value - t
    count = max(diff.size, 1)
    return _make(
        np.array(np.abs(diff).sum() / count), (pred,), lambda g: (g * np.sign(diff) / count,)
    )


def softmax_cross_entropy(logits, labels) -> Tensor:
    logits = tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError("softmax_cross_entropy: label out of range")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.size)
    count = max(labels.size, 1)
    loss = np.sum(lse - z[rows, labels]) / count

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (g * p / count,)

    return _make(np.array(loss), (logits,), bw)


def sigmoid_bce(logits, targets) -> Tensor:
    logits = tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"sigmoid_bce: logits {logits.shape} vs targets {t.shape}")
    z = logits.value
    count = max(z.size, 1)
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def bw(g):
        sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
        return (g * (sig - t) / count,)

    return _make(np.array(per.sum() / count), (logits,), bw)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) to every reachable leaf with ``requires_grad``.

    Returns a map leaf -> gradient and stores each gradient on ``leaf.grad``.
    The recorded graph is released afterwards, so a second call fails.
    """
    if not isinstance(loss, Tensor) or loss.value.size != 1 or loss.ndim > 1:
        shape = getattr(loss, "shape", None)
        raise BackwardError(f"backward needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        raise BackwardError("loss is detached: no input requires grad")
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.value)
        return {loss: loss.grad}

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    if any(t._backward is None for t in nodes.values() if t._parents):
        raise BackwardError("graph already consumed by an earlier backward call")

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.value)}
    leaves: dict[Tensor, np.ndarray] = {}
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            continue
        if t.is_leaf:
            leaves[t] = g
            t.grad = g
            continue
        parent_grads = t._backward(g)
        for p, pg in zip(t._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg

    for t in nodes.values():
        if t._parents:
            t._backward = None
    return leaves


def gradient_comparison(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    max_coords: int = 10_000,
    seed: int = 0,
) -> list[tuple[int, tuple, float, float]]:
    """``(param index, coordinate, analytic, numeric)`` for each checked coordinate.

    ``f`` must rebuild the loss from the current parameter values on each
    call; a nondeterministic ``f`` is rejected. Above ``max_coords`` total
    coordinates a random subset is checked.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    loss = f()
    analytic_map = backward(loss)
    with no_grad():
        again = f().item()
    if again != loss.item():
        raise NondeterministicFunctionError(
            "f returned different values for identical parameters "
            f"({loss.item()!r} vs {again!r}); disable dropout before checking"
        )

    coords = [(pi, idx) for pi, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in np.sort(pick)]

    rows = []
    with no_grad():
        for pi, idx in coords:
            p = params[pi]
            analytic = analytic_map.get(p)
            a = 0.0 if analytic is None else float(analytic[idx])
            orig = p.value[idx]
            p.value[idx] = orig + h
            fp = f().item()
            p.value[idx] = orig - h
            fm = f().item()
            p.value[idx] = orig
            rows.append((pi, idx, a, (fp - fm) / (2.0 * h)))
    return rows


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    max_coords: int = 10_000,
    seed: int = 0,
) -> float:
    """Worst relative error between ``backward`` and central differences.

    Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as the
    denominator. See :func:`gradient_comparison` for the contract on ``f``.
    """
    worst = 0.0
    for _, _, a, n in gradient_comparison(f, params, h, max_coords, seed):
        worst = max(worst, abs(a - n) / max(abs(a), abs(n), 1e-8))
    return worst
