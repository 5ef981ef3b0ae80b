"""Float64 tensors with tape-based reverse-mode differentiation.

Only the primitives needed by the classifier/generator stacks and the
distillation losses are provided.  Every op checks its forward value for
NaN/Inf and raises :class:`NonFiniteError` naming itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

STREAMS = {"data": 0, "init": 1, "noise": 2, "labels": 3, "ema": 4, "memory": 5, "probe": 6, "export": 7}


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"non-finite value produced by '{op}' ({where})")
        self.op = op


class ShapeError(ValueError):
    pass


def rng_stream(seed: int, stream: str | int, *keys: int) -> np.random.Generator:
    """Independent generator for a (seed, stream, *keys) tuple."""
    if isinstance(stream, str) and stream not in STREAMS:
        raise ValueError(f"unknown rng stream {stream!r}")
    sid = STREAMS[stream] if isinstance(stream, str) else int(stream)
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, sid, *(int(k) for k in keys)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward_fn=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: mul(a, 1.0 / b) if np.isscalar(b) else div(a, b)
    __neg__ = lambda a: mul(a, -1.0)
    __matmul__ = lambda a, b: matmul(a, b)
    __pow__ = lambda a, p: power(a, p)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# non-finite results are reported by _node, so numpy's own warnings are redundant
_QUIET = {"divide": "ignore", "over": "ignore", "invalid": "ignore"}


def _finite(value: np.ndarray) -> bool:
    # a finite sum implies finite entries; only fall back to the full scan when it is not
    with np.errstate(**_QUIET):
        return math.isfinite(value.sum()) or bool(np.isfinite(value).all())


def _node(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not _finite(value):
        raise NonFiniteError(op)
    for p in parents:
        if p.requires_grad:
            return Tensor(value, True, tuple(parents), backward_fn, op)
    return Tensor(value, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---- elementwise / linear algebra -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(**_QUIET):
        out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(**_QUIET):
        out = a.data @ b.data
    return _node(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def power(a: Tensor, p: float) -> Tensor:
    with np.errstate(**_QUIET):
        out = a.data ** p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(**_QUIET):
        out = np.sqrt(a.data)

    def back(g):
        with np.errstate(**_QUIET):
            return (g * 0.5 / out,)
    return _node(out, (a,), back, "sqrt")


def exp(a: Tensor) -> Tensor:
    with np.errstate(**_QUIET):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(**_QUIET):
        out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def absolute(a: Tensor) -> Tensor:
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)
    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), back, "mean")


def norm_rows(a: Tensor) -> Tensor:
    """Euclidean norm of each row of a 2-D tensor."""
    out = np.sqrt((a.data * a.data).sum(axis=1))
    safe = np.where(out > 0, out, 1.0)
    return _node(out, (a,), lambda g: (g[:, None] * a.data / safe[:, None],), "norm_rows")


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts),
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        out = np.zeros_like(table.data)
        np.add.at(out, index, g)
        return (out,)
    return _node(table.data[index], (table,), back, "gather_rows")


# ---- layer primitives ----------------------------------------------------------------

def dense(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise affine map ``x @ W + b``."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not conform to weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} does not match output width {W.shape[1]}")
    if b is None:
        return matmul(x, W)
    with np.errstate(**_QUIET):
        out = x.data @ W.data + b.data
    return _node(out, (x, W, b),
                 lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)), "dense")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)
    return _node(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    out = np.exp(-np.logaddexp(0.0, -x.data))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind in ("identity", "none"):
        return x
    raise ValueError(f"unknown activation {kind!r}")


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)
    return _node(out, (logits,), lambda g: (g - p * g.sum(axis=1, keepdims=True),), "log_softmax")


@dataclass
class BatchNormState:
    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, d: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(Tensor(np.ones(d), True), Tensor(np.zeros(d), True), np.zeros(d), np.ones(d), momentum, eps)


def batch_moments(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-feature batch mean and biased variance as graph tensors."""
    n = x.shape[0]
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0)
    mu_t = _node(mu, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "batch_mean")
    var_t = _node(var, (x,), lambda g: (xc * (2.0 * g / n),), "batch_var")
    return mu_t, var_t


def batchnorm(x: Tensor, s: BatchNormState, mode: str = "train", update_stats: bool = True,
              scale: Tensor | None = None, shift: Tensor | None = None, moments: bool = True):
    """Batch normalization over axis 0.

    Returns ``(y, mu, var)`` where ``mu``/``var`` are the (biased) batch moments
    as graph tensors in either mode (``None`` with ``moments=False``); running
    statistics are only touched in train mode with ``update_stats``.
    """
    n = x.shape[0]
    if mode == "train" and n < 2:
        raise ShapeError("batchnorm in train mode needs at least 2 rows")
    scale = s.scale if scale is None else scale
    shift = s.shift if shift is None else shift
    mu = var = None
    if moments:
        mu, var = batch_moments(x)
    if mode == "train":
        mu_d = x.data.mean(axis=0) if mu is None else mu.data
        xc = x.data - mu_d
        var_d = (xc * xc).mean(axis=0) if var is None else var.data
        inv = 1.0 / np.sqrt(var_d + s.eps)
        xhat = xc * inv

        def back(g):
            gscale = (g * xhat).sum(axis=0)
            gshift = g.sum(axis=0)
            dxhat = g * scale.data
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            return dx, gscale, gshift
        if update_stats:
            m = s.momentum
            s.running_mean = (1.0 - m) * s.running_mean + m * mu_d
            s.running_var = (1.0 - m) * s.running_var + m * var_d
    elif mode == "eval":
        inv = 1.0 / np.sqrt(s.running_var + s.eps)
        xhat = (x.data - s.running_mean) * inv

        def back(g):
            return g * scale.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    y = _node(xhat * scale.data + shift.data, (x, scale, shift), back, f"batchnorm_{mode}")
    return y, mu, var


# ---- differentiation ---------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(loss: Tensor, params: Mapping[str, Tensor] | Sequence[Tensor]):
    """Reverse-mode derivatives of a scalar ``loss`` w.r.t. ``params``.

    Parameters the loss does not depend on get exact zeros.  Returns a dict when
    given a mapping, otherwise a list in the same order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_toposort(loss)):
            g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for p, gp in zip(node.parents, node.backward_fn(g)):
                if not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else prev + gp
    items = params.items() if isinstance(params, Mapping) else enumerate(params)
    out = {}
    for k, p in items:
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        elif not _finite(g):
            raise NonFiniteError(f"gradient of {k}", "backward")
        out[k] = g.reshape(p.shape)
    return out if isinstance(params, Mapping) else list(out.values())


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor] | Sequence[Tensor],
                      eps: float = 1e-5, n_coords: int = 100, seed: int = 0,
                      floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the loss from the current values in ``params``.
    Nets with more than 10^4 parameters are checked on a random subsample of
    ``n_coords`` coordinates; smaller ones are swept fully.  The relative error
    uses ``max(|a|, |n|, floor)`` as denominator.
    """
    plist = list(params.values()) if isinstance(params, Mapping) else list(params)
    analytic = gradients(loss_fn(), plist)
    coords = [(i, j) for i, p in enumerate(plist) for j in range(p.data.size)]
    if len(coords) > 10_000:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max(n_coords, 100), replace=False)
        coords = [coords[k] for k in pick]
    worst = 0.0
    for i, j in coords:
        p = plist[i]
        base = p.data
        flat = base.ravel().copy()
        flat[j] = base.flat[j] + eps
        p.data = flat.reshape(base.shape)
        f_plus = loss_fn().item()
        flat[j] = base.flat[j] - eps
        p.data = flat.reshape(base.shape)
        f_minus = loss_fn().item()
        p.data = base
        num = (f_plus - f_minus) / (2 * eps)
        a = analytic[i].flat[j]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst

