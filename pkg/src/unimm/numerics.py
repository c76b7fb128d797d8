"""Dense float64 arrays with a reverse-mode gradient tape.

Every differentiable quantity in the package is a :class:`Tensor`. Operations
executed while a :class:`Tape` is active (and touching at least one tensor that
requires a gradient) are recorded; ``tape.backward(loss)`` then walks the
record in reverse and accumulates gradients.  Without an active tape the same
functions run as plain numpy, which is what inference uses.

The primitive set is closed: matmul, add/sub/mul/div, rms_norm,
masked_softmax, gather/scatter of rows, concat, slicing, reshape/transpose,
sum/mean, mse, cross-entropy, silu/gelu/tanh/exp/log/sqrt/clip, embedding
lookup and masked fill.  Everything else composes from these.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
RMS_EPS = 1e-6


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericsError(RuntimeError):
    """A numeric precondition failed (non-finite value, empty softmax row...)."""


_TAPES: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    # -- conveniences -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A trainable leaf. ``decay`` marks tensors that receive weight decay."""

    __slots__ = ("group", "decay")

    def __init__(self, data, name: str | None = None, group: str | None = None, decay: bool = False):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
        self.group = group
        self.decay = decay
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


class Tape:
    """Records primitive ops executed inside ``with Tape() as tape:``."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, out: Tensor, parents: tuple, backward: Callable) -> None:
        self.nodes.append((out, parents, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, parents, fn in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for p, pg in zip(parents, grads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                if isinstance(p, Parameter):
                    p.grad += pg
                elif p.grad is None:
                    p.grad = pg
                else:
                    p.grad = p.grad + pg
            if not isinstance(out, Parameter):
                out.grad = None
        self.nodes.clear()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: tuple, backward: Callable) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- arithmetic ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs ≥2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")

    def backward(g):
        # frozen weights and raw inputs get no gradient product
        ga = gb = None
        if bd.ndim == 2:
            if a.requires_grad:
                ga = g @ bd.T
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


# -- shape ops --------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def take_rows(x, index) -> Tensor:
    """Gather rows of a 2-D tensor: ``x[index]``."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D tensor, got {x.shape}")
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward)


def scatter_rows(base, index, values) -> Tensor:
    """Copy of 2-D ``base`` with rows ``index`` replaced by ``values`` (unique index)."""
    base, values = as_tensor(base), as_tensor(values)
    index = np.asarray(index, dtype=np.int64)
    if base.ndim != 2 or values.ndim != 2 or values.shape != (len(index), base.shape[1]):
        raise ShapeError(f"scatter_rows: base {base.shape}, index {index.shape}, values {values.shape}")
    out = base.data.copy()
    out[index] = values.data

    def backward(g):
        gb = g.copy()
        gb[index] = 0.0
        return gb, g[index]

    return _make(out, (base, values), backward)


def embedding(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), backward)


def masked_fill(x, mask, value: float) -> Tensor:
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return _make(np.where(mask, value, x.data), (x,), lambda g: (np.where(mask, 0.0, g),))


# -- reductions -------------------------------------------------------------

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# -- elementwise nonlinearities ----------------------------------------------

def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    s = _sigmoid(xd)
    return _make(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    th = np.tanh(inner)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _make(0.5 * xd * (1.0 + th), (x,), backward)


# -- fused kernels -----------------------------------------------------------

def rms_norm(x, gamma=None, eps: float = RMS_EPS) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gamma`` over the trailing axis.

    ``gamma=None`` means a fixed all-ones scale.
    """
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"rms_norm needs a non-empty trailing axis, got {x.shape}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    xd = x.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * r
    if gamma is None:
        parents: tuple = (x,)
        gd = None
        out = xhat
    else:
        gamma = as_tensor(gamma)
        if gamma.shape != (x.shape[-1],):
            raise ShapeError(f"rms_norm gamma shape {gamma.shape} != ({x.shape[-1]},)")
        gd = gamma.data
        parents = (x, gamma)
        out = xhat * gd

    def backward(g):
        gy = g if gd is None else g * gd
        gx = r * (gy - xhat * np.mean(gy * xhat, axis=-1, keepdims=True))
        if gd is None:
            return (gx,)
        return gx, (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)

    return _make(out, parents, backward)


def masked_softmax(scores, mask=None) -> Tensor:
    """Softmax over the last axis with disallowed entries forced to exactly 0.

    ``mask`` is boolean and broadcastable to ``scores``; every row must keep at
    least one allowed entry.
    """
    scores = as_tensor(scores)
    sd = scores.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            full = np.broadcast_to(mask, sd.shape)
        except ValueError as exc:
            raise ShapeError(f"mask {mask.shape} does not broadcast to scores {sd.shape}") from exc
        if not mask.any(axis=-1).all():
            raise NumericsError("masked_softmax: a row has no allowed entries")
        sd = np.where(full, sd, -np.inf)
    e = np.exp(sd - sd.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _make(p, (scores,), backward)


def softmax(scores) -> Tensor:
    return masked_softmax(scores, None)


def mse(pred, target) -> Tensor:
    """Mean of squared differences (``target`` treated as a constant)."""
    pred = as_tensor(pred)
    td = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if pred.shape != td.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {td.shape}")
    diff = pred.data - td
    n = max(diff.size, 1)
    return _make(np.sum(diff * diff) / n, (pred,), lambda g: (g * 2.0 * diff / n,))


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean token cross-entropy over positions where ``mask`` is true.

    Returns exactly 0 (still on the graph) when no position is selected.
    """
    logits = as_tensor(logits)
    ld = logits.data
    V = ld.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != ld.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {ld.shape}")
    m = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    sel = targets[m]
    if sel.size and (sel.min() < 0 or sel.max() >= V):
        raise ShapeError(f"target id out of vocabulary range [0, {V})")
    count = int(m.sum())
    safe_t = np.where(m, targets, 0)
    shifted = ld - ld.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -np.sum(np.where(m, picked, 0.0)) / max(count, 1)

    def backward(g):
        if count == 0:
            return (np.zeros_like(ld),)
        p = np.exp(logp)
        np.put_along_axis(p, safe_t[..., None], np.take_along_axis(p, safe_t[..., None], axis=-1) - 1.0, axis=-1)
        return (g * p * (m[..., None] / count),)

    return _make(np.asarray(loss), (logits,), backward)


# -- gradient checking ---------------------------------------------------------

def analytic_grads(f: Callable[[], Tensor], params: Sequence[Parameter]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    return [p.grad.copy() for p in params]


def gradient_errors(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Relative error of the tape gradient against central differences, per tensor.

    Error for one tensor is ``|analytic - numeric| / (|numeric| + 1e-12)`` with
    ``|.|`` the Euclidean norm over the checked entries.  ``max_entries`` caps
    the number of (seeded, randomly chosen) entries probed per tensor.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    params = list(params)
    analytic = analytic_grads(f, params)
    rng = np.random.default_rng(seed)
    out: dict[str, float] = {}
    for k, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(as_tensor(f()).data)
            flat[i] = orig - eps
            fm = float(as_tensor(f()).data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericsError(f"non-finite objective while probing {p.name or k}")
            num[j] = (fp - fm) / (2 * eps)
        ana = ga.reshape(-1)[idx]
        out[p.name or str(k)] = float(np.linalg.norm(ana - num) / (np.linalg.norm(num) + 1e-12))
    return out


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max over parameter tensors of the relative gradient error (see :func:`gradient_errors`)."""
    errs = gradient_errors(f, list(params), eps=eps, max_entries=max_entries, seed=seed)
    return max(errs.values()) if errs else 0.0
