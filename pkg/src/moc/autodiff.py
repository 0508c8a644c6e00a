"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Operations on :class:`Tensor` always compute their forward value with plain
numpy. When a :class:`Tape` is active and an operand is tracked by it, the
operation is also appended to the tape together with its vector-Jacobian
product, so a taped forward pass produces exactly the same values as an
untaped one.

    with Tape() as tape:
        w = tape.watch(w0)
        loss = ad.sum(ad.tanh(x @ w) ** 2)
    (dw,) = tape.gradients(loss, [w])
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_active: list["Tape"] = []


class UntapedError(RuntimeError):
    """Raised when differentiating a node the tape never recorded."""


class Tensor:
    __slots__ = ("value", "id")
    __array_priority__ = 100

    def __init__(self, value):
        self.value = np.asarray(value)
        self.id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __len__(self):
        return len(self.value)

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        return f"Tensor({self.value!r})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)


class Tape:
    """Records operations on watched tensors for one reverse sweep."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def watch(self, array) -> Tensor:
        t = array if isinstance(array, Tensor) else Tensor(array)
        self._tracked.add(t.id)
        return t

    def tracks(self, t) -> bool:
        return isinstance(t, Tensor) and t.id in self._tracked

    def _record(self, out: Tensor, parents: tuple, vjp: Callable):
        self._tracked.add(out.id)
        self._records.append((out, parents, vjp))

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Adjoints of scalar ``loss`` with respect to each tensor in ``wrt``."""
        if not self.tracks(loss):
            raise UntapedError("loss was not computed on this tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        adjoints = {loss.id: np.ones_like(loss.value)}
        for out, parents, vjp in reversed(self._records):
            g = adjoints.get(out.id)
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or not self.tracks(parent):
                    continue
                if parent.id in adjoints:
                    adjoints[parent.id] = adjoints[parent.id] + pg
                else:
                    adjoints[parent.id] = pg
        grads = []
        for w in wrt:
            if not self.tracks(w):
                raise UntapedError("gradient requested for an unwatched tensor")
            g = adjoints.get(w.id)
            grads.append(np.zeros_like(w.value) if g is None else np.asarray(g, dtype=w.value.dtype))
        return grads


def value(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def stop_gradient(x) -> Tensor:
    """Same value, not recorded on any tape."""
    return Tensor(value(x))


def _make(out_value, parents: tuple, vjp: Callable) -> Tensor:
    out = Tensor(out_value)
    for tape in _active:
        if any(tape.tracks(p) for p in parents):
            tape._record(out, parents, vjp)
    return out


def _needed(t: Tensor) -> bool:
    return any(tape.tracks(t) for tape in _active)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Lift both operands; bare Python scalars take the other operand's float dtype."""
    def lift(x, other):
        if isinstance(x, Tensor):
            return x
        if isinstance(x, (int, float)):
            dt = value(other).dtype
            return Tensor(np.asarray(x, dtype=dt if np.issubdtype(dt, np.floating) else None))
        return Tensor(x)

    return lift(a, b), lift(b, a)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    na, nb = _needed(a), _needed(b)
    return _make(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa) if na else None, _unbroadcast(g, sb) if nb else None)
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    na, nb = _needed(a), _needed(b)
    return _make(
        a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa) if na else None, _unbroadcast(-g, sb) if nb else None)
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    na, nb = _needed(a), _needed(b)
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape) if na else None, _unbroadcast(g * av, bv.shape) if nb else None),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    out = av / bv
    na, nb = _needed(a), _needed(b)
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bv, av.shape) if na else None,
            _unbroadcast(-g * out / bv, bv.shape) if nb else None,
        ),
    )


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = _lift(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim != 2:
        raise ValueError("matmul expects (..., n, k) @ (k, m)")

    na, nb = _needed(a), _needed(b)

    def vjp(g):
        ga = g @ bv.T if na else None
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if nb else None
        return ga, gb

    return _make(av @ bv, (a, b), vjp)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = _lift(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = _lift(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis) * (1.0 / n)


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = 0.5 + 0.5 * np.tanh(0.5 * a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log1m(a, eps: float = 1e-6) -> Tensor:
    """``log(1 - a)`` with the argument of the log floored at ``eps``."""
    a = _lift(a)
    inner = np.maximum(1.0 - a.value, eps)
    live = 1.0 - a.value > eps
    return _make(np.log(inner), (a,), lambda g: (np.where(live, -g / inner, 0.0),))


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` for a constant floor; no gradient below it."""
    a = _lift(a)
    keep = a.value > floor
    return _make(np.where(keep, a.value, floor), (a,), lambda g: (g * keep,))


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = _lift(a)
    shape, dtype = a.shape, a.dtype
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)

    def vjp(g):
        out = np.zeros(shape, dtype=np.result_type(dtype, g.dtype))
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(a.value[index], (a,), vjp)


def take_rows(a, rows) -> Tensor:
    """Gather rows ``a[rows]`` of a 2-d tensor; repeated rows accumulate gradient."""
    a = _lift(a)
    rows = np.asarray(rows, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        out = np.zeros((shape[0], g.shape[1]), dtype=g.dtype)
        np.add.at(out, rows, g)
        return (out,)

    return _make(a.value[rows], (a,), vjp)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = tuple(_lift(p) for p in parts)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([p.value for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def unfold_blocks(canvas: np.ndarray, k: int, cell: int) -> np.ndarray:
    """Overlapping ``k*cell`` windows at stride ``cell`` from a padded canvas.

    ``canvas`` is (B, (gh+k-1)*cell, (gw+k-1)*cell, ...); the result is
    (B, gh, gw, k*cell, k*cell, ...). This is the adjoint of :func:`fold_blocks`.
    """
    b, hh, ww = canvas.shape[:3]
    rest = canvas.shape[3:]
    gh, gw = hh // cell - k + 1, ww // cell - k + 1
    out = np.empty((b, gh, gw, k * cell, k * cell) + rest, dtype=canvas.dtype)
    for i in range(k):
        for j in range(k):
            block = canvas[:, i * cell : i * cell + gh * cell, j * cell : j * cell + gw * cell]
            block = block.reshape((b, gh, cell, gw, cell) + rest)
            block = np.swapaxes(block, 2, 3)
            out[:, :, :, i * cell : (i + 1) * cell, j * cell : (j + 1) * cell] = block
    return out


def fold_blocks(windows: np.ndarray, k: int, cell: int) -> np.ndarray:
    """Sum overlapping windows (B, gh, gw, k*cell, k*cell, ...) onto a padded canvas."""
    b, gh, gw = windows.shape[:3]
    rest = windows.shape[5:]
    canvas = np.zeros((b, (gh + k - 1) * cell, (gw + k - 1) * cell) + rest, dtype=windows.dtype)
    for i in range(k):
        for j in range(k):
            block = windows[:, :, :, i * cell : (i + 1) * cell, j * cell : (j + 1) * cell]
            block = np.swapaxes(block, 2, 3).reshape((b, gh * cell, gw * cell) + rest)
            canvas[:, i * cell : i * cell + gh * cell, j * cell : j * cell + gw * cell] += block
    return canvas


def fold(windows, k: int, cell: int) -> Tensor:
    windows = _lift(windows)
    return _make(
        fold_blocks(windows.value, k, cell),
        (windows,),
        lambda g: (unfold_blocks(g, k, cell),),
    )


def composite(pres, a, rgb, k: int, cell: int, margin: int, eps: float = 1e-6) -> tuple[Tensor, Tensor]:
    """Blend per-cell RGBA windows into a mixing map and a foreground image.

    With ``m = pres * a`` per window pixel, ``alpha = 1 - prod(1 - m)`` and
    ``fg = sum(m * rgb) / (sum(m) + eps)`` over all windows covering a pixel.
    ``pres`` is (B, gh, gw), ``a`` is (B, gh, gw, P, P) and ``rgb`` is
    (B, gh, gw, P, P, 3) with ``P = k * cell``; outputs are cropped by
    ``margin`` on every side. Equivalent to the op-by-op chain, fused for speed.
    """
    pres, a, rgb = _lift(pres), _lift(a), _lift(rgb)
    pv, av, cv = pres.value, a.value, rgb.value
    b, gh, gw = pv.shape
    h, w = gh * cell, gw * cell
    m = pv[..., None, None] * av
    inner = np.maximum(1.0 - m, eps)
    keep = np.exp(fold_blocks(np.log(inner), k, cell))
    paint = fold_blocks(m[..., None] * cv, k, cell)
    cover = fold_blocks(m, k, cell) + eps
    crop = (slice(None), slice(margin, margin + h), slice(margin, margin + w))
    fg_full = paint / cover[..., None]
    alpha = 1.0 - keep[crop]
    fg = fg_full[crop]
    need = (_needed(pres), _needed(a), _needed(rgb))

    def to_parents(dm, drgb):
        return (
            (dm * av).sum(axis=(3, 4)) if need[0] else None,
            dm * pv[..., None, None] if need[1] else None,
            drgb,
        )

    def alpha_vjp(g):
        dkeep = np.zeros_like(keep)
        dkeep[crop] = -g * keep[crop]
        dm = unfold_blocks(dkeep, k, cell) * np.where(1.0 - m > eps, -1.0 / inner, 0.0)
        return to_parents(dm, None)

    def fg_vjp(g):
        gfull = np.zeros_like(fg_full)
        gfull[crop] = g
        dpaint = gfull / cover[..., None]
        dcover = -(gfull * fg_full).sum(axis=-1) / cover
        dpw = unfold_blocks(dpaint, k, cell)
        dm = (dpw * cv).sum(axis=-1) + unfold_blocks(dcover, k, cell)
        return to_parents(dm, dpw * m[..., None] if need[2] else None)

    return _make(alpha, (pres, a, rgb), alpha_vjp), _make(fg, (pres, a, rgb), fg_vjp)


def gradient_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    arrays: Iterable[np.ndarray],
    step: float = 1e-5,
    probes: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between taped and central-difference gradients.

    ``f`` maps watched tensors to a scalar tensor. With ``probes`` set, only
    that many randomly chosen coordinates per array are compared.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        ts = [tape.watch(a) for a in arrays]
        loss = f(ts)
    grads = tape.gradients(loss, ts)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for a, g in zip(arrays, grads):
        flat = a.reshape(-1)
        idx = np.arange(flat.size)
        if probes is not None and probes < flat.size:
            idx = rng.choice(flat.size, probes, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + step
            up = float(f([Tensor(x) for x in arrays]).value)
            flat[i] = old - step
            down = float(f([Tensor(x) for x in arrays]).value)
            flat[i] = old
            fd = (up - down) / (2 * step)
            an = g.reshape(-1)[i]
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            worst = max(worst, err)
    return worst
