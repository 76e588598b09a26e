"""Small tape-based reverse-mode autodiff over float64 numpy arrays.

Only what the camera heads, the disk blur, the SSIM loss and the splatting
rasterizer need. Ops record themselves on a module-level tape while any
input requires grad; :func:`backward` replays the tape in reverse and then
clears it.
"""

from __future__ import annotations

import contextlib
from functools import lru_cache
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense float64 array with a same-shape gradient slot."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=DTYPE)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __truediv__ = lambda self, other: div(self, other)  # noqa: E731
    __rtruediv__ = lambda self, other: div(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: mul(self, -1.0)  # noqa: E731

    def __getitem__(self, index) -> Tensor:
        return getitem(self, index)

    def sum(self, axis=None) -> Tensor:
        return tsum(self, axis)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of executed ops, replayed backwards by :meth:`backward`."""

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn, str]] = []

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: BackwardFn, op: str) -> None:
        self.records.append((out, inputs, fn, op))

    def backward(self, output: Tensor) -> None:
        if output.values.size != 1:
            raise ShapeError(f"backward: output must be a scalar, got shape {output.shape}")
        pending: dict[int, np.ndarray] = {id(output): np.ones_like(output.values)}
        if output.is_leaf:
            if output.requires_grad:
                output.grad += 1.0
            self.clear()
            return
        for out, inputs, fn, _ in reversed(self.records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad += gi
                elif id(inp) in pending:
                    pending[id(inp)] = pending[id(inp)] + gi
                else:
                    pending[id(inp)] = gi
        self.clear()


_TAPE = Tape()
_GRAD_ENABLED = True


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into every requires-grad leaf, then clear the tape."""
    _TAPE.backward(output)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op: str, values: np.ndarray, inputs: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    """Wrap a forward result and record ``fn`` when any input needs a gradient.

    ``fn`` maps the output gradient to one gradient (or None) per input.
    Used by the fused rasterizer ops as well as the primitives below.
    """
    out = Tensor.__new__(Tensor)
    out.values = np.asarray(values, dtype=DTYPE)
    out.grad = np.zeros_like(out.values)
    out.name = None
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    out.is_leaf = not needs
    if needs:
        _TAPE.record(out, tuple(inputs), fn, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return make_op("add", a.values + b.values, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return make_op("sub", a.values - b.values, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.values, b.values
    return make_op("mul", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    av, bv = a.values, b.values
    out = av / bv

    def fn(g):
        return _unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)

    return make_op("div", out, (a, b), fn)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    return make_op("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


# -- reductions and reshaping -----------------------------------------------

def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op("sum", x.values.sum(axis=axis), (x,), fn)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.values.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / float(n))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return make_op("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def fn(g):
        full = np.zeros_like(x.values)
        np.add.at(full, index, g)
        return (full,)

    return make_op("getitem", x.values[index], (x,), fn)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return make_op("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


# -- elementwise unary --------------------------------------------------------

def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.values)
    return make_op("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    return make_op("log", np.log(xv), (x,), lambda g: (g / xv,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.values)
    return make_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    return make_op("softplus", np.logaddexp(0.0, xv), (x,), lambda g: (g * _sigmoid(xv),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0
    return make_op("relu", np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def clamp(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = as_tensor(x)
    out = np.clip(x.values, lo, hi)
    inside = out == x.values
    return make_op("clamp", out, (x,), lambda g: (g * inside,))


def sin(x) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    return make_op("sin", np.sin(xv), (x,), lambda g: (g * np.cos(xv),))


def cos(x) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    return make_op("cos", np.cos(xv), (x,), lambda g: (-g * np.sin(xv),))


def tabs(x) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    return make_op("abs", np.abs(xv), (x,), lambda g: (g * np.sign(xv),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split form avoids overflow in exp for large |v|
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


# -- image filters ------------------------------------------------------------

@lru_cache(maxsize=64)
def disk_offsets(radius_px: float) -> tuple[tuple[int, int], ...]:
    """Integer (dy, dx) offsets whose pixel centers lie within ``radius_px``."""
    r = int(np.floor(radius_px))
    out = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy * dy + dx * dx <= radius_px * radius_px:
                out.append((dy, dx))
    return tuple(out)


def _shift_accumulate(src: np.ndarray, offsets, sign: int) -> np.ndarray:
    """out[y, x] = sum over offsets of src[y + sign*dy, x + sign*dx], zero outside."""
    h, w = src.shape[:2]
    out = np.zeros_like(src)
    for dy, dx in offsets:
        dy, dx = sign * dy, sign * dx
        if abs(dy) >= h or abs(dx) >= w:
            continue  # shifted entirely out of the image
        ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
        xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
        out[yd, xd] += src[ys, xs]
    return out


@lru_cache(maxsize=64)
def _disk_counts(h: int, w: int, radius_px: float) -> np.ndarray:
    return _shift_accumulate(np.ones((h, w)), disk_offsets(radius_px), 1)


def disk_mean(values: np.ndarray, radius_px: float) -> np.ndarray:
    """Forward half of :func:`disk_conv2d` on a raw H x W (x C) array."""
    if not np.isfinite(radius_px) or radius_px < 0:
        raise ValueError(f"disk_conv2d: radius must be finite and >= 0, got {radius_px}")
    if radius_px < 1.0:
        return np.array(values, dtype=DTYPE, copy=True)
    h, w = values.shape[:2]
    counts = _disk_counts(h, w, float(radius_px))
    if values.ndim == 3:
        counts = counts[..., None]
    return _shift_accumulate(values, disk_offsets(float(radius_px)), 1) / counts


def disk_conv2d(x, radius_px: float) -> Tensor:
    """Uniform disk average with a clipped, renormalized kernel at borders.

    A pixel contributes when its center is within ``radius_px`` of the target
    pixel center. Constant images are exact fixed points.
    """
    x = as_tensor(x)
    if x.ndim not in (2, 3):
        raise ShapeError(f"disk_conv2d: expected H x W or H x W x C, got {x.shape}")
    out = disk_mean(x.values, radius_px)
    if radius_px < 1.0:
        return make_op("disk_conv2d", out, (x,), lambda g: (g,))
    h, w = x.shape[:2]
    counts = _disk_counts(h, w, float(radius_px))
    if x.ndim == 3:
        counts = counts[..., None]
    offsets = disk_offsets(float(radius_px))
    return make_op("disk_conv2d", out, (x,),
                   lambda g: (_shift_accumulate(g / counts, offsets, -1),))


def filter_valid(x, kernel: np.ndarray) -> Tensor:
    """Separable 'valid' correlation of an H x W x C tensor with a 1-D kernel on both axes."""
    x = as_tensor(x)
    k = np.asarray(kernel, dtype=DTYPE)
    n = k.size
    if x.shape[0] < n or x.shape[1] < n:
        raise ShapeError(f"filter_valid: image {x.shape} smaller than window {n}")
    from numpy.lib.stride_tricks import sliding_window_view

    def corr(v: np.ndarray) -> np.ndarray:
        v = sliding_window_view(v, n, axis=0) @ k
        return sliding_window_view(v, n, axis=1) @ k

    def fn(g):
        # adjoint of valid correlation is full convolution
        gp = np.pad(g, [(n - 1, n - 1), (n - 1, n - 1)] + [(0, 0)] * (g.ndim - 2))
        kr = k[::-1]
        v = sliding_window_view(gp, n, axis=0) @ kr
        return (sliding_window_view(v, n, axis=1) @ kr,)

    return make_op("filter_valid", corr(x.values), (x,), fn)


# -- checking -----------------------------------------------------------------

def numeric_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``param.values``."""
    out = np.zeros_like(param.values)
    flat = param.values.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(fn().values)
            flat[i] = old - h
            fm = float(fn().values)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
    return out


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest normwise relative error between reverse-mode and central-difference gradients.

    Per parameter: max|analytic - numeric| / max(max|analytic|, max|numeric|).
    """
    for p in params:
        p.zero_grad()
    _TAPE.clear()
    backward(fn())
    worst = 0.0
    for p in params:
        num = numeric_grad(fn, p, h)
        scale = max(np.abs(p.grad).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-12)
        worst = max(worst, float(np.abs(p.grad - num).max(initial=0.0) / scale))
    return worst
