"""Dense float32 tensors with a define-by-run reverse-mode tape.

Ops record themselves on the active :class:`Tape` only when at least one
input requires a gradient, so inference without a tape allocates no
gradient buffers at all.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "TapeError",
    "backward",
    "finite_diff_check",
    "compute_dtype",
]


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


_state = threading.local()


def _dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def compute_dtype(dtype):
    """Temporarily switch the working precision (used by gradient checks)."""
    prev = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if not np.isfinite(arr).all():
        bad = int((~np.isfinite(arr)).sum())
        raise NumericError(f"{opname}: {bad} non-finite value(s) in output of shape {list(arr.shape)}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}{rg})"

    # operator sugar; shapes must match exactly
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "opname")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], backward_fn, opname: str):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.opname = opname


class Tape:
    """Records ops executed inside its ``with`` block.

    Nodes are appended in execution order, which is a topological order.
    A tape can be differentiated once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev

    def __len__(self) -> int:
        return len(self.nodes)


def _record(out: Tensor, parents: Sequence[Tensor], backward_fn, opname: str) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    node = _Node(out, parents, backward_fn, opname)
    out._node = node
    tape.nodes.append(node)
    return out


def _out(arr: np.ndarray, opname: str) -> Tensor:
    _check_finite(arr, opname)
    return Tensor(arr)


def backward(root: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every leaf that requires grad and feeds ``root``."""
    tape = tape if tape is not None else _active_tape()
    if tape is None:
        raise TapeError("backward() needs an active tape")
    if root.data.size != 1:
        raise TapeError(f"backward() root must be scalar, got dims {root.dims}")
    if tape.consumed:
        raise TapeError("tape already differentiated; re-run the forward pass to record again")
    if root._node is None or not any(n is root._node for n in reversed(tape.nodes)):
        raise TapeError("root was not produced under this tape")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        pgrads = node.backward_fn(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p._node is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        node.backward_fn = None


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=_dtype())


def _same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: dims {a.dims} vs {b.dims}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = _out(a.data + b.data, "add")
    return _record(out, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = _out(a.data - b.data, "sub")
    return _record(out, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = _out(a.data * b.data, "mul")
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    out = _out(a.data * _dtype()(s), "scale")
    return _record(out, (a,), lambda g: (g * _dtype()(s),), "scale")


def mul_const(a: Tensor, c) -> Tensor:
    """Elementwise product with a constant array (no gradient to ``c``)."""
    c = _const(c)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const: dims {a.dims} vs {list(c.shape)}")
    out = _out(a.data * c, "mul_const")
    return _record(out, (a,), lambda g: (g * c,), "mul_const")


def silu(x: Tensor) -> Tensor:
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = _out(x.data * sig, "silu")

    def bw(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _record(out, (x,), bw, "silu")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001
    out = _out(np.asarray(x.data.sum(dtype=np.float64), dtype=_dtype()), "sum")
    return _record(out, (x,), lambda g: (np.full_like(x.data, g),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = _out(np.asarray(x.data.mean(dtype=np.float64), dtype=_dtype()), "mean")
    return _record(out, (x,), lambda g: (np.full_like(x.data, g / n),), "mean")


def mse(a: Tensor, b: Tensor, weight=None) -> Tensor:
    """Mean of squared differences, optionally weighted per leading index."""
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size
    w = 1.0
    if weight is not None:
        w = np.asarray(weight, dtype=np.float64).reshape((-1,) + (1,) * (diff.ndim - 1))
        if w.shape[0] != diff.shape[0]:
            raise ShapeError(f"mse: {w.shape[0]} weights for leading dim {diff.shape[0]}")
    out = _out(np.asarray(np.mean(w * np.square(diff, dtype=np.float64)), dtype=_dtype()), "mse")

    def bw(g):
        ga = (diff * (2.0 * g / n) * w).astype(diff.dtype)
        return ga, -ga

    return _record(out, (a, b), bw, "mse")


def sq_norm(x: Tensor) -> Tensor:
    """Squared L2 norm over all entries."""
    out = _out(np.asarray(np.sum(np.square(x.data, dtype=np.float64)), dtype=_dtype()), "sq_norm")
    return _record(out, (x,), lambda g: (x.data * (2.0 * g),), "sq_norm")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        arr = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {list(src)} as {list(shape)}") from e
    out = Tensor(arr)
    return _record(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    return _record(out, (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    arrs = [x.data for x in xs]
    try:
        out = Tensor(np.concatenate(arrs, axis=axis))
    except ValueError as e:
        raise ShapeError(f"concat: incompatible dims {[x.dims for x in xs]}") from e
    bounds = np.cumsum([a.shape[axis] for a in arrs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(xs), bw, "concat")


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """(B, ...) -> (B*n, ...) with each row repeated ``n`` times consecutively."""
    out = Tensor(np.repeat(x.data, n, axis=0))
    shp = x.shape

    def bw(g):
        return (g.reshape((shp[0], n) + shp[1:]).sum(axis=1),)

    return _record(out, (x,), bw, "repeat_rows")


def embed(table: Tensor, ids: Sequence[int]) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embed: ids outside vocabulary of size {table.shape[0]}")
    out = Tensor(table.data[ids])

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), bw, "embed")


# ---------------------------------------------------------------- linear algebra


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; only the leading batch dims may broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: dims {a.dims} x {b.dims}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul: batch dims {a.dims} x {b.dims} do not broadcast") from e
    out = _out(np.matmul(a.data, b.data), "matmul")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[..., i] @ w[i, o] + b[o]``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: dims {x.dims} x {w.dims}")
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ w.data
    if b is not None:
        y = y + b.data
    out = _out(y.reshape(x.shape[:-1] + (w.shape[1],)), "linear")

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _record(out, parents, bw, "linear")


def softmax_last(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_last: need last dim >= 1, got {x.dims}")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_last: non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _out(y, "softmax_last")

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), bw, "softmax_last")


# ---------------------------------------------------------------- conv / norm


def _cols_nhwc(x: np.ndarray, kh: int, kw: int, pad: int) -> tuple[np.ndarray, int, int]:
    # x: (N, C, H, W) -> rows (N*ho*wo, kh*kw*C), channel-last so each copy is contiguous
    n, c, h, w = x.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + ho, j:j + wo, :]
    return cols.reshape(n * ho * wo, kh * kw * c), ho, wo


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, pad: int = 1) -> Tensor:
    """Stride-1 cross-correlation of ``x`` (N, C, H, W) with ``w`` (O, C, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: dims {x.dims} with kernel {w.dims}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    cols, ho, wo = _cols_nhwc(x.data, kh, kw, pad)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    y = cols @ wmat
    if b is not None:
        y += b.data
    out = _out(y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), "conv2d")

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (cols.T @ gm).reshape(kh, kw, c, o).transpose(3, 2, 0, 1) if w.requires_grad else None
        gb = gm.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat.T).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=gm.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + ho, j:j + wo, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2)
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _record(out, parents, bw, "conv2d")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization of (N, C, H, W) with per-channel affine."""
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    ga = gamma.data.reshape(1, c, 1, 1)
    out = _out(xhat * ga + beta.data.reshape(1, c, 1, 1), "group_norm")
    m = xg.shape[2]

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = (g * ga).reshape(n, groups, m)
        xh = xhat.reshape(n, groups, m)
        gx = inv * (gxhat - gxhat.mean(axis=2, keepdims=True) - xh * (gxhat * xh).mean(axis=2, keepdims=True))
        return gx.reshape(x.shape), ggamma, gbeta

    return _record(out, (x, gamma, beta), bw, "group_norm")


def layer_norm_last(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _out(xhat * gamma.data + beta.data, "layer_norm")

    def bw(g):
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gxh = g * gamma.data
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), bw, "layer_norm")


def add_channel(x: Tensor, e: Tensor) -> Tensor:
    """Add a per-(sample, channel) vector ``e`` (N, C) to ``x`` (N, C, H, W)."""
    if x.ndim != 4 or e.shape != x.shape[:2]:
        raise ShapeError(f"add_channel: dims {x.dims} and {e.dims}")
    out = _out(x.data + e.data[:, :, None, None], "add_channel")
    return _record(out, (x, e), lambda g: (g, g.sum(axis=(2, 3))), "add_channel")


def add_const(x: Tensor, c) -> Tensor:
    c = _const(c)
    out = _out(x.data + c, "add_const")
    return _record(out, (x,), lambda g: (g,), "add_const")


def upsample2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3))

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), bw, "upsample2x")


def avgpool2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x: odd spatial dims {x.dims}")
    out = Tensor(x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _record(out, (x,), bw, "avgpool2x")


def space_to_depth(x: Tensor, r: int = 2) -> Tensor:
    n, c, h, w = x.shape
    y = reshape(x, (n, c, h // r, r, w // r, r))
    y = transpose(y, (0, 1, 3, 5, 2, 4))
    return reshape(y, (n, c * r * r, h // r, w // r))


def depth_to_space(x: Tensor, r: int = 2) -> Tensor:
    n, c, h, w = x.shape
    co = c // (r * r)
    y = reshape(x, (n, co, r, r, h, w))
    y = transpose(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (n, co, h * r, w * r))


# ---------------------------------------------------------------- checking


def finite_diff_check(
    fn: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-3,
    coords: Iterable[int] | None = None,
    dtype=np.float64,
) -> float:
    """Max relative error between tape gradients and central differences.

    Runs ``fn`` in ``dtype`` (float64 by default) so the numeric side is not
    dominated by float32 rounding.  ``coords`` restricts the comparison to a
    subset of flat indices.
    """
    with compute_dtype(dtype):
        x0 = np.array(_const(x), dtype=dtype)
        xt = Tensor(x0.copy(), requires_grad=True)
        with Tape() as tape:
            y = fn(xt)
            backward(y, tape)
        analytic = np.zeros_like(x0) if xt.grad is None else xt.grad
        idx = range(x0.size) if coords is None else coords
        worst = 0.0
        flat = x0.reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = float(fn(Tensor(x0.copy())).data)
            flat[i] = old - eps
            fm = float(fn(Tensor(x0.copy())).data)
            flat[i] = old
            num = (fp - fm) / (2.0 * eps)
            err = abs(float(analytic.reshape(-1)[i]) - num) / (abs(num) + 1e-8)
            worst = max(worst, err)
    return worst
