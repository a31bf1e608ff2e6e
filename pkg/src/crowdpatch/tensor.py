"""Small reverse-mode autodiff engine over numpy float64 arrays.

Every differentiable value is a :class:`Var` owned by a :class:`Tape`. Plain
numpy arrays (and Python scalars) mixed into an expression are treated as
constants, so model parameters can be frozen simply by passing arrays
instead of variables.

    tape = Tape()
    x = tape.variable(np.ones((1, 3, 3)))
    y = (x * x).sum() * 0.5
    grads = backward(tape, y)
    grads[x]  # == x.value
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

ArrayLike = Union["Var", np.ndarray, float, int]


@dataclass
class Node:
    """One recorded primitive: which op, which input nodes, and its VJP."""

    id: int
    op: str
    inputs: tuple[int, ...]
    vjp: Optional[Callable[[np.ndarray], tuple[np.ndarray, ...]]]
    shape: tuple[int, ...] = ()


@dataclass
class Tape:
    """Append-only record of operations. Single writer; do not share across threads."""

    nodes: list[Node] = field(default_factory=list)

    def variable(self, value) -> "Var":
        """Register a leaf."""
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError("leaf values must be finite")
        node = Node(len(self.nodes), "leaf", (), None, value.shape)
        self.nodes.append(node)
        return Var(self, node.id, value)

    def record(self, op: str, inputs: Sequence["Var"], value: np.ndarray, vjp) -> "Var":
        for v in inputs:
            if v.tape is not self:
                raise ValueError("cannot mix variables from different tapes")
        node = Node(len(self.nodes), op, tuple(v.id for v in inputs), vjp)
        self.nodes.append(node)
        return Var(self, node.id, value)


class Gradients(dict):
    """Mapping node id -> gradient array; also indexable by the Var itself."""

    def __getitem__(self, key):
        if isinstance(key, Var):
            key = key.id
        return super().__getitem__(key)

    def get(self, key, default=None):
        if isinstance(key, Var):
            key = key.id
        return super().get(key, default)


def backward(tape: Tape, output: "Var") -> Gradients:
    """Gradient of the scalar ``output`` w.r.t. every leaf on ``tape``.

    Leaves the output does not depend on get a zero gradient.
    """
    if output.tape is not tape:
        raise ValueError("output does not belong to this tape")
    if output.value.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.value.shape}")
    adj: dict[int, np.ndarray] = {output.id: np.ones_like(output.value)}
    for node in reversed(tape.nodes[: output.id + 1]):
        if node.vjp is None or node.id not in adj:
            continue
        g = adj.pop(node.id)
        for nid, gi in zip(node.inputs, node.vjp(g)):
            adj[nid] = adj[nid] + gi if nid in adj else gi
    grads = Gradients()
    for node in tape.nodes:
        if node.op == "leaf":
            grads[node.id] = adj[node.id] if node.id in adj else np.zeros(node.shape)
    return grads


class Var:
    """A tape-tracked float64 array. Immutable after construction."""

    __array_ufunc__ = None

    def __init__(self, tape: Tape, nid: int, value: np.ndarray):
        self.tape = tape
        self.id = nid
        value = np.asarray(value, dtype=np.float64)
        if value.base is None or value.flags.owndata:
            value.flags.writeable = False
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Var) else -np.asarray(other, float))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, float))

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return vsum(self, axis)

    def mean(self, axis=None):
        n = self.value.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return vsum(self, axis) * (1.0 / n)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _vars(*xs):
    return [x for x in xs if isinstance(x, Var)]


def _tape_of(*xs) -> Optional[Tape]:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


# ---------------------------------------------------------------- elementwise

def add(a: ArrayLike, b: ArrayLike):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    ins = _vars(a, b)
    a_is_var, b_is_var = isinstance(a, Var), isinstance(b, Var)

    def vjp(g):
        res = []
        if a_is_var:
            res.append(_unbroadcast(g, av.shape))
        if b_is_var:
            res.append(_unbroadcast(g, bv.shape))
        return res

    return tape.record("add", ins, out, vjp)


def mul(a: ArrayLike, b: ArrayLike):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    a_is_var, b_is_var = isinstance(a, Var), isinstance(b, Var)

    def vjp(g):
        res = []
        if a_is_var:
            res.append(_unbroadcast(g * bv, av.shape))
        if b_is_var:
            res.append(_unbroadcast(g * av, bv.shape))
        return res

    return tape.record("mul", _vars(a, b), out, vjp)


def neg(a: "Var"):
    return a.tape.record("neg", [a], -a.value, lambda g: (-g,))


def reciprocal(a: "Var"):
    out = 1.0 / a.value
    return a.tape.record("reciprocal", [a], out, lambda g: (-g * out * out,))


def power(a: "Var", p: float):
    av = a.value
    return a.tape.record("pow", [a], av**p, lambda g: (g * p * av ** (p - 1),))


def square(a: ArrayLike):
    if not isinstance(a, Var):
        return value_of(a) ** 2
    av = a.value
    return a.tape.record("square", [a], av * av, lambda g: (2.0 * g * av,))


def relu(a: ArrayLike):
    if not isinstance(a, Var):
        return np.maximum(value_of(a), 0.0)
    mask = a.value > 0
    return a.tape.record("relu", [a], np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def sigmoid(a: ArrayLike):
    av = value_of(a)
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ez = np.exp(av[~pos])
    out[~pos] = ez / (1.0 + ez)
    if not isinstance(a, Var):
        return out
    return a.tape.record("sigmoid", [a], out, lambda g: (g * out * (1.0 - out),))


def clip(a: ArrayLike, lo: float, hi: float):
    """Clamp with a pass-through gradient inside [lo, hi] and zero outside."""
    av = value_of(a)
    out = np.clip(av, lo, hi)
    if not isinstance(a, Var):
        return out
    inside = (av >= lo) & (av <= hi)
    return a.tape.record("clip", [a], out, lambda g: (g * inside,))


# ---------------------------------------------------------------- structural

def vsum(a: ArrayLike, axis=None):
    if not isinstance(a, Var):
        return np.asarray(value_of(a).sum(axis=axis))
    av = a.value
    out = np.asarray(av.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy(),)

    return a.tape.record("sum", [a], out, vjp)


def reshape(a: ArrayLike, shape):
    if not isinstance(a, Var):
        return value_of(a).reshape(shape)
    src = a.value.shape
    return a.tape.record("reshape", [a], a.value.reshape(shape), lambda g: (g.reshape(src),))


def getitem(a: ArrayLike, idx):
    if not isinstance(a, Var):
        return value_of(a)[idx]
    av = a.value

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g) if _needs_add_at(idx) else full.__setitem__(idx, g)
        return (full,)

    return a.tape.record("getitem", [a], av[idx].copy(), vjp)


def _needs_add_at(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(xs: Sequence[ArrayLike], axis: int = 0):
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    is_var = [isinstance(x, Var) for x in xs]
    ins = _vars(*xs)

    def vjp(g):
        res = []
        for i, flag in enumerate(is_var):
            if flag:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(bounds[i], bounds[i + 1])
                res.append(g[tuple(sl)])
        return res

    return tape.record("concat", ins, out, vjp)


def stack(xs: Sequence[ArrayLike]):
    return concat([reshape(x, (1,) + x.shape) if isinstance(x, Var) else value_of(x)[None] for x in xs], axis=0)


def paste(canvas: ArrayLike, piece: ArrayLike, row: int, col: int):
    """Return ``canvas`` with its window at (row, col) replaced by ``piece``.

    Works on the two trailing axes. Pixels outside the window are copied
    verbatim, never recomputed.
    """
    cv, pv = value_of(canvas), value_of(piece)
    h, w = pv.shape[-2:]
    if row < 0 or col < 0 or row + h > cv.shape[-2] or col + w > cv.shape[-1]:
        raise ValueError(
            f"window {h}x{w} at ({row}, {col}) exits canvas {cv.shape[-2]}x{cv.shape[-1]}"
        )
    out = cv.copy()
    out[..., row : row + h, col : col + w] = pv
    tape = _tape_of(canvas, piece)
    if tape is None:
        return out
    canvas_is_var, piece_is_var = isinstance(canvas, Var), isinstance(piece, Var)
    ins = _vars(canvas, piece)

    def vjp(g):
        res = []
        if canvas_is_var:
            gc = g.copy()
            gc[..., row : row + h, col : col + w] = 0.0
            res.append(gc)
        if piece_is_var:
            res.append(g[..., row : row + h, col : col + w].copy())
        return res

    return tape.record("paste", ins, out, vjp)


# ---------------------------------------------------------------- convolution

def _as4d(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"conv input must be (C,H,W) or (N,C,H,W), got shape {x.shape}")


def conv2d(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None,
           stride: int = 1, dilation: int = 1, padding: int = 0):
    """Cross-correlation of ``x`` (C,H,W or N,C,H,W) with ``weight`` (O,C,KH,KW)."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    xv, squeeze = _as4d(value_of(x))
    wv = value_of(weight)
    if wv.ndim != 4:
        raise ValueError(f"kernel must be rank 4 (O,C,KH,KW), got rank {wv.ndim}")
    n, c, h, w = xv.shape
    o, kc, kh, kw = wv.shape
    if kc != c:
        raise ValueError(f"kernel input channels {kc} != input channels {c}")
    bv = None if bias is None else value_of(bias)
    if bv is not None and bv.shape != (o,):
        raise ValueError(f"bias must have shape ({o},), got {bv.shape}")
    p = padding
    xp = np.pad(xv, ((0, 0), (0, 0), (p, p), (p, p))) if p else xv
    hp, wp = h + 2 * p, w + 2 * p
    ho = (hp - dilation * (kh - 1) - 1) // stride + 1
    wo = (wp - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} (dilation {dilation}) larger than padded input {hp}x{wp}")

    # im2col: (N, ho*wo, C*KH*KW), reused by the weight gradient
    span_h, span_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    win = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride, ::dilation, ::dilation]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    wmat = wv.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).transpose(0, 2, 1).reshape(n, o, ho, wo)
    if bv is not None:
        out = out + bv[None, :, None, None]
    result = out[0] if squeeze else out
    tape = _tape_of(x, weight, bias)
    if tape is None:
        return result
    x_is_var, weight_is_var, bias_is_var = (isinstance(v, Var) for v in (x, weight, bias))
    ins = _vars(x, weight, bias)

    def vjp(g):
        g4 = g[None] if squeeze else g
        gmat = g4.reshape(n, o, ho * wo)
        res = []
        if x_is_var:
            gcols = (wmat.T @ gmat).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    r, s = i * dilation, j * dilation
                    gxp[:, :, r : r + stride * (ho - 1) + 1 : stride,
                        s : s + stride * (wo - 1) + 1 : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
            res.append(gx[0] if squeeze else gx)
        if weight_is_var:
            gw = np.zeros_like(wmat)
            for b in range(n):
                gw += gmat[b] @ cols[b]
            res.append(gw.reshape(wv.shape))
        if bias_is_var:
            res.append(g4.sum(axis=(0, 2, 3)))
        return res

    return tape.record("conv2d", ins, result, vjp)


def avg_pool2d(x: ArrayLike, size: int):
    """Non-overlapping mean pooling over the trailing two axes; dims must divide."""
    xv = value_of(x)
    h, w = xv.shape[-2:]
    if h % size or w % size:
        raise ValueError(f"spatial dims {h}x{w} not divisible by pool size {size}")
    lead = xv.shape[:-2]
    out = xv.reshape(lead + (h // size, size, w // size, size)).mean(axis=(-3, -1))
    if not isinstance(x, Var):
        return out

    def vjp(g):
        return (np.repeat(np.repeat(g, size, axis=-2), size, axis=-1) / (size * size),)

    return x.tape.record("avg_pool2d", [x], out, vjp)


def block_sum(x: np.ndarray, size: int) -> np.ndarray:
    """Mass-preserving downsample: sum of each non-overlapping size x size block."""
    h, w = x.shape[-2:]
    if h % size or w % size:
        raise ValueError(f"spatial dims {h}x{w} not divisible by block size {size}")
    return x.reshape(x.shape[:-2] + (h // size, size, w // size, size)).sum(axis=(-3, -1))


# ---------------------------------------------------------------- resampling

def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) corner-aligned linear interpolation weights."""
    if n_out < 1 or n_in < 1:
        raise ValueError("sizes must be >= 1")
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_resize(x: ArrayLike, out_h: int, out_w: int):
    """Corner-aligned bilinear resize of the two trailing axes."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    xv = value_of(x)
    h, w = xv.shape[-2:]
    ry, rx = interp_matrix(h, out_h), interp_matrix(w, out_w)
    out = np.einsum("yh,...hw,xw->...yx", ry, xv, rx, optimize=True)
    if not isinstance(x, Var):
        return out
    return x.tape.record(
        "bilinear_resize", [x], out,
        lambda g: (np.einsum("yh,...yx,xw->...hw", ry, g, rx, optimize=True),),
    )


def rotation_matrix(h: int, w: int, angle_deg: float) -> sparse.csr_matrix:
    """Sparse (h*w, h*w) operator rotating an image about its center.

    Positive angles turn the content clockwise as displayed (row 0 at top),
    i.e. counter-clockwise in y-up coordinates. Sampling is bilinear; source
    taps outside the image contribute 0.
    """
    if not -180.0 <= angle_deg <= 180.0:
        raise ValueError(f"angle must lie in [-180, 180], got {angle_deg}")
    t = math.radians(angle_deg)
    cos, sin = math.cos(t), math.sin(t)
    cos = 0.0 if abs(cos) < 1e-12 else cos
    sin = 0.0 if abs(sin) < 1e-12 else sin
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel -> source coordinate
    sy = cos * dy - sin * dx + cy
    sx = sin * dy + cos * dx + cx
    y0, x0 = np.floor(sy), np.floor(sx)
    fy, fx = sy - y0, sx - x0
    rows, cols, vals = [], [], []
    dst = np.arange(h * w).reshape(h, w)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        py, px = (y0 + oy).astype(int), (x0 + ox).astype(int)
        ok = (py >= 0) & (py < h) & (px >= 0) & (px < w) & (wgt != 0)
        rows.append(dst[ok])
        cols.append(py[ok] * w + px[ok])
        vals.append(wgt[ok])
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(h * w, h * w)
    )


def rotate(x: ArrayLike, angle_deg: float):
    """Rotate the trailing two axes about the tensor center, zero fill."""
    xv = value_of(x)
    h, w = xv.shape[-2:]
    m = rotation_matrix(h, w, angle_deg)
    lead = xv.shape[:-2]
    flat = xv.reshape(-1, h * w)
    out = np.asarray((m @ flat.T).T).reshape(lead + (h, w))
    if not isinstance(x, Var):
        return out
    mt = m.T.tocsr()

    def vjp(g):
        return (np.asarray((mt @ g.reshape(-1, h * w).T).T).reshape(xv.shape),)

    return x.tape.record("rotate", [x], out, vjp)
