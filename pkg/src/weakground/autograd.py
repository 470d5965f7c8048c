"""Minimal dense tensors with reverse-mode automatic differentiation.

Covers exactly the operation set the rest of the package needs: elementwise
arithmetic, matmul, conv2d (stride/dilation/zero padding), the usual
activations, axis reductions, broadcasting, concat, bilinear resize and
clamp. Gradients are checked against central finite differences via
`gradcheck`. 64-bit is the default dtype; training may opt into 32-bit.

Graph recording and backward are single-threaded. Tensors are immutable
after creation (nothing in this package writes to `.data` of a live node).
"""

from __future__ import annotations

import dataclasses
import json
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


class DomainError(ValueError):
    """Raised on log/division domain violations; inputs must be clamped first."""


_GRAD_ENABLED = True
_CHECK_FINITE = False


class no_grad:
    """Context manager that disables graph recording (for eval/probe passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def set_check_finite(enabled: bool) -> None:
    """Enable per-op finiteness assertions (used by the test suite)."""
    global _CHECK_FINITE
    _CHECK_FINITE = enabled


_KINK_GAPS: list | None = None


class monitor_kinks:
    """Records, for every relu/max/clamp evaluated inside the block, how far
    its inputs sit from the nearest non-differentiable point.

    Finite differences are only meaningful when no kink lies inside the
    probe window; gradient-check drivers use the recorded minimum gap to
    reject ill-conditioned random instances.
    """

    def __enter__(self):
        global _KINK_GAPS
        self._prev = _KINK_GAPS
        _KINK_GAPS = []
        return self

    def __exit__(self, *exc):
        global _KINK_GAPS
        self.gaps = _KINK_GAPS
        _KINK_GAPS = self._prev
        return False

    @property
    def min_gap(self) -> float:
        return min(self.gaps) if self.gaps else float("inf")


def _note_gap(value: float) -> None:
    if _KINK_GAPS is not None:
        _KINK_GAPS.append(float(value))


class Tensor:
    """A dense row-major array plus an optional backward closure.

    The graph is implicit: each non-leaf tensor keeps references to its
    parents and a function that routes the output gradient to them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        if dtype is not None:
            data = np.asarray(data, dtype=dtype)
        else:
            data = np.asarray(data)
            if data.dtype not in (np.float32, np.float64):
                data = data.astype(DEFAULT_DTYPE)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are promoted to constants of matching dtype
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over dimensions that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: zero denominator; clamp inputs first")

    def back(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _KINK_GAPS is not None and x.data.size:
        _note_gap(np.abs(x.data).min())

    def back(g):
        _accum(x, g * mask)

    return _node(np.where(mask, x.data, 0.0), (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def back(g):
        _accum(x, g * y * (1.0 - y))

    return _node(y, (x,), back)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def back(g):
        _accum(x, g * y)

    return _node(y, (x,), back)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError("log: non-positive input; clamp inputs first")

    def back(g):
        _accum(x, g / x.data)

    return _node(np.log(x.data), (x,), back)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    if _KINK_GAPS is not None and x.data.size:
        _note_gap(min(np.abs(x.data - lo).min(), np.abs(x.data - hi).min()))

    def back(g):
        _accum(x, g * mask)

    return _node(np.clip(x.data, lo, hi), (x,), back)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def back(g):
        _accum(x, g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), back)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {shape}")

    def back(g):
        _accum(x, _unbroadcast(g, x.shape))

    return _node(np.ascontiguousarray(data), (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


# ---------------------------------------------------------------------------
# reductions


def _axes_tuple(x: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(x.ndim))
    if isinstance(axes, int):
        return (axes,)
    return tuple(axes)


def tsum(x: Tensor, axes=None) -> Tensor:
    ax = _axes_tuple(x, axes)

    def back(g):
        gshape = list(x.shape)
        for a in ax:
            gshape[a] = 1
        _accum(x, np.broadcast_to(g.reshape(gshape), x.shape).copy())

    return _node(x.data.sum(axis=ax), (x,), back)


def tmean(x: Tensor, axes=None) -> Tensor:
    ax = _axes_tuple(x, axes)
    count = 1
    for a in ax:
        count *= x.shape[a]

    def back(g):
        gshape = list(x.shape)
        for a in ax:
            gshape[a] = 1
        _accum(x, np.broadcast_to(g.reshape(gshape), x.shape) / count)

    return _node(x.data.mean(axis=ax), (x,), back)


def tmax(x: Tensor, axis: int) -> Tensor:
    """Max over one axis. Backward routes the whole gradient to the first
    maximal index along the axis (deterministic tie rule)."""
    am = np.argmax(x.data, axis=axis)
    if _KINK_GAPS is not None and x.shape[axis] > 1:
        two = np.partition(x.data, -2, axis=axis)
        idx_top = [slice(None)] * x.ndim
        idx_top[axis] = slice(-1, None)
        idx_second = [slice(None)] * x.ndim
        idx_second[axis] = slice(-2, -1)
        _note_gap((two[tuple(idx_top)] - two[tuple(idx_second)]).min())

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(am, axis), np.expand_dims(g, axis), axis)
        _accum(x, gx)

    return _node(x.data.max(axis=axis), (x,), back)


def softmax(x: Tensor, axis: int) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - dot))

    return _node(y, (x,), back)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: only 1-D/2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} and {b.shape}")

    def back(g):
        if a.ndim == 2 and b.ndim == 2:
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)
        elif a.ndim == 1 and b.ndim == 2:
            _accum(a, b.data @ g)
            _accum(b, np.outer(a.data, g))
        elif a.ndim == 2 and b.ndim == 1:
            _accum(a, np.outer(g, b.data))
            _accum(b, a.data.T @ g)
        else:
            _accum(a, g * b.data)
            _accum(b, g * a.data)

    return _node(a.data @ b.data, (a, b), back)


# ---------------------------------------------------------------------------
# conv2d


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, dilation: int = 1) -> Tensor:
    """2-D convolution on (B, H, W, Cin) with kernel (kh, kw, Cin, Cout).

    Zero padding is sized so spatial extent is preserved at stride 1
    (odd kernels only); general output arithmetic applies for stride > 1.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need x (B,H,W,Cin) and w (kh,kw,Cin,Cout), "
                         f"got {x.shape} and {w.shape}")
    kh, kw, cin, cout = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {(kh, kw)}")
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape} vs kernel {w.shape}")
    bsz, h, wd = x.shape[0], x.shape[1], x.shape[2]
    ph, pw = dilation * (kh // 2), dilation * (kw // 2)
    eff_h, eff_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    ho = (h + 2 * ph - eff_h) // stride + 1
    wo = (wd + 2 * pw - eff_w) // stride + 1
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))

    out = np.zeros((bsz, ho, wo, cout), dtype=x.data.dtype)
    slices = []
    for ki in range(kh):
        for kj in range(kw):
            si = slice(ki * dilation, ki * dilation + stride * (ho - 1) + 1, stride)
            sj = slice(kj * dilation, kj * dilation + stride * (wo - 1) + 1, stride)
            slices.append((ki, kj, si, sj))
            out += xp[:, si, sj, :] @ w.data[ki, kj]
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} vs kernel {w.shape}")
        out = out + b.data

    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for ki, kj, si, sj in slices:
                dxp[:, si, sj, :] += g @ w.data[ki, kj].T
            _accum(x, dxp[:, ph:ph + h, pw:pw + wd, :])
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            for ki, kj, si, sj in slices:
                dw[ki, kj] = np.tensordot(xp[:, si, sj, :], g, axes=([0, 1, 2], [0, 1, 2]))
            _accum(w, dw)
        if b is not None:
            _accum(b, g.sum(axis=(0, 1, 2)))

    return _node(out, parents, back)


# ---------------------------------------------------------------------------
# bilinear resize


_INTERP_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) linear-interpolation matrix, half-pixel centers."""
    key = (n_in, n_out)
    cached = _INTERP_CACHE.get(key)
    if cached is None:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        t = src - i0
        cached = np.zeros((n_out, n_in))
        cached[np.arange(n_out), i0] += 1.0 - t
        cached[np.arange(n_out), i1] += t
        _INTERP_CACHE[key] = cached
    return cached


def _apply_rows(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Contract mat (o, h) against axis 1 of x (B, h, W, C) -> (B, o, W, C)."""
    bsz, h, w, c = x.shape
    out = mat @ x.transpose(1, 0, 2, 3).reshape(h, bsz * w * c)
    return out.reshape(mat.shape[0], bsz, w, c).transpose(1, 0, 2, 3)


def _apply_cols(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Contract mat (o, w) against axis 2 of x (B, H, w, C) -> (B, H, o, C)."""
    bsz, h, w, c = x.shape
    out = mat @ x.transpose(2, 0, 1, 3).reshape(w, bsz * h * c)
    return out.reshape(mat.shape[0], bsz, h, c).transpose(1, 2, 0, 3)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of (B, H, W, C) grids (half-pixel centers).

    Each axis is a fixed dense interpolation matrix, so both the forward
    pass and the backward scatter are single matrix products."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize: need (B,H,W,C), got {x.shape}")
    _, h, w, _ = x.shape
    mh = _interp_matrix(h, out_h).astype(x.dtype)
    mw = _interp_matrix(w, out_w).astype(x.dtype)
    out = _apply_cols(mw, _apply_rows(mh, x.data))

    def back(g):
        _accum(x, _apply_rows(mh.T, _apply_cols(mw.T, g)))

    return _node(np.ascontiguousarray(out), (x,), back)


# ---------------------------------------------------------------------------
# backward + gradcheck


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar root.

    Returns a map from requires-grad leaf tensors to their gradients; the
    same arrays are left on each tensor's `.grad` (accumulated if already
    present, so callers zero grads between steps).
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for t in reversed(topo):
        if t._backward_fn is not None:
            t._backward_fn(t.grad)
    return {t: t.grad for t in topo
            if t.requires_grad and not t._parents and t.grad is not None}


@dataclasses.dataclass
class GradcheckReport:
    op: str
    max_rel_err: float
    failing_coords: list[tuple[int, ...]]
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return not self.failing_coords and np.isfinite(self.max_rel_err)

    def to_json(self) -> str:
        return json.dumps({
            "op": self.op,
            "max_rel_err": self.max_rel_err,
            "failing_coords": [list(c) for c in self.failing_coords],
        })


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
              tol: float = 1e-4, op: str = "f", max_coords: int | None = None,
              rng: np.random.Generator | None = None) -> GradcheckReport:
    """Compare the backward gradient of scalar-valued `f` at `x` against
    central differences, coordinate by coordinate.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8). A
    non-finite probe value is reported as a failure at that coordinate.
    `max_coords` samples a random coordinate subset for large inputs.
    """
    base = np.array(x.data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    y = f(leaf)
    backward(y)
    if leaf.grad is None:
        raise ValueError(f"gradcheck({op}): no gradient reached the input")
    analytic = leaf.grad.reshape(-1)

    n = base.size
    coords = np.arange(n)
    if max_coords is not None and max_coords < n:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = rng.choice(n, size=max_coords, replace=False)
        coords.sort()

    flat = base.reshape(-1)
    max_rel = 0.0
    failing: list[tuple[int, ...]] = []
    with no_grad():
        for c in coords:
            coord = tuple(int(v) for v in np.unravel_index(c, base.shape))
            try:
                probe = flat.copy()
                probe[c] += h
                fp = f(Tensor(probe.reshape(base.shape))).item()
                probe[c] -= 2 * h
                fm = f(Tensor(probe.reshape(base.shape))).item()
            except (DomainError, FloatingPointError):
                fp = fm = float("nan")
            if not (np.isfinite(fp) and np.isfinite(fm)):
                failing.append(coord)
                max_rel = float("inf")
                continue
            num = (fp - fm) / (2.0 * h)
            ana = analytic[c]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            max_rel = max(max_rel, rel)
            if rel >= tol:
                failing.append(coord)
    return GradcheckReport(op=op, max_rel_err=float(max_rel),
                           failing_coords=failing, n_checked=len(coords), tol=tol)
