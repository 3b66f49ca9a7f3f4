"""Small deterministic tensor engine with reverse-mode gradients.

Design constraints, in order of priority:

* Determinism. Repeated forward passes over identical inputs are
  bit-identical: every op reduces with a fixed summation order and no
  value-dependent branching, so an encoder and decoder evaluating the
  same network on the same machine agree exactly.
* Correctness. Every differentiable op carries an analytic gradient
  that is validated against central finite differences (grad_check).
* Just enough surface. Only the operations the codec networks need
  exist: elementwise arithmetic, leaky ReLU, sigmoid, the standard
  normal CDF, clamp, 2-D convolution, bilinear resize, bilinear warp,
  channel concat, and full reductions.

Everything is float64, channels-first (C, H, W), row-major. Values are
immutable after creation except gradient slots during backward. Graphs
must not be shared across concurrent executions; independent graphs may
run in parallel.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special as _special

from .errors import ShapeError, UsageError

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "zero_grads",
    "conv2d",
    "bilinear_resize",
    "warp_bilinear",
    "leaky_relu",
    "sigmoid",
    "std_normal_cdf",
    "exp",
    "log",
    "clamp",
    "concat_channels",
    "sum_all",
    "mean_all",
    "GradCheckReport",
    "grad_check",
]

_GRAD_ENABLED = True

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextmanager
def no_grad():
    """Disable graph recording inside the context (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    A tensor produced by an op remembers its parents and a backward
    rule; calling backward() on a scalar result accumulates gradients
    into every reachable tensor with requires_grad set, summing over
    fan-out in a fixed reverse-topological order.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Optional[Callable[[np.ndarray], tuple]] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return _add(self, _as_tensor(other))

    def __radd__(self, other):
        return _add(_as_tensor(other), self)

    def __sub__(self, other):
        return _add(self, _neg(_as_tensor(other)))

    def __rsub__(self, other):
        return _add(_as_tensor(other), _neg(self))

    def __mul__(self, other):
        return _mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return _mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return _div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return _div(_as_tensor(other), self)

    def __neg__(self):
        return _neg(self)

    def backward(self, seed=None) -> None:
        backward(self, seed)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def backward(output: Tensor, seed=None) -> None:
    """Reverse-mode accumulation from `output` into every reachable input.

    Gradients sum over fan-out; traversal order is a deterministic
    post-order over the recorded parents, so accumulation order never
    varies between runs.
    """
    if not output.requires_grad or (output._backward_fn is None and not output._parents):
        if not output.requires_grad:
            raise UsageError("backward() on a tensor with no recorded computation")
    if seed is None:
        seed = np.ones_like(output.data)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.data.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {output.data.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    output.grad = seed if output.grad is None else output.grad + seed
    for node in reversed(topo):
        if node._backward_fn is None or node.grad is None:
            continue
        grads = node._backward_fn(node.grad)
        for parent, grad in zip(node._parents, grads):
            if grad is None or not parent.requires_grad:
                continue
            parent.grad = grad if parent.grad is None else parent.grad + grad


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------

def _add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(data, (a, b), back)


def _neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _node(data, (a, b), back)


def _div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _node(data, (a, b), back)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    mask = x.data >= 0.0
    data = np.where(mask, x.data, slope * x.data)

    def back(g):
        return (np.where(mask, g, slope * g),)

    return _node(data, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    s = _special.expit(x.data)

    def back(g):
        return (g * s * (1.0 - s),)

    return _node(s, (x,), back)


def std_normal_cdf(x: Tensor) -> Tensor:
    """Phi(x), the standard normal CDF; gradient is the normal PDF."""
    data = _special.ndtr(x.data)

    def back(g):
        return (g * _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data),)

    return _node(data, (x,), back)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def back(g):
        return (g * data,)

    return _node(data, (x,), back)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def back(g):
        return (g / x.data,)

    return _node(data, (x,), back)


def clamp(x: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes through the closed interval."""
    data = np.clip(x.data, lo, hi)
    mask = np.ones_like(x.data, dtype=bool)
    if lo is not None:
        mask &= x.data >= lo
    if hi is not None:
        mask &= x.data <= hi

    def back(g):
        return (np.where(mask, g, 0.0),)

    return _node(data, (x,), back)


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())

    def back(g):
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _node(data, (x,), back)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.sum() / n)

    def back(g):
        return (np.broadcast_to(g / n, x.data.shape).copy(),)

    return _node(data, (x,), back)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate (C, H, W) tensors along the channel axis."""
    if not tensors:
        raise UsageError("concat_channels needs at least one tensor")
    base = tensors[0].data.shape
    for t in tensors:
        if t.data.ndim != len(base) or t.data.shape[1:] != base[1:]:
            raise ShapeError(f"concat_channels spatial mismatch: {t.data.shape} vs {base}")
    data = np.concatenate([t.data for t in tensors], axis=0)
    sizes = [t.data.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(sizes)))

    return _node(data, tuple(tensors), back)


# -- convolution ----------------------------------------------------------

def _conv_out_extent(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def _zero_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    c, h, w = x.shape
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, pad : pad + h, pad : pad + w] = x
    return xp


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    return win.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * k * k, out_h * out_w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) with zero padding.

    x: (C, H, W); weight: (C_out, C, k, k) with odd k; bias: (C_out,).
    Output spatial extent is floor((H + 2*pad - k) / stride) + 1.
    """
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim != 3:
        raise ShapeError(f"conv2d input must be (C, H, W), got {xd.shape}")
    if wd.ndim != 4:
        raise ShapeError(f"conv2d weight must be (C_out, C_in, k, k), got {wd.shape}")
    c_out, c_in, k, k2 = wd.shape
    if k != k2 or k % 2 != 1:
        raise ShapeError(f"conv2d kernel must be square with odd extent, got {k}x{k2}")
    if c_in != xd.shape[0]:
        raise ShapeError(f"conv2d weight expects {c_in} input channels, input has {xd.shape[0]}")
    if bd.shape != (c_out,):
        raise ShapeError(f"conv2d bias must be ({c_out},), got {bd.shape}")
    if stride < 1 or pad < 0:
        raise UsageError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    _, h, w = xd.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"conv2d input {h}x{w} with pad {pad} is smaller than kernel {k}")
    out_h = _conv_out_extent(h, k, stride, pad)
    out_w = _conv_out_extent(w, k, stride, pad)

    xp = _zero_pad(xd, pad)
    cols = _im2col(xp, k, stride, out_h, out_w)
    out = (wd.reshape(c_out, -1) @ cols + bd[:, None]).reshape(c_out, out_h, out_w)

    def back(g):
        # cols is recomputed here rather than captured so a deep graph
        # does not pin one im2col buffer per conv until backward runs
        cols_b = _im2col(_zero_pad(x.data, pad), k, stride, out_h, out_w)
        g2 = g.reshape(c_out, -1)
        g_w = (g2 @ cols_b.T).reshape(wd.shape)
        g_b = g2.sum(axis=1)
        g_x = _conv_input_grad(g, wd, stride, pad, h, w)
        return g_x, g_w, g_b

    return _node(out, (x, weight, bias), back)


def _conv_input_grad(g: np.ndarray, wd: np.ndarray, stride: int, pad: int, h: int, w: int) -> np.ndarray:
    """Input gradient of conv2d: correlate the (dilated, padded) output
    gradient with the flipped kernel, reusing the im2col matmul path."""
    c_out, c_in, k, _ = wd.shape
    out_h, out_w = g.shape[1], g.shape[2]
    if stride > 1:
        gd = np.zeros((c_out, (out_h - 1) * stride + 1, (out_w - 1) * stride + 1))
        gd[:, ::stride, ::stride] = g
    else:
        gd = g
    gp = _zero_pad(gd, k - 1)
    oh = gp.shape[1] - k + 1  # = (out_h - 1) * stride + k, never exceeds h + 2*pad
    ow = gp.shape[2] - k + 1
    wflip = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    core = (wflip.reshape(c_in, -1) @ _im2col(gp, k, 1, oh, ow)).reshape(c_in, oh, ow)
    hp, wp = h + 2 * pad, w + 2 * pad
    if (oh, ow) != (hp, wp):
        gxp = np.zeros((c_in, hp, wp))
        gxp[:, :oh, :ow] = core
    else:
        gxp = core
    return gxp[:, pad : pad + h, pad : pad + w] if pad else gxp


# -- bilinear resize -------------------------------------------------------

_RESIZE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) interpolation matrix; sample centers at (i+0.5)*scale-0.5."""
    key = (src, dst)
    cached = _RESIZE_CACHE.get(key)
    if cached is not None:
        return cached
    mat = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    pos = np.clip((np.arange(dst, dtype=np.float64) + 0.5) * scale - 0.5, 0.0, src - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = pos - i0
    rows = np.arange(dst)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    _RESIZE_CACHE[key] = mat
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample of a (C, H, W) tensor to (C, out_h, out_w).

    Align-corners-false convention with clamped borders. Separable, so
    it is evaluated as two small matrix products; resizing to the same
    size applies identity matrices.
    """
    xd = x.data
    if xd.ndim != 3:
        raise ShapeError(f"bilinear_resize input must be (C, H, W), got {xd.shape}")
    if out_h < 1 or out_w < 1:
        raise UsageError(f"bilinear_resize target must be >= 1x1, got {out_h}x{out_w}")
    _, h, w = xd.shape
    ry = _resize_matrix(h, out_h)
    rx = _resize_matrix(w, out_w)
    tmp = np.tensordot(ry, xd, axes=([1], [1]))  # (out_h, C, W)
    out = np.tensordot(tmp, rx, axes=([2], [1])).transpose(1, 0, 2)  # (C, out_h, out_w)

    def back(g):
        t = np.tensordot(ry.T, g, axes=([1], [1]))  # (H, C, out_w)
        gx = np.tensordot(t, rx, axes=([2], [0])).transpose(1, 0, 2)
        return (np.ascontiguousarray(gx),)

    return _node(np.ascontiguousarray(out), (x,), back)


# -- bilinear warp ----------------------------------------------------------

_GRID_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    key = (h, w)
    cached = _GRID_CACHE.get(key)
    if cached is None:
        gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        cached = (gy, gx)
        _GRID_CACHE[key] = cached
    return cached


def warp_bilinear(x: Tensor, flow: Tensor) -> Tensor:
    """Backward warp: out(p) = x(p + flow(p)) with bilinear sampling.

    flow is (2, H, W): channel 0 is the horizontal displacement in
    pixels, channel 1 the vertical one. Samples outside the image clamp
    to the border. Differentiable in both the image and the flow; the
    flow gradient is zero where clamping is active.
    """
    xd, fd = x.data, flow.data
    if xd.ndim != 3:
        raise ShapeError(f"warp input must be (C, H, W), got {xd.shape}")
    if fd.shape != (2,) + xd.shape[1:]:
        raise ShapeError(f"flow must be (2, {xd.shape[1]}, {xd.shape[2]}), got {fd.shape}")
    c, h, w = xd.shape
    gy, gx = _pixel_grid(h, w)
    sx = gx + fd[0]
    sy = gy + fd[1]
    sxc = np.clip(sx, 0.0, w - 1.0)
    syc = np.clip(sy, 0.0, h - 1.0)
    x0 = sxc.astype(np.int64)
    y0 = syc.astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sxc - x0
    fy = syc - y0

    v00 = xd[:, y0, x0]
    v01 = xd[:, y0, x1]
    v10 = xd[:, y1, x0]
    v11 = xd[:, y1, x1]
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11

    inside_x = (sx > 0.0) & (sx < w - 1.0)
    inside_y = (sy > 0.0) & (sy < h - 1.0)

    def back(g):
        gx_img = np.zeros_like(xd).reshape(c, -1)
        gflat = g.reshape(c, -1)
        ch_idx = np.arange(c)[:, None]
        for weight, yy, xx in ((w00, y0, x0), (w01, y0, x1), (w10, y1, x0), (w11, y1, x1)):
            flat = (yy * w + xx).ravel()[None, :]
            np.add.at(gx_img, (ch_idx, flat), gflat * weight.ravel()[None, :])
        d_dx = ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy) * g
        d_dy = ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx) * g
        gflow = np.stack(
            [
                np.where(inside_x, d_dx.sum(axis=0), 0.0),
                np.where(inside_y, d_dy.sum(axis=0), 0.0),
            ]
        )
        return gx_img.reshape(xd.shape), gflow

    return _node(out, (x, flow), back)


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of an analytic-vs-finite-difference comparison."""

    max_rel_err: float
    passed: bool
    n_coords: int
    note: str = ""

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        extra = f" ({self.note})" if self.note else ""
        return f"grad_check {status}: max_rel_err={self.max_rel_err:.3e} over {self.n_coords} coords{extra}"


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare fn's analytic gradients against central finite differences.

    fn maps Tensors to a scalar Tensor. Relative error per coordinate is
    |a - n| / max(|a|, |n|, 1e-8); the check passes iff the maximum over
    all checked coordinates is <= tol. With max_coords set, a seeded
    random subset of coordinates per input is checked (for large
    parameter vectors). Non-finite values anywhere are reported as a
    failure, never raised.
    """
    tensors = [Tensor(np.array(v, dtype=np.float64), requires_grad=True) for v in inputs]

    def _evaluate() -> float:
        with no_grad(), np.errstate(all="ignore"):
            out = fn(*tensors)
        return float(out.data)

    try:
        with np.errstate(all="ignore"):
            out = fn(*tensors)
            if out.data.shape != ():
                raise UsageError(f"grad_check closure must return a scalar, got shape {out.data.shape}")
            if not np.isfinite(out.data):
                return GradCheckReport(math.inf, False, 0, "non-finite forward value")
            out.backward()
    except (FloatingPointError, OverflowError) as err:
        return GradCheckReport(math.inf, False, 0, f"forward/backward raised {err!r}")

    analytic = []
    for t in tensors:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            return GradCheckReport(math.inf, False, 0, "non-finite analytic gradient")
        analytic.append(g)

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    checked = 0
    for t, grad in zip(tensors, analytic):
        size = t.data.size
        if max_coords is not None and size > max_coords:
            coords = rng.choice(size, size=max_coords, replace=False)
            coords = np.sort(coords)
        else:
            coords = np.arange(size)
        flat = t.data.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            f_hi = _evaluate()
            flat[idx] = orig - eps
            f_lo = _evaluate()
            flat[idx] = orig
            if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
                return GradCheckReport(math.inf, False, checked, "non-finite value during finite differences")
            numeric = (f_hi - f_lo) / (2.0 * eps)
            a = float(grad.reshape(-1)[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel = rel
            checked += 1
    return GradCheckReport(max_rel, max_rel <= tol, checked)
