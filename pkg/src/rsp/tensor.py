"""Dense float32 tensors and the numerical kernels everything else builds on.

Values are plain ``numpy.ndarray`` objects: C-contiguous, float32, rank 1..4,
NCHW layout for feature maps.  Every reduction (convolution, matmul, pooling)
accumulates in float64 and stores the result in float32.  The ``*_f64``
variants keep the float64 accumulator as the result dtype; the relevance
engine uses those internally so that ratio/cancellation steps do not lose
mass to rounding.

All functions are pure and never mutate their arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "ConvGeometry",
    "as_tensor",
    "check_tensor",
    "conv2d",
    "conv2d_input_vjp",
    "conv2d_weight_grad",
    "linear",
    "linear_input_vjp",
    "linear_weight_grad",
    "maxpool2d",
    "maxpool2d_vjp",
    "avgpool2d",
    "avgpool2d_vjp",
    "global_avg_pool",
    "global_avg_pool_vjp",
    "bilinear_upsample",
]

MAX_RANK = 4


class ShapeError(ValueError):
    """Raised when an operand's shape is inconsistent with the operation."""


def as_tensor(data, shape=None) -> np.ndarray:
    """Build a validated float32 tensor (C-order, rank 1..4, extents >= 1)."""
    t = np.asarray(data, dtype=np.float32)
    if shape is not None:
        t = t.reshape(shape)
    t = np.ascontiguousarray(t)
    check_tensor(t)
    return t


def check_tensor(t: np.ndarray, rank: int | None = None, name: str = "tensor") -> None:
    if t.ndim < 1 or t.ndim > MAX_RANK:
        raise ShapeError(f"{name}: rank {t.ndim} outside supported range 1..{MAX_RANK}")
    if any(e < 1 for e in t.shape):
        raise ShapeError(f"{name}: zero-sized extent in shape {t.shape}")
    if rank is not None and t.ndim != rank:
        raise ShapeError(f"{name}: expected rank {rank}, got shape {t.shape}")


@dataclass(frozen=True)
class ConvGeometry:
    """Shape bookkeeping for a 2-D convolution (symmetric zero padding, groups=1)."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.stride < 1:
            raise ShapeError(f"conv stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"conv padding must be >= 0, got {self.padding}")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ShapeError(f"conv kernel extents must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.groups != 1:
            raise ShapeError("grouped convolution is not supported")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("conv channel counts must be >= 1")

    def out_size(self, in_h: int, in_w: int) -> tuple[int, int]:
        oh = (in_h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (in_w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv output extent {oh}x{ow} < 1 for input {in_h}x{in_w}, "
                f"kernel {self.kernel_h}x{self.kernel_w}, stride {self.stride}, padding {self.padding}"
            )
        return oh, ow

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)


def _check_conv_operands(x: np.ndarray, w: np.ndarray, geom: ConvGeometry) -> None:
    check_tensor(x, 4, "conv input")
    check_tensor(w, 4, "conv weight")
    if w.shape != geom.weight_shape():
        raise ShapeError(f"conv weight shape {w.shape} != geometry {geom.weight_shape()}")
    if x.shape[1] != geom.in_channels:
        raise ShapeError(f"conv input has {x.shape[1]} channels, geometry expects {geom.in_channels}")


def _im2col(x64: np.ndarray, geom: ConvGeometry, oh: int, ow: int) -> np.ndarray:
    """Gather padded input patches into (N, C*kh*kw, oh*ow), float64."""
    n, c = x64.shape[:2]
    p, s = geom.padding, geom.stride
    kh, kw = geom.kernel_h, geom.kernel_w
    xp = np.pad(x64, ((0, 0), (0, 0), (p, p), (p, p))) if p else x64
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d_f64(x, w, b, geom: ConvGeometry) -> np.ndarray:
    _check_conv_operands(x, w, geom)
    n = x.shape[0]
    oh, ow = geom.out_size(x.shape[2], x.shape[3])
    cols = _im2col(x.astype(np.float64, copy=False), geom, oh, ow)
    wm = w.astype(np.float64).reshape(geom.out_channels, -1)
    out = np.matmul(wm, cols)  # (N, K, oh*ow) via broadcasting over N
    out = out.reshape(n, geom.out_channels, oh, ow)
    if b is not None:
        check_tensor(b, 1, "conv bias")
        if b.shape[0] != geom.out_channels:
            raise ShapeError(f"conv bias length {b.shape[0]} != out_channels {geom.out_channels}")
        out = out + b.astype(np.float64)[None, :, None, None]
    return out


def conv2d(x, w, b, geom: ConvGeometry) -> np.ndarray:
    """Cross-correlation with zero padding; float64 accumulation, float32 result."""
    return conv2d_f64(x, w, b, geom).astype(np.float32)


def conv2d_input_vjp_f64(cotangent, w, geom: ConvGeometry, input_shape) -> np.ndarray:
    check_tensor(cotangent, 4, "conv cotangent")
    check_tensor(w, 4, "conv weight")
    if w.shape != geom.weight_shape():
        raise ShapeError(f"conv weight shape {w.shape} != geometry {geom.weight_shape()}")
    n, c, h, wd = input_shape
    oh, ow = geom.out_size(h, wd)
    if cotangent.shape != (n, geom.out_channels, oh, ow):
        raise ShapeError(
            f"conv cotangent shape {cotangent.shape} != forward output {(n, geom.out_channels, oh, ow)}"
        )
    p, s = geom.padding, geom.stride
    kh, kw = geom.kernel_h, geom.kernel_w
    g = cotangent.astype(np.float64, copy=False)
    w64 = w.astype(np.float64)
    gp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            # contribution of kernel tap (i, j): (N,K,oh,ow) x (K,C) -> (N,C,oh,ow)
            contrib = np.einsum("nkhw,kc->nchw", g, w64[:, :, i, j])
            gp[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s] += contrib
    if p:
        gp = gp[:, :, p : p + h, p : p + wd]
    return gp


def conv2d_input_vjp(cotangent, w, geom: ConvGeometry, input_shape) -> np.ndarray:
    """Transposed convolution: J^T . cotangent w.r.t. the conv input."""
    return conv2d_input_vjp_f64(cotangent, w, geom, input_shape).astype(np.float32)


def conv2d_weight_grad_f64(cotangent, x, geom: ConvGeometry) -> np.ndarray:
    check_tensor(cotangent, 4, "conv cotangent")
    check_tensor(x, 4, "conv input")
    if x.shape[1] != geom.in_channels:
        raise ShapeError(f"conv input has {x.shape[1]} channels, geometry expects {geom.in_channels}")
    oh, ow = geom.out_size(x.shape[2], x.shape[3])
    if cotangent.shape != (x.shape[0], geom.out_channels, oh, ow):
        raise ShapeError(
            f"conv cotangent shape {cotangent.shape} != forward output "
            f"{(x.shape[0], geom.out_channels, oh, ow)}"
        )
    cols = _im2col(x.astype(np.float64, copy=False), geom, oh, ow)
    g = cotangent.astype(np.float64, copy=False).reshape(x.shape[0], geom.out_channels, oh * ow)
    # sum over batch and output positions: (N,K,P) x (N,CKK,P) -> (K,CKK)
    gw = np.einsum("nkp,ncp->kc", g, cols)
    return gw.reshape(geom.weight_shape())


def conv2d_weight_grad(cotangent, x, geom: ConvGeometry) -> np.ndarray:
    """Weight-space vJp of conv2d: J_w^T . cotangent."""
    return conv2d_weight_grad_f64(cotangent, x, geom).astype(np.float32)


def _check_linear(x, w):
    check_tensor(x, 2, "linear input")
    check_tensor(w, 2, "linear weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear input features {x.shape[1]} != weight features {w.shape[1]}")


def linear_f64(x, w, b) -> np.ndarray:
    _check_linear(x, w)
    y = np.matmul(x.astype(np.float64, copy=False), w.astype(np.float64).T)
    if b is not None:
        check_tensor(b, 1, "linear bias")
        if b.shape[0] != w.shape[0]:
            raise ShapeError(f"linear bias length {b.shape[0]} != out features {w.shape[0]}")
        y = y + b.astype(np.float64)[None, :]
    return y


def linear(x, w, b) -> np.ndarray:
    """y = x . W^T + b with float64 accumulation."""
    return linear_f64(x, w, b).astype(np.float32)


def linear_input_vjp_f64(cotangent, w) -> np.ndarray:
    check_tensor(cotangent, 2, "linear cotangent")
    check_tensor(w, 2, "linear weight")
    if cotangent.shape[1] != w.shape[0]:
        raise ShapeError(f"linear cotangent features {cotangent.shape[1]} != weight rows {w.shape[0]}")
    return np.matmul(cotangent.astype(np.float64, copy=False), w.astype(np.float64))


def linear_input_vjp(cotangent, w) -> np.ndarray:
    return linear_input_vjp_f64(cotangent, w).astype(np.float32)


def linear_weight_grad_f64(cotangent, x) -> np.ndarray:
    check_tensor(cotangent, 2, "linear cotangent")
    check_tensor(x, 2, "linear input")
    if cotangent.shape[0] != x.shape[0]:
        raise ShapeError(f"linear cotangent batch {cotangent.shape[0]} != input batch {x.shape[0]}")
    return np.matmul(cotangent.astype(np.float64, copy=False).T, x.astype(np.float64, copy=False))


def linear_weight_grad(cotangent, x) -> np.ndarray:
    return linear_weight_grad_f64(cotangent, x).astype(np.float32)


@dataclass(frozen=True)
class ArgmaxTrace:
    """Winner positions of a max-pool: flat (row*W + col) input indices per window."""

    input_shape: tuple
    kernel: int
    stride: int
    padding: int
    indices: np.ndarray  # (N, C, oh, ow) int64, flat index into H*W of the input


def _pool_windows(x, kernel: int, stride: int, padding: int, fill: float):
    check_tensor(x, 4, "pool input")
    if kernel < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"pool kernel/stride/padding {kernel}/{stride}/{padding} invalid")
    if padding >= kernel:
        raise ShapeError(f"pool padding {padding} must be < kernel {kernel}")
    n, c, h, w = x.shape
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"pool output extent {oh}x{ow} < 1 for input {h}x{w}, kernel {kernel}")
    if padding:
        xp = np.full((n, c, h + 2 * padding, w + 2 * padding), fill, dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    win = np.empty((n, c, oh, ow, kernel * kernel), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            win[..., i * kernel + j] = xp[
                :, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride
            ]
    return win, oh, ow


def maxpool2d(x, kernel: int, stride: int, padding: int = 0):
    """Max pooling; ties go to the first window position in row-major order.

    Padding cells are filled with -inf and can never win.  Returns the pooled
    map and an ArgmaxTrace with flat input indices of each winner.
    """
    win, oh, ow = _pool_windows(x, kernel, stride, padding, fill=-np.inf)
    flat_in_window = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, flat_in_window[..., None], axis=-1)[..., 0]
    n, c, h, w = x.shape
    ki, kj = np.divmod(flat_in_window, kernel)
    rows = (np.arange(oh) * stride - padding)[None, None, :, None] + ki
    cols = (np.arange(ow) * stride - padding)[None, None, None, :] + kj
    indices = (rows * w + cols).astype(np.int64)
    trace = ArgmaxTrace(tuple(x.shape), kernel, stride, padding, indices)
    return out.astype(np.float32), trace


def maxpool2d_vjp(cotangent, trace: ArgmaxTrace) -> np.ndarray:
    """Routes every cotangent entry to its recorded winner (overlaps accumulate)."""
    check_tensor(cotangent, 4, "maxpool cotangent")
    if cotangent.shape != trace.indices.shape:
        raise ShapeError(f"maxpool cotangent shape {cotangent.shape} != trace {trace.indices.shape}")
    n, c, h, w = trace.input_shape
    out = np.zeros((n, c, h * w), dtype=np.float64)
    flat = trace.indices.reshape(n, c, -1)
    np.add.at(out, (np.arange(n)[:, None, None], np.arange(c)[None, :, None], flat),
              cotangent.astype(np.float64, copy=False).reshape(n, c, -1))
    return out.reshape(n, c, h, w).astype(np.float32)


def avgpool2d(x, kernel: int, stride: int) -> np.ndarray:
    """Non-padded average pooling."""
    win, oh, ow = _pool_windows(x.astype(np.float64, copy=False), kernel, stride, 0, fill=0.0)
    return win.mean(axis=-1).astype(np.float32)


def avgpool2d_vjp(cotangent, input_shape, kernel: int, stride: int) -> np.ndarray:
    """Each input cell in a window receives cotangent / kernel^2 (overlaps accumulate)."""
    check_tensor(cotangent, 4, "avgpool cotangent")
    n, c, h, w = input_shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    if cotangent.shape != (n, c, oh, ow):
        raise ShapeError(f"avgpool cotangent shape {cotangent.shape} != forward output {(n, c, oh, ow)}")
    g = cotangent.astype(np.float64, copy=False) / (kernel * kernel)
    out = np.zeros((n, c, h, w), dtype=np.float64)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += g
    return out.astype(np.float32)


def global_avg_pool(x) -> np.ndarray:
    """Mean over the spatial dimensions: (N,K,H,W) -> (N,K)."""
    check_tensor(x, 4, "global_avg_pool input")
    return x.astype(np.float64, copy=False).mean(axis=(2, 3)).astype(np.float32)


def global_avg_pool_vjp(cotangent, input_shape) -> np.ndarray:
    check_tensor(cotangent, 2, "global_avg_pool cotangent")
    n, c, h, w = input_shape
    if cotangent.shape != (n, c):
        raise ShapeError(f"global_avg_pool cotangent shape {cotangent.shape} != {(n, c)}")
    g = cotangent.astype(np.float64, copy=False) / (h * w)
    return np.broadcast_to(g[:, :, None, None], (n, c, h, w)).astype(np.float32)


def bilinear_upsample(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2-D map using half-pixel-centered sampling."""
    if plane.ndim != 2:
        raise ShapeError(f"bilinear_upsample expects a 2-D map, got shape {plane.shape}")
    h, w = plane.shape
    src = plane.astype(np.float64, copy=False)

    def _axis_coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        c = np.clip(c, 0.0, n_in - 1.0)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    ylo, yhi, fy = _axis_coords(out_h, h)
    xlo, xhi, fx = _axis_coords(out_w, w)
    top = src[ylo[:, None], xlo[None, :]] * (1 - fx)[None, :] + src[ylo[:, None], xhi[None, :]] * fx[None, :]
    bot = src[yhi[:, None], xlo[None, :]] * (1 - fx)[None, :] + src[yhi[:, None], xhi[None, :]] * fx[None, :]
    return (top * (1 - fy)[:, None] + bot * fy[:, None]).astype(np.float32)
