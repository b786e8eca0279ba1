"""Convolution primitives: standard, depthwise, and transposed, via im2col + GEMM.

Kernel layouts follow the convolution they belong to:

* standard / pointwise / depthwise kernels are (out_channels, in_channels, kh, kw),
  with in_channels == 1 for depthwise (one spatial filter per channel);
* a transposed-convolution kernel is stored in the layout of the strided
  convolution it is the adjoint of, i.e. (channels_in_of_this_op,
  channels_out_of_this_op, kh, kw).  forward(transposed_conv2d) is exactly
  the input-gradient of that strided convolution.

The transposed output-size convention is pinned to exact upsampling:
output spatial size = stride * input size.  For a k x k kernel with stride s
this fixes padding = (k - s + 1) // 2 and output padding = s + 2*padding - k,
e.g. (pad 1, output pad 1) for 3x3 stride 2 and (pad 1, output pad 0) for
3x3 stride 1.

GEMMs and scatter accumulations run in float64 and are cast back to the
storage dtype.  A naive nested-loop reference of each variant is kept here as
the testing oracle for the im2col path; the references share no code with it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _accum, _make, astensor

__all__ = [
    "ConvSpec",
    "conv2d",
    "depthwise_conv2d",
    "transposed_conv2d",
    "conv_output_size",
    "transposed_padding",
    "conv2d_reference",
    "depthwise_conv2d_reference",
    "transposed_conv2d_reference",
]

_MODES = ("standard", "depthwise", "pointwise", "transposed")


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution: kernel size, stride, symmetric zero padding."""

    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    mode: str = "standard"

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown convolution mode {self.mode!r}, expected one of {_MODES}")
        if self.kernel_h < 1 or self.kernel_w < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid convolution geometry: {self}")
        if self.mode == "pointwise" and (self.kernel_h, self.kernel_w, self.stride, self.padding) != (1, 1, 1, 0):
            raise ValueError("pointwise convolution requires 1x1 kernel, stride 1, padding 0")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ValueError(
            f"convolution output collapses: input {size}, kernel {kernel}, "
            f"stride {stride}, padding {padding}"
        )
    return out


def transposed_padding(kernel: int, stride: int) -> tuple[int, int]:
    """(padding, output_padding) that make output size == stride * input size."""
    pad = max(0, (kernel - stride + 1) // 2)
    out_pad = stride + 2 * pad - kernel
    if not 0 <= out_pad < stride:
        raise ValueError(
            f"no exact-upsampling convention for kernel {kernel} with stride {stride}"
        )
    return pad, out_pad


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------

def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(N,C,H,W) -> (N, C*kh*kw, OH*OW) patch matrix, one column per output pixel."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (N, C, OHfull, OWfull, kh, kw) view, then stride and flatten (single copy)
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add columns back onto the (N,C,H,W) grid."""
    n, c, h, w = x_shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow).astype(np.float64, copy=False)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols6[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def _gemm64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))


# ---------------------------------------------------------------------------
# forward/backward ops
# ---------------------------------------------------------------------------

def conv2d(x, kernel, bias=None, spec: ConvSpec | None = None) -> Tensor:
    """Standard 2-D convolution (cross-correlation), (N,Ci,H,W) -> (N,Co,OH,OW)."""
    if spec is None:
        raise ValueError("conv2d requires a ConvSpec")
    if spec.mode not in ("standard", "pointwise"):
        raise ValueError(f"conv2d: spec mode {spec.mode!r} not a standard convolution")
    x, kernel = astensor(x), astensor(kernel)
    bias = astensor(bias) if bias is not None else None
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input/kernel, got {x.data.shape} and {kernel.data.shape}")
    n, ci, h, w = x.data.shape
    co, kci, kh, kw = kernel.data.shape
    if (kh, kw) != (spec.kernel_h, spec.kernel_w):
        raise ValueError(f"conv2d: kernel spatial dims {(kh, kw)} != spec {(spec.kernel_h, spec.kernel_w)}")
    if kci != ci:
        raise ValueError(f"conv2d: input has {ci} channels but kernel expects {kci}")
    if h + 2 * spec.padding < kh or w + 2 * spec.padding < kw:
        raise ValueError(
            f"conv2d: padded input {h + 2 * spec.padding}x{w + 2 * spec.padding} "
            f"smaller than kernel {kh}x{kw}"
        )
    if bias is not None and bias.data.shape != (co,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({co},)")

    dtype = x.data.dtype
    w2 = kernel.data.reshape(co, ci * kh * kw)

    if spec.mode == "pointwise" or (kh == 1 and kw == 1 and spec.stride == 1 and spec.padding == 0):
        # 1x1 stride-1 fast path: plain channel-mixing GEMM, no patch copy
        cols = x.data.reshape(n, ci, h * w)
        oh, ow = h, w
    else:
        cols = im2col(x.data, kh, kw, spec.stride, spec.padding)
        oh = conv_output_size(h, kh, spec.stride, spec.padding)
        ow = conv_output_size(w, kw, spec.stride, spec.padding)

    out = _gemm64(w2, cols).astype(dtype).reshape(n, co, oh, ow)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gf = g.reshape(n, co, oh * ow)
        dk = _gemm64(gf, cols.transpose(0, 2, 1)).sum(axis=0).astype(dtype)
        _accum(kernel, dk.reshape(kernel.data.shape))
        dcols = _gemm64(w2.T, gf)
        if spec.mode == "pointwise" or (kh == 1 and kw == 1 and spec.stride == 1 and spec.padding == 0):
            _accum(x, dcols.astype(dtype).reshape(x.data.shape))
        else:
            _accum(x, col2im(dcols, x.data.shape, kh, kw, spec.stride, spec.padding).astype(dtype))
        if bias is not None:
            _accum(bias, np.sum(gf, axis=(0, 2), dtype=np.float64).astype(dtype))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, backward)


def depthwise_conv2d(x, kernel, spec: ConvSpec | None = None) -> Tensor:
    """Per-channel spatial convolution; kernel is (C, 1, kh, kw)."""
    if spec is None:
        raise ValueError("depthwise_conv2d requires a ConvSpec")
    if spec.mode != "depthwise":
        raise ValueError(f"depthwise_conv2d: spec mode is {spec.mode!r}, expected 'depthwise'")
    x, kernel = astensor(x), astensor(kernel)
    n, c, h, w = x.data.shape
    kc, one, kh, kw = kernel.data.shape
    if one != 1:
        raise ValueError(f"depthwise_conv2d: kernel must be (C,1,kh,kw), got {kernel.data.shape}")
    if kc != c:
        raise ValueError(f"depthwise_conv2d: kernel has {kc} channels but input has {c}")
    if (kh, kw) != (spec.kernel_h, spec.kernel_w):
        raise ValueError(f"depthwise_conv2d: kernel dims {(kh, kw)} != spec {(spec.kernel_h, spec.kernel_w)}")

    dtype = x.data.dtype
    oh = conv_output_size(h, kh, spec.stride, spec.padding)
    ow = conv_output_size(w, kw, spec.stride, spec.padding)
    cols = im2col(x.data, kh, kw, spec.stride, spec.padding)
    cols4 = cols.reshape(n, c, kh * kw, oh * ow)
    wk = kernel.data.reshape(c, kh * kw)
    out = np.einsum(
        "ck,nckp->ncp", wk.astype(np.float64), cols4.astype(np.float64)
    ).astype(dtype).reshape(n, c, oh, ow)

    def backward(g):
        gf = g.reshape(n, c, oh * ow).astype(np.float64)
        dk = np.einsum("ncp,nckp->ck", gf, cols4.astype(np.float64))
        _accum(kernel, dk.astype(dtype).reshape(kernel.data.shape))
        dcols = np.einsum("ck,ncp->nckp", wk.astype(np.float64), gf).reshape(n, c * kh * kw, oh * ow)
        _accum(x, col2im(dcols, x.data.shape, kh, kw, spec.stride, spec.padding).astype(dtype))

    return _make(out, (x, kernel), backward)


def transposed_conv2d(x, kernel, spec: ConvSpec | None = None) -> Tensor:
    """Exact-upsampling transposed convolution, (N,Ci,H,W) -> (N,Co,s*H,s*W)."""
    if spec is None:
        raise ValueError("transposed_conv2d requires a ConvSpec")
    if spec.mode != "transposed":
        raise ValueError(f"transposed_conv2d: spec mode is {spec.mode!r}, expected 'transposed'")
    x, kernel = astensor(x), astensor(kernel)
    n, ci, h, w = x.data.shape
    kci, co, kh, kw = kernel.data.shape
    if kci != ci:
        raise ValueError(f"transposed_conv2d: input has {ci} channels but kernel expects {kci}")
    if (kh, kw) != (spec.kernel_h, spec.kernel_w):
        raise ValueError(f"transposed_conv2d: kernel dims {(kh, kw)} != spec {(spec.kernel_h, spec.kernel_w)}")

    dtype = x.data.dtype
    s = spec.stride
    pad, _ = transposed_padding(kh, s)
    oh, ow = s * h, s * w
    w2 = kernel.data.reshape(ci, co * kh * kw)

    # forward = input-gradient of conv2d(y, kernel, stride=s, pad=pad) with y of
    # spatial size (s*h, s*w): spread each input tap through the kernel support
    xf = x.data.reshape(n, ci, h * w)
    cols = _gemm64(w2.T, xf)
    out = col2im(cols, (n, co, oh, ow), kh, kw, s, pad).astype(dtype)

    def backward(g):
        # adjoint of the forward scatter = the strided convolution itself
        gcols = im2col(g.astype(np.float64, copy=False), kh, kw, s, pad)
        _accum(x, _gemm64(w2, gcols).astype(dtype).reshape(x.data.shape))
        dk = _gemm64(xf, gcols.transpose(0, 2, 1)).sum(axis=0)
        _accum(kernel, dk.astype(dtype).reshape(kernel.data.shape))

    return _make(out, (x, kernel), backward)


# ---------------------------------------------------------------------------
# naive loop references (testing oracles, forward only)
# ---------------------------------------------------------------------------

def conv2d_reference(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Five-nested-loop convolution used as the correctness oracle."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    n, ci, h, w = x.shape
    co, _, kh, kw = kernel.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for b in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(ci):
                        patch = x[b, c, i * stride:i * stride + kh, j * stride:j * stride + kw]
                        acc += float(np.sum(patch * kernel[o, c]))
                    out[b, o, i, j] = acc
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[None, :, None, None]
    return out


def depthwise_conv2d_reference(x, kernel, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Per-channel loop convolution oracle; kernel is (C,1,kh,kw)."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    n, c, h, w = x.shape
    _, _, kh, kw = kernel.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    patch = x[b, ch, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, ch, i, j] = float(np.sum(patch * kernel[ch, 0]))
    return out


def transposed_conv2d_reference(x, kernel, stride: int = 2) -> np.ndarray:
    """Direct scatter oracle for the exact-upsampling transposed convolution."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    n, ci, h, w = x.shape
    _, co, kh, kw = kernel.shape
    pad, _ = transposed_padding(kh, stride)
    oh, ow = stride * h, stride * w
    out = np.zeros((n, co, oh, ow))
    for b in range(n):
        for c_in in range(ci):
            for i in range(h):
                for j in range(w):
                    v = x[b, c_in, i, j]
                    for a in range(kh):
                        for bb in range(kw):
                            oi = i * stride - pad + a
                            oj = j * stride - pad + bb
                            if 0 <= oi < oh and 0 <= oj < ow:
                                out[b, :, oi, oj] += v * kernel[c_in, :, a, bb]
    return out
