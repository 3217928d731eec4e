"""Spatial operators: learned convolutions (im2col) and FFT linear convolution.

Learned layers follow the usual deep-learning convention (cross-correlation,
``NCHW`` batches). ``conv2d_fft`` is a true linear convolution over the last
two axes, with leading axes broadcast, evaluated in Fourier space.
"""
from __future__ import annotations

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _unbroadcast, make_op


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    B, C, Ho, Wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    return cols, Ho, Wo


def _col2im(dcols: np.ndarray, xshape, kh, kw, stride, pad, Ho, Wo) -> np.ndarray:
    B, C, H, W = xshape
    d = dcols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += d[:, :, i, j]
    return xp[:, :, pad:pad + H, pad:pad + W]


def _conv_fwd(x, w, stride, pad):
    K, C, kh, kw = w.shape
    cols, Ho, Wo = _im2col(x, kh, kw, stride, pad)
    out = cols @ w.reshape(K, -1).T
    return out.reshape(x.shape[0], Ho, Wo, K).transpose(0, 3, 1, 2), cols


def _conv_grad_input(g, w, xshape, stride, pad):
    K, C, kh, kw = w.shape
    B, _, Ho, Wo = g.shape
    dcols = g.transpose(0, 2, 3, 1).reshape(-1, K) @ w.reshape(K, -1)
    return _col2im(dcols, xshape, kh, kw, stride, pad, Ho, Wo)


def _conv_grad_weight(g, cols, wshape):
    K = wshape[0]
    return (g.transpose(0, 2, 3, 1).reshape(-1, K).T @ cols).reshape(wshape)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[B,C,H,W]`` with ``weight[K,C,h,w]``."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    kh, kw = weight.shape[2:]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise ShapeError("conv2d (kernel larger than padded input)", x.shape, weight.shape)
    out, cols = _conv_fwd(x.data, weight.data, stride, padding)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = _conv_grad_input(g, weight.data, x.shape, stride, padding)
        gw = _conv_grad_weight(g, cols, weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    if bias is not None:
        out = out + bias.data[None, :, None, None]
    return make_op(np.ascontiguousarray(out), parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transpose convolution, the adjoint of :func:`conv2d` in its input.

    ``weight`` has shape ``[C_in, C_out, h, w]``; the output side is
    ``(H - 1) * stride - 2 * padding + h + output_padding``.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError("conv_transpose2d", x.shape, weight.shape)
    if stride < 1 or padding < 0 or not 0 <= output_padding < stride:
        raise ValueError("conv_transpose2d: invalid stride/padding combination")
    B, _, H, W = x.shape
    kh, kw = weight.shape[2:]
    Hout = (H - 1) * stride - 2 * padding + kh + output_padding
    Wout = (W - 1) * stride - 2 * padding + kw + output_padding
    if Hout < 1 or Wout < 1:
        raise ValueError("conv_transpose2d: invalid stride/padding combination")
    out_shape = (B, weight.shape[1], Hout, Wout)
    out = _conv_grad_input(x.data, weight.data, out_shape, stride, padding)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx, cols = _conv_fwd(g, weight.data, stride, padding)
        gw = _conv_grad_weight(x.data, cols, weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    if bias is not None:
        out = out + bias.data[None, :, None, None]
    return make_op(out, parents, backward)


def upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes."""
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def backward(g):
        s = g.shape
        g = g.reshape(*s[:-2], s[-2] // factor, factor, s[-1] // factor, factor)
        return (g.sum(axis=(-3, -1)),)

    return make_op(out, (x,), backward)


def avg_pool2d(x: Tensor, factor: int = 2) -> Tensor:
    s = x.shape
    if s[-2] % factor or s[-1] % factor:
        raise ShapeError(f"avg_pool2d (factor {factor})", s)
    out = x.data.reshape(*s[:-2], s[-2] // factor, factor, s[-1] // factor, factor).mean(axis=(-3, -1))

    def backward(g):
        g = g / (factor * factor)
        return (g.repeat(factor, axis=-2).repeat(factor, axis=-1),)

    return make_op(out, (x,), backward)


# ------------------------------------------------------------------- FFT
def _fft_size(n: int) -> int:
    return sfft.next_fast_len(n, real=True)


def fft_convolve_full(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Full 2D linear convolution over the last two axes (leading axes broadcast)."""
    Ha, Wa = a.shape[-2:]
    Hb, Wb = b.shape[-2:]
    H, W = Ha + Hb - 1, Wa + Wb - 1
    s = (_fft_size(H), _fft_size(W))
    spec = sfft.rfft2(a, s=s) * sfft.rfft2(b, s=s)
    out = sfft.irfft2(spec, s=s)[..., :H, :W]
    return out.astype(np.result_type(a.dtype, b.dtype), copy=False)


def fft_correlate(a: np.ndarray, b: np.ndarray, out_hw: tuple[int, int],
                  offset: tuple[int, int] = (0, 0)) -> np.ndarray:
    """``out[k] = sum_j b[j] * a[j + k + offset]`` for ``k`` in ``[0, out_hw)``.

    Entries of ``a`` outside its extent count as zero.
    """
    Hb, Wb = b.shape[-2:]
    full = fft_convolve_full(a, b[..., ::-1, ::-1])
    r0, c0 = Hb - 1 + offset[0], Wb - 1 + offset[1]
    return _window(full, r0, c0, out_hw)


def _window(full: np.ndarray, r0: int, c0: int, out_hw) -> np.ndarray:
    """Slice ``full[..., r0:r0+h, c0:c0+w]`` treating out-of-range rows/cols as zero."""
    h, w = out_hw
    H, W = full.shape[-2:]
    if r0 >= 0 and c0 >= 0 and r0 + h <= H and c0 + w <= W:
        return full[..., r0:r0 + h, c0:c0 + w]
    out = np.zeros(full.shape[:-2] + (h, w), dtype=full.dtype)
    rs, re = max(r0, 0), min(r0 + h, H)
    cs, ce = max(c0, 0), min(c0 + w, W)
    if rs < re and cs < ce:
        out[..., rs - r0:re - r0, cs - c0:ce - c0] = full[..., rs:re, cs:ce]
    return out


def _embed(g: np.ndarray, full_hw, r0: int, c0: int) -> np.ndarray:
    out = np.zeros(g.shape[:-2] + tuple(full_hw), dtype=g.dtype)
    out[..., r0:r0 + g.shape[-2], c0:c0 + g.shape[-1]] = g
    return out


def conv2d_fft(image: Tensor, kernel: Tensor, mode: str = "full") -> Tensor:
    """True 2D linear convolution evaluated with FFTs.

    ``mode="full"`` returns the ``(H+h-1) x (W+w-1)`` result; ``"same"`` returns
    an ``H x W`` window offset by ``(h // 2, w // 2)``, so convolving with a
    one-hot kernel at its centre index reproduces the image.
    """
    if image.ndim < 2 or kernel.ndim < 2:
        raise ShapeError("conv2d_fft", image.shape, kernel.shape)
    try:
        np.broadcast_shapes(image.shape[:-2], kernel.shape[:-2])
    except ValueError:
        raise ShapeError("conv2d_fft", image.shape, kernel.shape) from None
    H, W = image.shape[-2:]
    h, w = kernel.shape[-2:]
    full_hw = (H + h - 1, W + w - 1)
    if mode == "full":
        r0, c0, out_hw = 0, 0, full_hw
    elif mode in ("same", "same-centered"):
        r0, c0, out_hw = h // 2, w // 2, (H, W)
    else:
        raise ValueError(f"conv2d_fft: unknown mode {mode!r}")
    full = fft_convolve_full(image.data, kernel.data)
    out = np.ascontiguousarray(full[..., r0:r0 + out_hw[0], c0:c0 + out_hw[1]])

    def backward(g):
        G = _embed(g, full_hw, r0, c0)
        ga = fft_correlate(G, kernel.data, (H, W))
        gb = fft_correlate(G, image.data, (h, w))
        return _unbroadcast(ga, image.shape), _unbroadcast(gb, kernel.shape)

    return make_op(out, (image, kernel), backward)
