"""Placing object canvases into the image and depth-ordered alpha blending.

Shapes used throughout (leading batch axes ``...`` are optional):

* canvas pixels ``[..., C, M, M]`` and alpha ``[..., M, M]``
* position weights ``[..., N, N]`` (a probability map; one-hot in hard mode)
* placed pixels ``[..., J, C, N, N]``, placed alphas ``[..., J, N, N]``,
  depths ``[..., J]`` and background ``[..., C, N, N]``

Placement is a linear convolution of the weight map with the canvas, aligned
so that a one-hot weight at pixel ``(r, c)`` puts canvas cell ``(a, b)`` at
``(r + a - M // 2, c + b - M // 2)``. Smaller depth means nearer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, conv2d_fft, fft_convolve_full, fft_correlate, make_op
from .autodiff.tensor import ShapeError, _unbroadcast, as_tensor

SEGMENT_THRESHOLD = 0.3


@dataclass
class ObjectCanvas:
    pixels: Tensor  # [3, M, M]
    alpha: Tensor  # [M, M]

    @property
    def size(self) -> int:
        return self.alpha.shape[-1]


@dataclass
class PlacedObject:
    pixels: Tensor  # [3, N, N]
    alpha: Tensor  # [N, N]
    depth: float | Tensor


@dataclass
class SceneAssembly:
    background: Tensor
    objects: list[PlacedObject] = field(default_factory=list)
    mode: str = "hard"
    tau_depth: float = 0.1

    def stacked(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        from .autodiff import stack

        pix = stack([o.pixels for o in self.objects], axis=0)
        alpha = stack([o.alpha for o in self.objects], axis=0)
        depth = stack([as_tensor(o.depth) for o in self.objects], axis=0)
        return self.background, pix, alpha, depth

    def composite(self) -> Tensor:
        if not self.objects:
            return self.background
        bg, pix, alpha, depth = self.stacked()
        if self.mode == "hard":
            return composite_hard(bg, pix, alpha, depth)
        return composite_soft(bg, pix, alpha, depth, self.tau_depth)


def _check_weights(weights: Tensor, tol: float = 1e-3) -> None:
    sums = weights.data.reshape(weights.shape[:-2] + (-1,)).sum(axis=-1)
    if np.any(np.abs(sums - 1) > tol):
        raise ValueError("position weights must sum to 1 (within 1e-3)")


def _clean_roundoff(t: Tensor, ref: np.ndarray) -> Tensor:
    # FFT leaves ~1e-16 residue where the exact result is zero
    tol = 64 * np.finfo(t.dtype).eps * max(float(np.abs(ref).max(initial=0.0)), 1e-30)
    t.data[np.abs(t.data) < tol] = 0
    return t


def place(canvas, weights) -> Tensor:
    """Convolve canvas layers ``[..., C, M, M]`` with position weights ``[..., N, N]``.

    The weight map broadcasts over the channel axis. Returns ``[..., C, N, N]``;
    contributions falling outside the image are discarded.
    """
    canvas, weights = as_tensor(canvas), as_tensor(weights)
    if canvas.shape[-1] > weights.shape[-1]:
        raise ShapeError("place (canvas larger than image)", canvas.shape, weights.shape)
    _check_weights(weights)
    w = weights.reshape(weights.shape[:-2] + (1,) + weights.shape[-2:])
    out = conv2d_fft(w, canvas, mode="same")
    return _clean_roundoff(out, canvas.data)


def place_object(canvas: ObjectCanvas, weights) -> tuple[Tensor, Tensor]:
    """Place one canvas; returns ``(pixels [3,N,N], alpha [N,N])``."""
    pix = place(canvas.pixels, weights)
    alpha = place(canvas.alpha.reshape((1,) + canvas.alpha.shape), weights)
    return pix, alpha.reshape(alpha.shape[1:])


def attention_crop(image, weights, M: int) -> Tensor:
    """Position-weighted average of all ``M x M`` crops centred on each pixel.

    ``image`` is ``[..., C, N, N]`` and ``weights`` ``[..., N, N]``; the result is
    ``[..., C, M, M]``. This is exactly the adjoint of :func:`place` in the
    canvas argument. Crop regions outside the image read as zero.
    """
    image, weights = as_tensor(image), as_tensor(weights)
    N = image.shape[-1]
    if M > N:
        raise ValueError(f"attention_crop: crop size {M} exceeds image size {N}")
    _check_weights(weights)
    h = M // 2
    w4 = weights.data[..., None, :, :]
    out = fft_correlate(image.data, w4, (M, M), offset=(-h, -h))

    def backward(g):
        gi = fft_convolve_full(w4, g)[..., h:h + N, h:h + N]
        gw = fft_correlate(image.data, g, (N, N), offset=(-h, -h))
        gw = _unbroadcast(gw, w4.shape).reshape(weights.shape)
        return _unbroadcast(gi, image.shape), gw

    return make_op(np.ascontiguousarray(out), (image, weights), backward)


# --------------------------------------------------------------- compositing
def _flatten_layers(bg: Tensor, pix: Tensor, alpha: Tensor, depth: Tensor):
    J = alpha.shape[-3]
    if pix.shape[:-3] != alpha.shape[:-2] or depth.shape[-1] != J:
        raise ShapeError("composite", pix.shape, alpha.shape, depth.shape)
    lead = alpha.shape[:-3]
    C, H, W = pix.shape[-3:]
    return (lead, J, C, H, W,
            np.broadcast_to(bg.data, lead + (C, H, W)).reshape(-1, C, H, W),
            pix.data.reshape(-1, J, C, H, W),
            alpha.data.reshape(-1, J, H, W),
            np.broadcast_to(depth.data, lead + (J,)).reshape(-1, J))


def depth_order(depths: np.ndarray) -> np.ndarray:
    """Indices sorting objects farthest-first; equal depths keep ascending index order."""
    return np.argsort(-np.asarray(depths), axis=-1, kind="stable")


def composite_hard(background, pixels, alphas, depths) -> Tensor:
    """Back-to-front "over" blending in strict depth order.

    Differentiable in background, pixels and alphas; depths only choose the order.
    """
    background, pixels, alphas, depths = map(as_tensor, (background, pixels, alphas, depths))
    lead, J, C, H, W, bg, X, A, D = _flatten_layers(background, pixels, alphas, depths)
    order = depth_order(D)
    Xs = np.take_along_axis(X, order[:, :, None, None, None], axis=1)
    As = np.take_along_axis(A, order[:, :, None, None], axis=1)[:, :, None]
    layers = [bg]
    cur = bg
    for k in range(J):
        cur = (1 - As[:, k]) * cur + As[:, k] * Xs[:, k]
        layers.append(cur)
    out = cur.reshape(lead + (C, H, W))

    def backward(g):
        gc = g.reshape(-1, C, H, W)
        gXs = np.empty_like(Xs)
        gAs = np.empty_like(As)
        for k in reversed(range(J)):
            gXs[:, k] = gc * As[:, k]
            gAs[:, k] = (gc * (Xs[:, k] - layers[k])).sum(axis=1, keepdims=True)
            gc = gc * (1 - As[:, k])
        gX = np.empty_like(gXs)
        gA = np.empty_like(gAs)
        np.put_along_axis(gX, order[:, :, None, None, None], gXs, axis=1)
        np.put_along_axis(gA, order[:, :, None, None, None], gAs, axis=1)
        gbg = _unbroadcast(gc.reshape(lead + (C, H, W)), background.shape)
        return (gbg, gX.reshape(pixels.shape), gA[:, :, 0].reshape(alphas.shape), None)

    return make_op(out, (background, pixels, alphas, depths), backward)


def composite_soft(background, pixels, alphas, depths, tau_depth: float = 0.1) -> Tensor:
    """Softened depth ordering: a per-pixel convex combination of all layers.

    Object ``j`` gets weight ``alpha_j * exp((1 - d_j) / tau)`` and the
    background ``exp(0)`` (its depth is pinned at 1). As ``tau -> 0`` with
    binary alphas this tends to :func:`composite_hard`.
    """
    if not tau_depth > 0:
        raise ValueError("tau_depth must be positive")
    background, pixels, alphas, depths = map(as_tensor, (background, pixels, alphas, depths))
    lead, J, C, H, W, bg, X, A, D = _flatten_layers(background, pixels, alphas, depths)
    dt = A.dtype
    s = ((1 - D) / tau_depth)[:, :, None, None]
    # per-pixel log-sum-exp shift; exact since the output is shift invariant.
    # Zero-alpha layers are left out so they cannot push the shift past the background.
    live = A > 0
    with np.errstate(divide="ignore"):
        logw = np.where(live, s + np.log(np.where(live, A, 1)), -np.inf)
    m = np.maximum(logw.max(axis=1, keepdims=True), 0)
    e = np.exp(np.minimum(s - m, 600 if dt == np.float64 else 80))
    w = np.where(live, np.exp(logw - m), 0).astype(dt)
    w_bg = np.exp(-m)[:, 0]
    denom = w.sum(axis=1) + w_bg
    out = ((w[:, :, None] * X).sum(axis=1) + w_bg[:, None] * bg) / denom[:, None]
    out_shaped = out.reshape(lead + (C, H, W))

    def backward(g):
        gc = g.reshape(-1, C, H, W) / denom[:, None]
        gX = w[:, :, None] * gc[:, None]
        gbg = w_bg[:, None] * gc
        gw = (gc[:, None] * (X - out[:, None])).sum(axis=2)
        gA = gw * e
        gD = -(gw * w).sum(axis=(2, 3)) / tau_depth
        return (_unbroadcast(gbg.reshape(lead + (C, H, W)), background.shape),
                gX.reshape(pixels.shape), gA.reshape(alphas.shape),
                _unbroadcast(gD.reshape(lead + (J,)), depths.shape))

    return make_op(out_shaped, (background, pixels, alphas, depths), backward)


def amodal_masks(alphas, threshold: float = SEGMENT_THRESHOLD) -> np.ndarray:
    """Per-object masks of all pixels with placed alpha above ``threshold``."""
    return np.asarray(alphas.data if isinstance(alphas, Tensor) else alphas) > threshold


def modal_segmentation(alphas, depths, threshold: float = SEGMENT_THRESHOLD) -> np.ndarray:
    """Label each pixel with the nearest object whose alpha exceeds ``threshold``.

    ``alphas`` is ``[..., J, N, N]``; labels are 0 for background and ``j + 1``
    for object ``j``. Depth ties go to the higher index, matching the hard
    compositor, which blends the higher index last.
    """
    A = amodal_masks(alphas, threshold)
    D = np.asarray(depths.data if isinstance(depths, Tensor) else depths)
    order = depth_order(D)  # farthest first
    labels = np.zeros(A.shape[:-3] + A.shape[-2:], dtype=np.int64)
    J = A.shape[-3]
    for k in range(J):
        idx = order[..., k]
        mask = np.take_along_axis(A, idx[..., None, None, None], axis=-3)[..., 0, :, :]
        labels = np.where(mask, idx[..., None, None] + 1, labels)
    return labels


def modal_masks(alphas, depths, threshold: float = SEGMENT_THRESHOLD) -> np.ndarray:
    """Boolean visible-extent masks ``[..., J, N, N]`` from :func:`modal_segmentation`."""
    labels = modal_segmentation(alphas, depths, threshold)
    J = np.shape(alphas)[-3] if not isinstance(alphas, Tensor) else alphas.shape[-3]
    return np.stack([labels == j + 1 for j in range(J)], axis=-3)


__all__ = [
    "ObjectCanvas", "PlacedObject", "SEGMENT_THRESHOLD", "SceneAssembly", "amodal_masks",
    "attention_crop", "composite_hard", "composite_soft", "depth_order", "modal_masks",
    "modal_segmentation", "place", "place_object",
]
