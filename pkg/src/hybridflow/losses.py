"""Flow losses (photometric, smoothness, supervised MSE), inverse warping, and AEE.

Image tensors are [H, W] or [N, H, W]; flows are [2, H, W] or [N, 2, H, W]
with channel 0 the horizontal displacement u and channel 1 the vertical v.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class NoValidPixels(ValueError):
    pass


class NoLabeledPixels(ValueError):
    pass


class EmptyMask(ValueError):
    pass


@dataclass
class LossConfig:
    eta: float = 0.001
    r: float = 0.45
    smooth_weight: float = 0.5
    neighborhood: int = 4

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("Charbonnier eta must be positive")
        if not 0 < self.r < 1:
            raise ValueError("Charbonnier exponent must lie in (0, 1)")
        if self.smooth_weight < 0:
            raise ValueError("smoothness weight must be non-negative")
        if self.neighborhood != 4:
            raise ValueError("only the 4-connected neighbourhood is supported")


def charbonnier(x, eta: float = 0.001, r: float = 0.45) -> Tensor:
    """Elementwise (x^2 + eta^2)^r."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    x = ad.as_tensor(x)
    return ad.power(ad.square(x) + eta * eta, r)


def _batched(image, flow):
    image, flow = ad.as_tensor(image), ad.as_tensor(flow)
    squeeze = flow.ndim == 3
    if squeeze:
        flow = ad.reshape(flow, (1,) + flow.shape)
    if image.ndim == 2:
        image = ad.reshape(image, (1,) + image.shape)
    if image.shape[0] != flow.shape[0] or image.shape[1:] != flow.shape[2:] or flow.shape[1] != 2:
        raise ad.ShapeMismatch(f"image {image.shape} and flow {flow.shape} do not match")
    return image, flow, squeeze


def warp(image, flow):
    """Bilinearly sample ``image`` at (x + u, y + v) for every pixel.

    Returns ``(warped, valid)``; ``valid`` is False where the sample point
    leaves the image, and ``warped`` is 0 there. Differentiable in ``flow``.
    """
    image, flow, squeeze = _batched(image, flow)
    img = image.data
    fd = flow.data
    n, h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    sx = xs[None] + fd[:, 0]
    sy = ys[None] + fd[:, 1]
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    sxc = np.clip(sx, 0, w - 1)
    syc = np.clip(sy, 0, h - 1)
    x0 = np.minimum(np.floor(sxc).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(syc).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sxc - x0).astype(img.dtype)
    fy = (syc - y0).astype(img.dtype)
    bi = np.arange(n)[:, None, None]
    i00, i01 = img[bi, y0, x0], img[bi, y0, x1]
    i10, i11 = img[bi, y1, x0], img[bi, y1, x1]
    top = i00 + fx * (i01 - i00)
    bot = i10 + fx * (i11 - i10)
    out = (top + fy * (bot - top)) * valid
    gu = ((1 - fy) * (i01 - i00) + fy * (i11 - i10)) * valid
    gv = (bot - top) * valid

    def bwd(g):
        return None, np.stack([g * gu, g * gv], axis=1)

    warped = ad.record("warp", out.astype(img.dtype), (image, flow), bwd)
    if squeeze:
        warped = ad.reshape(warped, warped.shape[1:])
        valid = valid[0]
    return warped, valid


def photometric_loss(I_t, I_tdt, flow, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean Charbonnier brightness-constancy error over validly warped pixels."""
    I_t = ad.as_tensor(I_t)
    warped, valid = warp(I_tdt, flow)
    if I_t.shape != warped.shape:
        raise ad.ShapeMismatch(f"{I_t.shape} vs {warped.shape}")
    count = int(valid.sum())
    if count == 0:
        raise NoValidPixels("every warped sample left the image")
    rho = charbonnier(I_t - warped, cfg.eta, cfg.r)
    return ad.scale(ad.sum_all(rho * valid.astype(rho.dtype)), 1.0 / count)


def smoothness_loss(flow) -> Tensor:
    """Mean absolute flow difference over 4-connected neighbour pairs."""
    flow = ad.as_tensor(flow)
    if flow.ndim == 3:
        flow = ad.reshape(flow, (1,) + flow.shape)
    n, _, h, w = flow.shape
    terms = n * (h * (w - 1) + (h - 1) * w)
    if terms == 0:
        return Tensor(np.zeros((), flow.dtype))
    fd = flow.data
    dx = fd[:, :, :, 1:] - fd[:, :, :, :-1]
    dy = fd[:, :, 1:, :] - fd[:, :, :-1, :]
    total = (np.abs(dx).sum() + np.abs(dy).sum()) / terms
    sx, sy = np.sign(dx) / terms, np.sign(dy) / terms

    def bwd(g):
        gf = np.zeros_like(fd)
        gf[:, :, :, 1:] += sx
        gf[:, :, :, :-1] -= sx
        gf[:, :, 1:, :] += sy
        gf[:, :, :-1, :] -= sy
        out = g * gf
        return (out,)

    return ad.record("smoothness", np.asarray(total, fd.dtype), (flow,), bwd)


def total_selfsup_loss(I_t, I_tdt, flow, cfg: LossConfig = LossConfig()) -> Tensor:
    loss = photometric_loss(I_t, I_tdt, flow, cfg)
    if cfg.smooth_weight:
        loss = loss + ad.scale(smoothness_loss(flow), cfg.smooth_weight)
    return loss


def supervised_loss(flow_pred, flow_gt) -> Tensor:
    """Mean squared endpoint error over pixels whose ground-truth flow is non-zero."""
    pred = ad.as_tensor(flow_pred)
    gt = np.asarray(flow_gt.data if isinstance(flow_gt, Tensor) else flow_gt)
    if pred.shape != gt.shape:
        raise ad.ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    axis = 0 if gt.ndim == 3 else 1
    labeled = np.any(gt != 0, axis=axis, keepdims=True)
    k = int(labeled.sum())
    if k == 0:
        raise NoLabeledPixels("ground truth is zero everywhere")
    err = ad.square(pred - gt.astype(pred.dtype)) * labeled.astype(pred.dtype)
    return ad.scale(ad.sum_all(err), 1.0 / k)


def aee(flow_pred, flow_gt, event_mask) -> float:
    """Average endpoint error over pixels flagged in ``event_mask``."""
    pred = np.asarray(flow_pred.data if isinstance(flow_pred, Tensor) else flow_pred, np.float64)
    gt = np.asarray(flow_gt, np.float64)
    mask = np.asarray(event_mask, bool)
    if pred.shape != gt.shape:
        raise ad.ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    axis = 0 if gt.ndim == 3 else 1
    if mask.shape != gt.shape[:axis] + gt.shape[axis + 1 :]:
        raise ad.ShapeMismatch(f"mask {mask.shape} does not match flow {gt.shape}")
    if not mask.any():
        raise EmptyMask("no pixels with events")
    epe = np.sqrt(((pred - gt) ** 2).sum(axis=axis))
    return float(epe[mask].mean())
