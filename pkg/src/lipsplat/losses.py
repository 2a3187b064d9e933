"""Image losses with analytic gradients: L1, D-SSIM, patch pyramid proxy."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InvalidArgumentError, ShapeError

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_pair(img, ref):
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ShapeError(f"image shapes differ: {img.shape} vs {ref.shape}")
    return img, ref


def loss_l1(img, ref, with_grad=False):
    img, ref = _check_pair(img, ref)
    d = img - ref
    val = float(np.abs(d).mean())
    if with_grad:
        return val, np.sign(d) / d.size
    return val


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filt(a, win):
    # separable "same" filtering with zero padding over the two spatial axes
    a = correlate1d(a, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(a, win, axis=1, mode="constant", cval=0.0)


def ssim_map(img, ref, size: int = 11, sigma: float = 1.5):
    """Per-pixel, per-channel SSIM map plus intermediates for the backward."""
    img, ref = _check_pair(img, ref)
    if img.ndim == 2:
        img, ref = img[..., None], ref[..., None]
    if img.shape[0] < size or img.shape[1] < size:
        raise InvalidArgumentError(f"image {img.shape[:2]} smaller than the {size}x{size} window")
    win = gaussian_window(size, sigma)
    mx, my = _filt(img, win), _filt(ref, win)
    sxx = _filt(img * img, win) - mx * mx
    syy = _filt(ref * ref, win) - my * my
    sxy = _filt(img * ref, win) - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    S = (a1 * a2) / (b1 * b2)
    return S, (img, ref, win, mx, my, a1, a2, b1, b2)


def ssim(img, ref) -> float:
    return float(ssim_map(img, ref)[0].mean())


def loss_dssim(img, ref, with_grad=False):
    """(1 - SSIM) / 2 with an 11x11 Gaussian window (sigma 1.5)."""
    S, (x, y, win, mx, my, a1, a2, b1, b2) = ssim_map(img, ref)
    val = float((1.0 - S.mean()) / 2.0)
    if not with_grad:
        return val
    gS = -0.5 / S.size
    dmx = gS * (2 * my * a2 / (b1 * b2) - S * 2 * mx / b1)
    dsxx = gS * (-S / b2)
    dsxy = gS * (2 * a1 / (b1 * b2))
    # sxx = E[x^2] - mx^2, sxy = E[xy] - mx my
    dmx_tot = dmx - 2 * mx * dsxx - my * dsxy
    grad = _filt(dmx_tot, win) + 2 * x * _filt(dsxx, win) + y * _filt(dsxy, win)
    return val, grad.reshape(np.shape(img))


def _pool2(a):
    h, w = a.shape[0] // 2, a.shape[1] // 2
    return a[:2 * h, :2 * w].reshape(h, 2, w, 2, *a.shape[2:]).mean(axis=(1, 3))


def _unpool2(g, shape):
    out = np.zeros(shape)
    h, w = g.shape[0], g.shape[1]
    up = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) / 4.0
    out[:2 * h, :2 * w] = up
    return out


def sample_patches(rng: np.random.Generator, height: int, width: int, size: int, count: int):
    if size > height or size > width:
        raise InvalidArgumentError("patch larger than image")
    ys = rng.integers(0, height - size + 1, size=count)
    xs = rng.integers(0, width - size + 1, size=count)
    return [(int(y), int(x), size) for y, x in zip(ys, xs)]


def loss_perceptual_proxy(img, ref, patches, levels: int = 3, with_grad=False):
    """Mean over patches and pyramid levels of the L1 between mean-pooled
    pyramids. A non-learned stand-in for a perceptual patch loss."""
    img, ref = _check_pair(img, ref)
    H, W = img.shape[:2]
    grad = np.zeros_like(img) if with_grad else None
    total = 0.0
    if not patches:
        return (0.0, grad) if with_grad else 0.0
    scale = 1.0 / (len(patches) * levels)
    for (y, x, s) in patches:
        if y < 0 or x < 0 or y + s > H or x + s > W:
            raise InvalidArgumentError(f"patch ({y}, {x}, {s}) out of bounds")
        a, b = img[y:y + s, x:x + s], ref[y:y + s, x:x + s]
        pa, pb = [a], [b]
        for _ in range(levels - 1):
            pa.append(_pool2(pa[-1]))
            pb.append(_pool2(pb[-1]))
        for lv in range(levels):
            d = pa[lv] - pb[lv]
            total += np.abs(d).mean() * scale
        if with_grad:
            g = np.zeros_like(a)
            for lv in reversed(range(levels)):
                d = pa[lv] - pb[lv]
                gl = np.sign(d) / d.size * scale
                # bring level-lv gradient up to full patch resolution
                for shp in reversed([p.shape for p in pa[:lv]]):
                    gl = _unpool2(gl, shp)
                g += gl
            grad[y:y + s, x:x + s] += g
    total = float(total)
    return (total, grad) if with_grad else total
