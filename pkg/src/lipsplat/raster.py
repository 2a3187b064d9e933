"""Deterministic tile-based Gaussian splatting, forward and backward.

Pixel centers sit at integer + 0.5 in the pixel coordinates produced by
:func:`lipsplat.geometry.project`. A splat contributes to a pixel only when
its Mahalanobis distance there is at most 3 (exponent >= -4.5); the same
rule holds in the tiled kernel and in :func:`composite_brute_force`, so tile
binning is a pure acceleration. Splats are globally sorted by view depth,
ties by index, and composited front to back:

    C(p) = sum_i c_i a_i prod_{j<i} (1 - a_j) + T_final * background

with ``a_i = min(alpha_max, opacity_i * G_i(p))``. A pixel stops once its
transmittance falls below ``t_min`` (the splat that crossed the threshold is
still included).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from .errors import StateError
from .geometry import Camera, covariances, covariances_backward, project, project_backward
from .nn import sigmoid

CUTOFF = 4.5


@dataclass
class RasterSettings:
    tile: int = 16
    alpha_max: float = 0.99
    t_min: float = 1e-4
    background: tuple = (0.0, 0.0, 0.0)
    # fixed partition of tiles for the backward reduction; gradients are
    # bitwise reproducible for a given value regardless of thread count
    n_chunks: int = 1


@dataclass
class FrameBuffer:
    color: np.ndarray  # (H, W, 3)
    transmittance: np.ndarray  # (H, W)
    n_contrib: np.ndarray  # (H, W) int


@dataclass
class Splats:
    """Screen-space splat parameters ready for compositing."""

    means2d: np.ndarray  # (N, 2)
    conic: np.ndarray  # (N, 3) inverse screen covariance (A, B, C)
    opacity: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3) clamped
    depth: np.ndarray  # (N,)
    radius: np.ndarray  # (N,) 3 sigma of the major axis, 0 when culled


@dataclass
class RasterCache:
    cam: Camera
    settings: RasterSettings
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logit: np.ndarray
    colors_raw: np.ndarray
    covs: np.ndarray
    proj: object
    splats: Splats
    tile_ptr: np.ndarray
    tile_ids: np.ndarray
    stop: np.ndarray
    t_final: np.ndarray
    extra: dict = field(default_factory=dict)


def _conic_and_radius(cov2d, valid):
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    det = np.where(valid & (det > 0), det, 1.0)
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam) * (1 + 1e-6) + 1e-6
    return conic, np.where(valid, radius, 0.0)


def make_splats(means, quats, log_scales, opacity_logit, colors, cam: Camera):
    covs = covariances(quats, np.exp(log_scales))
    proj = project(means, covs, cam)
    conic, radius = _conic_and_radius(proj.cov2d, proj.valid)
    spl = Splats(proj.means2d, conic, sigmoid(opacity_logit), np.clip(colors, 0.0, 1.0),
                 proj.depth, radius)
    return spl, covs, proj


def depth_order(depth: np.ndarray) -> np.ndarray:
    """Canonical front-to-back order: by depth, ties by index."""
    return np.lexsort((np.arange(len(depth)), depth))


def bin_tiles(spl: Splats, width: int, height: int, tile: int):
    """CSR tile lists of splat indices, depth-sorted within each tile."""
    tx, ty = -(-width // tile), -(-height // tile)
    order = depth_order(spl.depth)
    order = order[spl.radius[order] > 0]
    m, r = spl.means2d[order], spl.radius[order]
    x0 = np.clip(np.floor((m[:, 0] - r) / tile), 0, tx).astype(np.int64)
    x1 = np.clip(np.floor((m[:, 0] + r) / tile) + 1, 0, tx).astype(np.int64)
    y0 = np.clip(np.floor((m[:, 1] - r) / tile), 0, ty).astype(np.int64)
    y1 = np.clip(np.floor((m[:, 1] + r) / tile) + 1, 0, ty).astype(np.int64)
    nx, ny = np.maximum(x1 - x0, 0), np.maximum(y1 - y0, 0)
    cnt = nx * ny
    rep = np.repeat(np.arange(len(order)), cnt)
    start = np.cumsum(cnt) - cnt
    k = np.arange(cnt.sum()) - np.repeat(start, cnt)
    kx = k % np.repeat(np.maximum(nx, 1), cnt)
    ky = k // np.repeat(np.maximum(nx, 1), cnt)
    tile_of = (y0[rep] + ky) * tx + (x0[rep] + kx)
    srt = np.argsort(tile_of, kind="stable")
    ids = order[rep[srt]].astype(np.int64)
    ptr = np.zeros(tx * ty + 1, dtype=np.int64)
    np.add.at(ptr, tile_of + 1, 1)
    return np.cumsum(ptr), ids


@njit(cache=True, parallel=True)
def _forward_kernel(means2d, conic, opac, colors, tile_ptr, tile_ids, width, height, tile,
                    alpha_max, t_min, bg, img, t_final, n_contrib, stop):
    tx = (width + tile - 1) // tile
    ntiles = tile_ptr.shape[0] - 1
    for t in prange(ntiles):
        ox = (t % tx) * tile
        oy = (t // tx) * tile
        s0 = tile_ptr[t]
        s1 = tile_ptr[t + 1]
        for py in range(oy, min(oy + tile, height)):
            for px in range(ox, min(ox + tile, width)):
                fx = px + 0.5
                fy = py + 0.5
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                cnt = 0
                k = s0
                while k < s1:
                    g = tile_ids[k]
                    k += 1
                    dx = fx - means2d[g, 0]
                    dy = fy - means2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power < -4.5:
                        continue
                    a = opac[g] * math.exp(power)
                    if a > alpha_max:
                        a = alpha_max
                    w = a * T
                    c0 += colors[g, 0] * w
                    c1 += colors[g, 1] * w
                    c2 += colors[g, 2] * w
                    T = T * (1.0 - a)
                    cnt += 1
                    if T < t_min:
                        break
                img[py, px, 0] = c0 + T * bg[0]
                img[py, px, 1] = c1 + T * bg[1]
                img[py, px, 2] = c2 + T * bg[2]
                t_final[py, px] = T
                n_contrib[py, px] = cnt
                stop[py, px] = k - s0


@njit(cache=True, parallel=True)
def _backward_kernel(means2d, conic, opac, colors, tile_ptr, tile_ids, width, height, tile,
                     alpha_max, bg, stop, t_final, grad_img, n_chunks, buf):
    # buf: (n_chunks, N, 9) -> mean2d(2), conic(3), opacity(1), color(3)
    tx = (width + tile - 1) // tile
    ntiles = tile_ptr.shape[0] - 1
    per = (ntiles + n_chunks - 1) // n_chunks
    maxlen = 0
    for t in range(ntiles):
        if tile_ptr[t + 1] - tile_ptr[t] > maxlen:
            maxlen = tile_ptr[t + 1] - tile_ptr[t]
    for ch in prange(n_chunks):
        ids = np.empty(maxlen, dtype=np.int64)
        al = np.empty(maxlen)
        tb = np.empty(maxlen)
        gv = np.empty(maxlen)
        dxs = np.empty(maxlen)
        dys = np.empty(maxlen)
        clamped = np.empty(maxlen, dtype=np.bool_)
        for t in range(ch * per, min((ch + 1) * per, ntiles)):
            ox = (t % tx) * tile
            oy = (t // tx) * tile
            s0 = tile_ptr[t]
            for py in range(oy, min(oy + tile, height)):
                for px in range(ox, min(ox + tile, width)):
                    g0 = grad_img[py, px, 0]
                    g1 = grad_img[py, px, 1]
                    g2 = grad_img[py, px, 2]
                    if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                        continue
                    fx = px + 0.5
                    fy = py + 0.5
                    # replay the forward walk
                    n = 0
                    T = 1.0
                    for k in range(s0, s0 + stop[py, px]):
                        g = tile_ids[k]
                        dx = fx - means2d[g, 0]
                        dy = fy - means2d[g, 1]
                        power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                        if power < -4.5:
                            continue
                        G = math.exp(power)
                        a = opac[g] * G
                        cl = a > alpha_max
                        if cl:
                            a = alpha_max
                        ids[n] = g
                        al[n] = a
                        tb[n] = T
                        gv[n] = G
                        dxs[n] = dx
                        dys[n] = dy
                        clamped[n] = cl
                        n += 1
                        T = T * (1.0 - a)
                    S = (g0 * bg[0] + g1 * bg[1] + g2 * bg[2]) * t_final[py, px]
                    for i in range(n - 1, -1, -1):
                        g = ids[i]
                        a = al[i]
                        Ti = tb[i]
                        w = a * Ti
                        buf[ch, g, 6] += g0 * w
                        buf[ch, g, 7] += g1 * w
                        buf[ch, g, 8] += g2 * w
                        gc = g0 * colors[g, 0] + g1 * colors[g, 1] + g2 * colors[g, 2]
                        dA = Ti * gc - S / (1.0 - a)
                        S += gc * w
                        if clamped[i]:
                            continue
                        buf[ch, g, 5] += dA * gv[i]
                        dp = dA * a
                        dx = dxs[i]
                        dy = dys[i]
                        buf[ch, g, 0] += dp * (conic[g, 0] * dx + conic[g, 1] * dy)
                        buf[ch, g, 1] += dp * (conic[g, 2] * dy + conic[g, 1] * dx)
                        buf[ch, g, 2] += dp * (-0.5 * dx * dx)
                        buf[ch, g, 3] += dp * (-dx * dy)
                        buf[ch, g, 4] += dp * (-0.5 * dy * dy)


def composite(spl: Splats, width: int, height: int, settings: RasterSettings):
    tile_ptr, tile_ids = bin_tiles(spl, width, height, settings.tile)
    img = np.empty((height, width, 3))
    t_final = np.empty((height, width))
    n_contrib = np.empty((height, width), dtype=np.int32)
    stop = np.empty((height, width), dtype=np.int64)
    _forward_kernel(spl.means2d, spl.conic, spl.opacity, spl.colors, tile_ptr, tile_ids,
                    width, height, settings.tile, settings.alpha_max, settings.t_min,
                    np.asarray(settings.background, dtype=np.float64), img, t_final, n_contrib, stop)
    return FrameBuffer(img, t_final, n_contrib), tile_ptr, tile_ids, stop


def composite_brute_force(spl: Splats, width: int, height: int, settings: RasterSettings):
    """Per-pixel reference compositor over all splats, no tiling.

    Plain Python scalar arithmetic; slow, for verification only.
    """
    order = [int(i) for i in depth_order(spl.depth) if spl.radius[i] > 0]
    bg = [float(b) for b in settings.background]
    img = np.empty((height, width, 3))
    tf = np.empty((height, width))
    m = spl.means2d.tolist()
    q = spl.conic.tolist()
    op = spl.opacity.tolist()
    col = spl.colors.tolist()
    for py in range(height):
        for px in range(width):
            fx, fy = px + 0.5, py + 0.5
            T = 1.0
            c = [0.0, 0.0, 0.0]
            for g in order:
                dx = fx - m[g][0]
                dy = fy - m[g][1]
                power = -0.5 * (q[g][0] * dx * dx + q[g][2] * dy * dy) - q[g][1] * dx * dy
                if power < -CUTOFF:
                    continue
                a = min(op[g] * math.exp(power), settings.alpha_max)
                w = a * T
                for ch in range(3):
                    c[ch] += col[g][ch] * w
                T = T * (1.0 - a)
                if T < settings.t_min:
                    break
            for ch in range(3):
                img[py, px, ch] = c[ch] + T * bg[ch]
            tf[py, px] = T
    return img, tf


def rasterize(gs, cam: Camera, settings: RasterSettings | None = None, delta=None):
    """Render a Gaussian set, optionally deformed by ``delta = (dx, dr, ds)``.

    ``dx`` is added to centers, ``dr`` to raw quaternions and ``ds`` to
    log-scales. Returns ``(FrameBuffer, RasterCache)``.
    """
    settings = settings or RasterSettings()
    means, quats, log_scales = gs.means, gs.quats, gs.log_scales
    if delta is not None:
        dx, dr, ds = delta
        means, quats, log_scales = means + dx, quats + dr, log_scales + ds
    spl, covs, proj = make_splats(means, quats, log_scales, gs.opacity_logit, gs.colors, cam)
    fb, ptr, ids, stop = composite(spl, cam.width, cam.height, settings)
    cache = RasterCache(cam, settings, means, quats, log_scales, gs.opacity_logit, gs.colors,
                        covs, proj, spl, ptr, ids, stop, fb.transmittance)
    return fb, cache


def rasterize_backward(cache: RasterCache | None, grad_color: np.ndarray) -> dict:
    """Gradients of a scalar loss given dL/d(image).

    Keys: ``means``, ``quats``, ``log_scales``, ``opacity_logit``, ``colors``
    (gradients at the rendered, i.e. deformed, parameters; these are also the
    gradients w.r.t. the deformation offsets) and ``means2d`` (screen-space).
    """
    if cache is None:
        raise StateError("rasterize_backward called without a forward cache")
    s, spl, cam = cache.settings, cache.splats, cache.cam
    n = len(spl.opacity)
    buf = np.zeros((s.n_chunks, n, 9))
    grad_color = np.ascontiguousarray(grad_color, dtype=np.float64)
    _backward_kernel(spl.means2d, spl.conic, spl.opacity, spl.colors, cache.tile_ptr,
                     cache.tile_ids, cam.width, cam.height, s.tile, s.alpha_max,
                     np.asarray(s.background, dtype=np.float64), cache.stop, cache.t_final,
                     grad_color, s.n_chunks, buf)
    acc = buf[0].copy()
    for c in range(1, s.n_chunks):
        acc += buf[c]
    g_m2d = acc[:, 0:2]
    gA, gB, gC = acc[:, 2], acc[:, 3], acc[:, 4]
    # conic -> screen covariance: dL/dS = -Q G Q, G full symmetric
    Q = np.empty((n, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = spl.conic[:, 0], spl.conic[:, 1], spl.conic[:, 1], spl.conic[:, 2]
    Gq = np.empty((n, 2, 2))
    Gq[:, 0, 0], Gq[:, 0, 1], Gq[:, 1, 0], Gq[:, 1, 1] = gA, 0.5 * gB, 0.5 * gB, gC
    g_cov2d = -Q @ Gq @ Q
    g_means, g_covs = project_backward(cache.proj, cache.covs, cam, g_m2d, g_cov2d)
    scales = np.exp(cache.log_scales)
    g_quats, g_scales = covariances_backward(cache.quats, scales, g_covs)
    op = spl.opacity
    inside = (cache.colors_raw >= 0.0) & (cache.colors_raw <= 1.0)
    return {
        "means": g_means,
        "quats": g_quats,
        "log_scales": g_scales * scales,
        "opacity_logit": acc[:, 5] * op * (1 - op),
        "colors": acc[:, 6:9] * inside,
        "means2d": g_m2d,
    }


def set_threads(n: int) -> None:
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
