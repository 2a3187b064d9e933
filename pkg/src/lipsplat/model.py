"""The conditional deformation pipeline for one frame.

Spatial features ``F_c`` come from a tri-plane over canonical Gaussian
centers. The audio branch compresses raw feature windows; the point branch
encodes (predicted) lip clouds per frame, differences consecutive frames and
compresses the difference rows. Both conditions are gated per Gaussian,
fused AdaIN-style and decoded into ``(dx, dr, ds)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditions import Audio2PointNet, DifferenceEncoder, PointEncoder
from .deformation import DeformationDecoder
from .enhancement import Enhancer, TemporalCompressor, contrastive_loss
from .errors import InvalidArgumentError
from .hashgrid import HashGrid, TriPlane


@dataclass
class ModelConfig:
    cond_dim: int = 32
    window: int = 4
    window_decay: float = 2.0  # initial attention bias -decay*|offset|
    hidden: int = 64
    tau: float = 0.07
    include_positive: bool = False
    max_offset_frac: float = 0.1  # dx bound as a fraction of the scene extent
    point_encoder: str = "hashgrid"  # or "triplane"
    point_levels: int = 8
    point_features: int = 4
    point_log2_table: int = 14
    point_base_res: int = 4
    point_growth: float = 1.45
    plane_levels: int = 12
    plane_features: int = 2
    plane_log2_table: int = 17
    plane_base_res: int = 8
    plane_growth: float = 1.287
    a2p_hidden: int = 32
    lip_box_margin: float = 0.35  # world units added around the lip template


def _merge(dst: dict, src: dict) -> dict:
    for k, v in src.items():
        if k in dst:
            dst[k] = dst[k] + v
        else:
            dst[k] = v
    return dst


@dataclass
class FrameCache:
    t: int
    seg: tuple | None
    ti: int
    flo: int
    rlo: int
    r0: int
    cc: object
    ca: object
    cp: object
    cd: object
    cpp: object
    ce: object
    cdec: object
    pf_shape: tuple
    n_diff_frames: int
    cl: tuple | None


@dataclass
class FrameOutput:
    delta: tuple  # (dx, dr, ds)
    a_t: np.ndarray
    p_t: np.ndarray
    loss_cl: float | None
    cache: FrameCache


class TalkingHead:
    def __init__(self, cfg: ModelConfig, scene_bbox, extent: float, n_audio: int,
                 template: np.ndarray, lip_index: np.ndarray, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.cond_dim
        self.plane = TriPlane(cfg.plane_levels, cfg.plane_features, cfg.plane_log2_table, cfg.plane_base_res,
                              cfg.plane_growth, bbox=scene_bbox, rng=rng, name="spatial")
        lips = np.asarray(template)[lip_index]
        lip_box = (lips.min(0) - cfg.lip_box_margin, lips.max(0) + cfg.lip_box_margin)
        if cfg.point_encoder == "hashgrid":
            grid = HashGrid(3, cfg.point_levels, cfg.point_features, cfg.point_log2_table, cfg.point_base_res,
                            cfg.point_growth, bbox=lip_box, rng=rng, name="pointgrid")
        elif cfg.point_encoder == "triplane":
            grid = TriPlane(cfg.point_levels, cfg.point_features, cfg.point_log2_table, cfg.point_base_res,
                            cfg.point_growth, bbox=lip_box, rng=rng, name="pointgrid")
        else:
            raise InvalidArgumentError(f"unknown point encoder '{cfg.point_encoder}'")
        self.point_enc = PointEncoder(grid, c, rng)
        self.dde = DifferenceEncoder(c, rng)
        self.comp_a = TemporalCompressor("comp_a", n_audio, c, cfg.window, rng, cfg.window_decay)
        self.comp_p = TemporalCompressor("comp_p", c, c, cfg.window, rng, cfg.window_decay)
        fdim = self.plane.out_dim
        self.enh = Enhancer(fdim, c, rng, cfg.hidden)
        self.dec = DeformationDecoder(fdim, c, rng, max_offset=cfg.max_offset_frac * extent, hidden=cfg.hidden)
        self.a2p = Audio2PointNet(n_audio, template, lip_index, rng, hidden=cfg.a2p_hidden)

    def register(self, store, with_a2p: bool = False):
        """Groups: ``grid`` for encoder tables, ``net`` for networks, ``a2p``."""
        self.plane.register(store, "grid")
        self.point_enc.register(store, "net", "grid")
        for m in (self.dde, self.comp_a, self.comp_p, self.enh, self.dec):
            m.register(store, "net")
        if with_a2p:
            self.a2p.register(store, "a2p")
        return store

    @property
    def params(self) -> dict:
        out = {}
        for m in (self.plane, self.point_enc, self.dde, self.comp_a, self.comp_p, self.enh, self.dec, self.a2p):
            out.update(m.params)
        return out

    # ------------------------------------------------------------ forward

    def forward_frame(self, means, audio, points, t: int, seg: tuple | None = None) -> FrameOutput:
        """Deformation for frame ``t`` of a sequence of length ``T``.

        ``audio`` (T, F_a) and ``points`` (T, N_p, 3) describe the visible
        sequence; ``seg = (start, length)`` additionally evaluates the
        contrastive loss over that frame range, which must contain ``t``.
        """
        T = audio.shape[0]
        if T < 2 or points.shape[0] != T:
            raise InvalidArgumentError("need an aligned sequence of at least two frames")
        if not 0 <= t < T:
            raise InvalidArgumentError(f"frame {t} outside [0, {T})")
        W = self.cfg.window
        if seg is not None:
            s, L = seg
            if not (0 <= s and s + L <= T and s <= t < s + L and L >= 2):
                raise InvalidArgumentError("contrastive segment must lie in the sequence and contain t")
            a_frames = np.arange(s, s + L)
        else:
            a_frames = np.array([t])
        ti = int(t - a_frames[0])
        # rows of the difference encoding needed by the point window of frame t
        r0 = max(t - 1, 0)
        rlo, rhi = max(r0 - W, 0), min(r0 + W, T - 2)
        flo, fhi = rlo, rhi + 1
        if seg is not None:
            flo, fhi = min(flo, s), max(fhi, s + L - 1)
        alo, ahi = max(int(a_frames[0]) - W, 0), min(int(a_frames[-1]) + W, T - 1)

        Fc, cc = self.plane.forward(means)
        a_rows, ca = self.comp_a.forward(audio[alo:ahi + 1], frames=a_frames, T=T, offset=alo)
        pf, cp = self.point_enc.forward(points[flo:fhi + 1])
        D, cd = self.dde.forward(pf[rlo - flo:rhi + 2 - flo])
        p_row, cpp = self.comp_p.forward(D, frames=[r0], T=T - 1, offset=rlo)
        a_t, p_t = a_rows[ti], p_row[0]
        Fa, Fp, ce = self.enh.forward(Fc, a_t, p_t)
        delta, cdec = self.dec.forward(Fc, Fa, Fp)
        loss_cl, cl = None, None
        if seg is not None:
            loss_cl, gA, gP = contrastive_loss(a_rows, pf[s - flo:s - flo + L], self.cfg.tau,
                                               self.cfg.include_positive, with_grad=True)
            cl = (s - flo, L, gA, gP)
        cache = FrameCache(t, seg, ti, flo, rlo, r0, cc, ca, cp, cd, cpp, ce, cdec, pf.shape,
                           rhi + 2 - rlo, cl)
        return FrameOutput(delta, a_t, p_t, loss_cl, cache)

    def backward_frame(self, cache: FrameCache, gdx, gdr, gds, w_cl: float = 0.0,
                       means_grad: bool = True, points_grad: bool = True):
        """Returns ``(grads, grad_means, grad_points)`` where ``grad_points``
        is relative to the point rows ``cache.flo ..``. Either input
        gradient is None when not requested."""
        grads, gFc, gFa, gFp = self.dec.backward(cache.cdec, gdx, gdr, gds)
        g, gFc2, ga_t, gp_t = self.enh.backward(cache.ce, gFa, gFp)
        _merge(grads, g)
        gFc = gFc + gFc2
        g, gD = self.comp_p.backward(cache.cpp, gp_t[None])
        _merge(grads, g)
        g, gpf_part = self.dde.backward(cache.cd, gD)
        _merge(grads, g)
        gpf = np.zeros(cache.pf_shape)
        off = cache.rlo - cache.flo
        gpf[off:off + cache.n_diff_frames] += gpf_part
        n_a = cache.seg[1] if cache.seg is not None else 1
        ga_rows = np.zeros((n_a, len(ga_t)))
        ga_rows[cache.ti] += ga_t
        if cache.cl is not None:
            so, L, gA, gP = cache.cl
            ga_rows += w_cl * gA
            gpf[so:so + L] += w_cl * gP
        g, _ = self.comp_a.backward(cache.ca, ga_rows)
        _merge(grads, g)
        g, gpts = self.point_enc.backward(cache.cp, gpf, points_grad)
        _merge(grads, g)
        g, gmeans = self.plane.backward(cache.cc, gFc, means_grad)
        _merge(grads, g)
        return grads, gmeans, gpts

    def contrastive(self, audio, points):
        """L_CL between all compressed audio rows and per-frame point
        features of a short sequence, for alignment-only supervision."""
        a_rows, ca = self.comp_a.forward(audio)
        pf, cp = self.point_enc.forward(points)
        loss, gA, gP = contrastive_loss(a_rows, pf, self.cfg.tau, self.cfg.include_positive, with_grad=True)
        return loss, (ca, cp, gA, gP)

    def contrastive_backward(self, cache, w: float = 1.0) -> dict:
        ca, cp, gA, gP = cache
        grads, _ = self.comp_a.backward(ca, w * gA)
        g, _ = self.point_enc.backward(cp, w * gP, False)
        return _merge(grads, g)

    # ------------------------------------------------------------ sequences

    def audio_rows(self, audio, frames=None):
        return self.comp_a.forward(audio, frames)[0]

    def point_rows(self, points):
        return self.point_enc.forward(points)[0]

    def deltas(self, means, audio, points, frames):
        """Deformations for a list of frames, no gradients."""
        return [self.forward_frame(means, audio, points, int(t)).delta for t in frames]
