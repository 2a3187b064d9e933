"""Module-by-module finite-difference checks of every hand-written backward.

Each check builds a small random instance, contracts the module output with
a random cotangent and compares the analytic gradient against central
differences. Steps are chosen per input: linear inputs (tables) take a large
step that only cuts roundoff, piecewise-smooth ones a small step that stays
inside one smooth piece.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .conditions import Audio2PointNet, CausalConv1d, DifferenceEncoder, PointEncoder
from .deformation import DeformationDecoder, apply_deformation
from .enhancement import Enhancer, TemporalCompressor, contrastive_loss
from .gaussians import GaussianSet
from .geometry import Camera, covariances, covariances_backward, look_at, project, project_backward
from .hashgrid import HashGrid, TriPlane
from .losses import loss_dssim, loss_l1, loss_perceptual_proxy
from .model import ModelConfig, TalkingHead
from .nn import DenseNet, GradcheckReport, gradcheck, logit
from .raster import rasterize, rasterize_backward

GRAD_TOL = 1e-5
RASTER_TOL = 1e-3
BOX = (-np.ones(3), np.ones(3))


@dataclass
class CheckResult:
    module: str
    max_rel_err: float
    tol: float
    worst: str
    n_checked: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _worst(reports: list[GradcheckReport]) -> GradcheckReport:
    r = max(reports, key=lambda r: r.max_rel_err)
    r.n_checked = sum(x.n_checked for x in reports)
    return r


def _dot(a, b) -> float:
    return float((a * b).sum())


def _smooth_scene(rng, n):
    # wide splats on a small image, so every pixel sees every splat and no
    # pixel sits near the cutoff or the transmittance stop
    gs = GaussianSet(
        means=rng.normal(scale=0.1, size=(n, 3)) + [0.0, 0.0, 4.0],
        quats=rng.normal(size=(n, 4)),
        log_scales=np.log(rng.uniform(0.8, 1.2, size=(n, 3))),
        opacity_logit=logit(rng.uniform(0.1, 0.4, size=n)),
        colors=rng.uniform(0.05, 0.95, size=(n, 3)),
        marker=np.zeros(n, dtype=bool),
    )
    cam = Camera(np.eye(3), np.zeros(3), 30.0, 30.0, 5.5, 5.5, 10, 10)
    return gs, cam


# ------------------------------------------------------------------ checks

def check_nn(rng):
    net = DenseNet("n", [5, 7, 6, 3], ["relu", "tanh", "sigmoid"], rng)
    x = rng.normal(size=(6, 5))
    W = rng.normal(size=(6, 3))
    _, c = net.forward(x)
    g, gx = net.backward(c, W)
    return gradcheck(lambda: _dot(net(x), W), {"x": x, **net.params}, {"x": gx, **g})


def check_geometry(rng):
    q, s = rng.normal(size=(4, 4)), rng.uniform(0.3, 2.0, size=(4, 3))
    W = rng.normal(size=(4, 3, 3))
    gq, gs = covariances_backward(q, s, W)
    r1 = gradcheck(lambda: _dot(covariances(q, s), W), {"q": q, "s": s}, {"q": gq, "s": gs})
    eye = rng.normal(size=3)
    R, t = look_at(4 * eye / np.linalg.norm(eye), np.zeros(3))
    cam = Camera(R, t, 32.0, 28.0, 16.3, 11.3, 32, 24)
    means = rng.normal(scale=0.5, size=(5, 3))
    covs = covariances(rng.normal(size=(5, 4)), rng.uniform(0.05, 0.3, (5, 3)))
    Wm, Wc = rng.normal(size=(5, 2)), rng.normal(size=(5, 2, 2))
    gm, gc = project_backward(project(means, covs, cam), covs, cam, Wm, Wc)

    def f():
        p = project(means, covs, cam)
        return _dot(p.means2d, Wm) + _dot(p.cov2d, Wc)

    return _worst([r1, gradcheck(f, {"m": means, "c": covs}, {"m": gm, "c": gc})])


def check_hashgrid(rng):
    g = HashGrid(3, 4, 2, 8, 3, 1.6, bbox=BOX, rng=rng)
    g.table[:] = rng.normal(size=g.table.shape)
    q = rng.uniform(-0.9, 0.9, size=(6, 3))
    W = rng.normal(size=(6, g.out_dim))
    _, cache = g.forward(q)
    tg, qg = g.backward(cache, W)
    f = lambda: _dot(g.encode(q), W)
    # tables enter linearly, queries multilinearly within a cell
    return _worst([gradcheck(f, {"table": g.table}, {"table": tg}, h=1e-2),
                   gradcheck(f, {"q": q}, {"q": qg}, h=1e-7)])


def check_triplane(rng):
    tp = TriPlane(3, 2, 10, 4, 1.5, bbox=BOX, rng=rng)
    for p in tp.planes:
        p.table[:] = rng.normal(size=p.table.shape)
    x = rng.uniform(-0.9, 0.9, (5, 3))
    W = rng.normal(size=(5, tp.out_dim))
    _, caches = tp.forward(x)
    grads, qg = tp.backward(caches, W)
    f = lambda: _dot(tp.encode(x), W)
    return _worst([gradcheck(f, tp.params, grads, h=1e-2), gradcheck(f, {"x": x}, {"x": qg}, h=1e-7)])


def check_raster_delta(rng):
    gs, cam = _smooth_scene(rng, 4)
    delta = tuple(rng.normal(scale=0.02, size=(4, k)) for k in (3, 4, 3))
    W = rng.normal(size=(10, 10, 3))
    _, cache = rasterize(gs, cam, delta=delta)
    g = rasterize_backward(cache, W)
    dx, dr, ds = delta
    return gradcheck(lambda: _dot(rasterize(gs, cam, delta=delta)[0].color, W), {"dx": dx, "dr": dr, "ds": ds},
                     {"dx": g["means"], "dr": g["quats"], "ds": g["log_scales"]})


def check_raster_chain(rng):
    gs, cam = _smooth_scene(rng, 8)
    W = rng.normal(size=(10, 10, 3))
    _, cache = rasterize(gs, cam)
    g = rasterize_backward(cache, W)
    params = {k: getattr(gs, k) for k in ("means", "quats", "log_scales", "opacity_logit", "colors")}
    return gradcheck(lambda: _dot(rasterize(gs, cam)[0].color, W), params, g, h=1e-4)


def check_losses(rng):
    x = rng.uniform(0.1, 0.9, size=(16, 16, 3))
    # one-signed differences on aligned 4x4 blocks keep pooled differences off the |.| kink
    sign = np.kron(rng.choice([-1.0, 1.0], size=(4, 4, 3)), np.ones((4, 4, 1)))
    y = x + sign * rng.uniform(0.02, 0.1, size=x.shape)
    patches = [(0, 0, 8), (4, 8, 8), (8, 4, 8)]
    out = []
    for fn, h in ((lambda: loss_dssim(x, y, with_grad=True), 1e-5),
                  (lambda: loss_perceptual_proxy(x, y, patches, 3, with_grad=True), 1e-4),
                  (lambda: loss_l1(x, y, with_grad=True), 1e-4)):
        out.append(gradcheck(lambda: fn()[0], {"x": x}, {"x": fn()[1]}, h=h))
    return _worst(out)


def check_conditions(rng):
    out = []
    template = rng.normal(size=(12, 3))
    net = Audio2PointNet(4, template, np.arange(2, 12, 2), rng, hidden=8, embed=8)
    for v in net.params.values():
        v[:] = 0.3 * rng.normal(size=v.shape)
    a = rng.normal(size=(12, 4))
    W = rng.normal(size=(12, 12, 3))
    _, c = net.forward(a)
    out.append(gradcheck(lambda: _dot(net.forward(a)[0], W), net.params, net.backward(c, W), max_per_param=20))
    conv = CausalConv1d("c", 3, 2, 3, 2, rng)
    x = rng.normal(size=(9, 3))
    Wc = rng.normal(size=(9, 2))
    g, gx = conv.backward(x, Wc)
    out.append(gradcheck(lambda: _dot(conv.forward(x), Wc), {"x": x, **conv.params}, {"x": gx, **g}))
    grid = HashGrid(3, 3, 2, 10, 3, 1.8, bbox=BOX, rng=rng)
    grid.table[:] = rng.normal(size=grid.table.shape)
    enc = PointEncoder(grid, 6, rng)
    P = rng.uniform(-0.9, 0.9, size=(3, 6, 3))
    We = rng.normal(size=(3, 6))
    _, c = enc.forward(P)
    g, gp = enc.backward(c, We)
    f = lambda: _dot(enc(P), We)
    out += [gradcheck(f, {"P": P}, {"P": gp}, h=1e-7), gradcheck(f, enc.params, g, h=1e-3, max_per_param=60)]
    dde = DifferenceEncoder(4, rng)
    F = rng.normal(size=(5, 4))
    Wd = rng.normal(size=(4, 4))
    _, c = dde.forward(F)
    g, gf = dde.backward(c, Wd)
    out.append(gradcheck(lambda: _dot(dde.forward(F)[0], Wd), {"f": F, **dde.params}, {"f": gf, **g}))
    return _worst(out)


def check_enhancement(rng):
    out = []
    comp = TemporalCompressor("c", 4, 3, 2, rng)
    comp.score_w[:] = rng.normal(size=4)
    comp.score_b[:] = rng.normal(size=5)
    X = rng.normal(size=(7, 4))
    G = rng.normal(size=(7, 3))
    _, c = comp.forward(X)
    g, gX = comp.backward(c, G)
    out.append(gradcheck(lambda: _dot(comp.forward(X)[0], G), {"X": X, **comp.params}, {"X": gX, **g}))
    net = Enhancer(6, 4, rng, hidden=5)
    Fc, a, p = rng.normal(size=(3, 6)), rng.normal(size=4), rng.normal(size=4)
    Ga, Gp = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    _, _, c = net.forward(Fc, a, p)
    g, gFc, ga, gp = net.backward(c, Ga, Gp)

    def f():
        Fa, Fp, _ = net.forward(Fc, a, p)
        return _dot(Fa, Ga) + _dot(Fp, Gp)

    out.append(gradcheck(f, {"Fc": Fc, "a": a, "p": p, **net.params}, {"Fc": gFc, "a": ga, "p": gp, **g}))
    A, P = rng.normal(size=(2, 5, 4))
    for incl in (False, True):
        _, gA, gP = contrastive_loss(A, P, 0.5, incl, with_grad=True)
        out.append(gradcheck(lambda: contrastive_loss(A, P, 0.5, incl), {"A": A, "P": P}, {"A": gA, "P": gP}))
    return _worst(out)


def check_deformation(rng):
    dec = DeformationDecoder(5, 3, rng, max_offset=0.3, hidden=8)
    last = dec.adaptive.n_layers - 1
    dec.adaptive.W(last)[:] = rng.normal(scale=0.3, size=dec.adaptive.W(last).shape)
    Fc, Fa, Fp = rng.normal(size=(6, 5)), rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    G = [rng.normal(size=(6, k)) for k in (3, 4, 3)]
    _, c = dec.forward(Fc, Fa, Fp)
    g, gFc, gFa, gFp = dec.backward(c, *G)
    f = lambda: sum(_dot(d, w) for d, w in zip(dec.forward(Fc, Fa, Fp)[0], G))
    return gradcheck(f, {"Fc": Fc, "Fa": Fa, "Fp": Fp, **dec.params}, {"Fc": gFc, "Fa": gFa, "Fp": gFp, **g})


def check_model(rng):
    cfg = ModelConfig(cond_dim=4, window=2, hidden=8, point_levels=2, point_features=2, point_log2_table=8,
                      plane_levels=2, plane_features=2, plane_log2_table=8, a2p_hidden=4)
    template = rng.uniform(-0.3, 0.3, size=(20, 3))
    model = TalkingHead(cfg, BOX, 2.0, 3, template, np.arange(6), rng)
    # zero-initialized layers and 1e-4-scale tables would leave most of the
    # chain untested or put kinks within one step
    for k, v in model.params.items():
        if not v.any() or k.endswith("table"):
            v[...] = rng.normal(scale=0.1, size=v.shape)
    means = rng.uniform(-0.8, 0.8, size=(7, 3))
    audio = rng.normal(size=(9, 3))
    points = template[:6] + 0.05 * rng.normal(size=(9, 6, 3))
    G = [rng.normal(size=(7, k)) for k in (3, 4, 3)]
    t, seg, w_cl = 3, (1, 6), 0.3

    def f():
        o = model.forward_frame(means, audio, points, t, seg)
        return sum(_dot(d, w) for d, w in zip(o.delta, G)) + w_cl * o.loss_cl

    o = model.forward_frame(means, audio, points, t, seg)
    grads, gmeans, gpts = model.backward_frame(o.cache, *G, w_cl=w_cl)
    gpoints = np.zeros_like(points)
    gpoints[o.cache.flo:o.cache.flo + len(gpts)] = gpts
    params = {k: v for k, v in model.params.items() if k in grads}
    # entries below the floor are compared on an absolute scale: roundoff dominates them
    return gradcheck(f, {"means": means, "points": points, **params},
                     {"means": gmeans, "points": gpoints, **grads}, floor=1e-4, max_per_param=12)


def check_render_chain(rng):
    """Conditions through deformation into the rasterizer."""
    gs, cam = _smooth_scene(rng, 5)
    dec = DeformationDecoder(4, 2, rng, max_offset=0.05, hidden=6)
    last = dec.adaptive.n_layers - 1
    dec.adaptive.W(last)[:] = rng.normal(scale=0.03, size=dec.adaptive.W(last).shape)
    Fc, Fa, Fp = rng.normal(size=(5, 4)), rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    W = rng.normal(size=(10, 10, 3))

    def f():
        return _dot(rasterize(apply_deformation(gs, dec.forward(Fc, Fa, Fp)[0]), cam)[0].color, W)

    delta, dc = dec.forward(Fc, Fa, Fp)
    _, rc = rasterize(apply_deformation(gs, delta), cam)
    gr = rasterize_backward(rc, W)
    g, _, gFa, gFp = dec.backward(dc, gr["means"], gr["quats"], gr["log_scales"])
    return gradcheck(f, {"Fa": Fa, "Fp": Fp, **dec.params}, {"Fa": gFa, "Fp": gFp, **g}, h=1e-6)


CHECKS = {
    "nn": (check_nn, GRAD_TOL),
    "geometry": (check_geometry, GRAD_TOL),
    "hashgrid": (check_hashgrid, GRAD_TOL),
    "triplane": (check_triplane, GRAD_TOL),
    "losses": (check_losses, GRAD_TOL),
    "conditions": (check_conditions, GRAD_TOL),
    "enhancement": (check_enhancement, GRAD_TOL),
    "deformation": (check_deformation, GRAD_TOL),
    "model": (check_model, GRAD_TOL),
    "raster_delta": (check_raster_delta, GRAD_TOL),
    "raster_chain": (check_raster_chain, RASTER_TOL),
    "render_chain": (check_render_chain, RASTER_TOL),
}


def run_gradchecks(seed: int = 0, modules=None) -> list[CheckResult]:
    names = list(CHECKS) if modules is None else list(modules)
    out = []
    for i, name in enumerate(names):
        fn, tol = CHECKS[name]
        t0 = time.perf_counter()
        rep = fn(np.random.default_rng([seed, i]))
        where = f"{rep.worst_param}{list(rep.worst_index or [])}"
        out.append(CheckResult(name, rep.max_rel_err, tol, where, rep.n_checked, time.perf_counter() - t0))
    return out
