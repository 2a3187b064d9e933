"""Run configuration, checkpoints and the two training stages.

Stage one fits the canonical Gaussian head to the static orbit views with
``L1 + l1 * D-SSIM`` and densification. Stage two freezes it (by default)
and trains encoders, enhancement and the deformation decoder on the talk
sequence with ``L1 + l1 * D-SSIM + l2 * proxy + l3 * L_CL``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import struct
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .benchmark import BenchmarkScene, SceneConfig, metric_lmd, metric_psnr, metric_ssim, synthetic_pairs
from .conditions import Audio2PointNet
from .enhancement import retrieval_top1
from .errors import (InvalidArgumentError, NonFiniteGradientError, NonFiniteLossError, ParseError,
                     StateError)
from .gaussians import GaussianSet, densify_and_prune, init_random
from .losses import loss_dssim, loss_l1, loss_perceptual_proxy, sample_patches
from .model import ModelConfig, TalkingHead
from .nn import ParamStore, cosine_lr, exp_lr
from .raster import RasterSettings, rasterize, rasterize_backward

SCHEMA_VERSION = 1
CKPT_MAGIC = b"PTCKPT1\0"
CKPT_VERSION = 1


# ------------------------------------------------------------------ config

@dataclass
class LossWeights:
    dssim: float = 0.2
    proxy: float = 0.1
    cl: float = 0.01
    patch_size: int = 32
    patch_count: int = 8
    proxy_levels: int = 3

    def __post_init__(self):
        if min(self.dssim, self.proxy, self.cl) < 0:
            raise InvalidArgumentError("loss weights must be >= 0")


@dataclass
class StaticConfig:
    iterations: int = 5000
    n_init: int = 1000
    max_count: int = 2000
    marker_scale: float = 0.02
    densify_from: int = 300
    densify_until: int = 3000
    densify_every: int = 100
    grad_threshold: float = 2e-4  # mean screen-space positional gradient, NDC units
    split_size_frac: float = 0.01  # of the scene extent
    prune_alpha: float = 0.005
    lr_pos: float = 1.6e-4  # times the scene extent, decays exponentially to lr_pos_final
    lr_pos_final: float = 1.6e-6
    lr_rot: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    log_every: int = 100


@dataclass
class DeformConfig:
    iterations: int = 10000
    lr_net: float = 5e-4
    lr_grid: float = 5e-3
    final_ratio: float = 0.1
    cl_segment: int = 50
    unfreeze_canonical: bool = False
    canonical_lr_scale: float = 0.1
    joint_a2p: bool = False
    a2p_iterations: int = 3000
    a2p_lr: float = 2e-3
    a2p_pairs: int = 20  # extra synthetic (audio, cloud) sequences for pre-training
    a2p_pair_frames: int = 50
    cl_synthetic: int = 20  # synthetic sequences also aligned by L_CL each step (0 = off)
    log_every: int = 100


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    threads: int = 1
    raster: RasterSettings = field(default_factory=RasterSettings)
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    static: StaticConfig = field(default_factory=StaticConfig)
    deform: DeformConfig = field(default_factory=DeformConfig)
    loss: LossWeights = field(default_factory=LossWeights)


def _plain(x):
    if dataclasses.is_dataclass(x):
        return {f.name: _plain(getattr(x, f.name)) for f in dataclasses.fields(x)}
    if isinstance(x, (tuple, list)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data, path="config"):
    if not isinstance(data, dict):
        raise InvalidArgumentError(f"{path}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise InvalidArgumentError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v, tp = data[f.name], hints[f.name]
        if dataclasses.is_dataclass(tp):
            v = _build(tp, v, f"{path}.{f.name}")
        elif isinstance(v, list):
            v = tuple(v)
        elif tp is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def config_from_dict(d: dict) -> RunConfig:
    ver = d.get("schema_version", None)
    if ver != SCHEMA_VERSION:
        raise InvalidArgumentError(f"config schema_version {ver!r} does not match {SCHEMA_VERSION}")
    return _build(RunConfig, d)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(dump_config(cfg))


def load_config(path) -> RunConfig:
    try:
        d = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ParseError(f"config is not valid YAML: {e}") from None
    return config_from_dict(d or {})


# ------------------------------------------------------------------ checkpoint

@dataclass
class Checkpoint:
    arrays: dict  # name -> float64 array
    meta: dict  # JSON-serializable: stage, counters, rng state, config


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Layout: magic, u32 version, u32 section count, section table, then
    payloads. A table entry is ``u32 name length, name, u8 kind, u32 ndim,
    u64 dims..., u64 offset, u64 nbytes``; kind 0 is a little-endian f64
    array, kind 1 UTF-8 JSON (the ``meta`` section)."""
    sections = [(k, 0, np.ascontiguousarray(v, dtype="<f8")) for k, v in sorted(ckpt.arrays.items())]
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    sections.append(("meta", 1, meta))
    table = io.BytesIO()
    header_len = 16 + sum(4 + len(n.encode()) + 1 + 4 + 8 * (p.ndim if kind == 0 else 1) + 16
                          for n, kind, p in sections)
    offset = header_len
    payloads = []
    for name, kind, p in sections:
        nb = name.encode()
        raw = p.tobytes() if kind == 0 else p
        dims = p.shape if kind == 0 else (len(p),)
        table.write(struct.pack("<I", len(nb)) + nb + struct.pack("<BI", kind, len(dims)))
        table.write(struct.pack(f"<{len(dims)}Q", *dims))
        table.write(struct.pack("<QQ", offset, len(raw)))
        payloads.append(raw)
        offset += len(raw)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(sections)))
        f.write(table.getvalue())
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise ParseError(f"cannot read checkpoint: {e}") from None
    if data[:8] != CKPT_MAGIC:
        raise ParseError("not a checkpoint (bad magic)", 0)
    if len(data) < 16:
        raise ParseError("truncated checkpoint header", len(data))
    version, n = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 8)
    pos = 16
    arrays, meta = {}, None
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + ln].decode()
            pos += 4 + ln
            kind, ndim = struct.unpack_from("<BI", data, pos)
            pos += 5
            dims = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            off, nbytes = struct.unpack_from("<QQ", data, pos)
            pos += 16
            if off + nbytes > len(data):
                raise ParseError(f"section '{name}' runs past end of file", pos)
            raw = data[off:off + nbytes]
            if kind == 0:
                if nbytes != 8 * int(np.prod(dims, dtype=np.int64)):
                    raise ParseError(f"section '{name}' size mismatch", pos)
                arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
            elif kind == 1:
                meta = json.loads(raw.decode())
            else:
                raise ParseError(f"unknown section kind {kind}", pos)
    except struct.error:
        raise ParseError("truncated checkpoint section table", pos) from None
    if meta is None:
        raise ParseError("checkpoint has no meta section")
    return Checkpoint(arrays, meta)


def _gs_arrays(gs: GaussianSet, prefix="gs") -> dict:
    out = {f"{prefix}.{k}": getattr(gs, k) for k in GaussianSet.PARAMS}
    out[f"{prefix}.marker"] = gs.marker.astype(np.float64)
    return out


def gaussians_from_checkpoint(ckpt: Checkpoint, prefix="gs") -> GaussianSet:
    a = ckpt.arrays
    try:
        return GaussianSet(*(a[f"{prefix}.{k}"].copy() for k in GaussianSet.PARAMS),
                           a[f"{prefix}.marker"] > 0.5)
    except KeyError as e:
        raise ParseError(f"checkpoint lacks Gaussian section {e}") from None


def _store_arrays(store: ParamStore) -> tuple[dict, dict]:
    arrays, steps = {}, {}
    for name, st in store.state.items():
        arrays[f"adam.m.{name}"] = st.m
        arrays[f"adam.v.{name}"] = st.v
        steps[name] = st.step
    return arrays, steps


def _load_store(store: ParamStore, ckpt: Checkpoint, steps: dict) -> None:
    for name, st in store.state.items():
        store.params[name][...] = ckpt.arrays[name]
        st.m[...] = ckpt.arrays[f"adam.m.{name}"]
        st.v[...] = ckpt.arrays[f"adam.v.{name}"]
        st.step = int(steps[name])


# ------------------------------------------------------------------ logging

def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def _finite_or_raise(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise NonFiniteLossError(f"{what} is not finite ({value})")
    return value


# ------------------------------------------------------------------ static stage

class StaticTrainer:
    """Fits the canonical head to the static views."""

    stage = "static"

    def __init__(self, scene: BenchmarkScene, cfg: RunConfig):
        self.scene, self.cfg = scene, cfg
        sc = cfg.static
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.gs = init_random(sc.n_init, scene.config.bbox, int(self.rng.integers(2 ** 31)),
                              markers=scene.marker_rest, marker_scale=sc.marker_scale)
        self.store = ParamStore()
        self._set_lrs()
        self.gs.register(self.store)
        self.iteration = 0
        self._reset_stats()
        self.log: list[dict] = []

    def _set_lrs(self):
        sc = self.cfg.static
        self.store.lr.update({"gs_pos": sc.lr_pos * self.scene.config.extent, "gs_rot": sc.lr_rot,
                              "gs_scale": sc.lr_scale, "gs_opacity": sc.lr_opacity, "gs_color": sc.lr_color})

    def _reset_stats(self):
        n = len(self.gs)
        self.grad_sum = np.zeros(n)
        self.grad_count = np.zeros(n)
        self.grad_dir = np.zeros((n, 3))

    @property
    def done(self) -> bool:
        return self.iteration >= self.cfg.static.iterations

    def pos_lr(self) -> float:
        sc, ext = self.cfg.static, self.scene.config.extent
        return exp_lr(sc.lr_pos * ext, sc.lr_pos_final * ext, self.iteration, sc.iterations)

    def loss_and_grad(self, view: int):
        cam, ref = self.scene.static_cams[view], self.scene.static_images[view]
        fb, cache = rasterize(self.gs, cam, self.cfg.raster)
        l1, g1 = loss_l1(fb.color, ref, with_grad=True)
        ds, g2 = loss_dssim(fb.color, ref, with_grad=True)
        lam = self.cfg.loss.dssim
        loss = _finite_or_raise(l1 + lam * ds, "static loss")
        return loss, {"l1": l1, "dssim": ds}, fb, cache, g1 + lam * g2

    def step(self) -> dict:
        view = int(self.rng.integers(len(self.scene.static_cams)))
        loss, terms, fb, cache, gimg = self.loss_and_grad(view)
        g = rasterize_backward(cache, gimg)
        gmeans = g["means"].copy()
        gmeans[self.gs.marker] = 0.0  # landmark markers keep their positions
        grads = {"gs.means": gmeans, "gs.quats": g["quats"], "gs.log_scales": g["log_scales"],
                 "gs.opacity_logit": g["opacity_logit"], "gs.colors": g["colors"]}
        try:
            self.store.step(grads, {"gs_pos": self.pos_lr()})
        except NonFiniteGradientError as e:
            raise NonFiniteLossError(f"non-finite gradient for {e}") from None
        vis = cache.splats.radius > 0
        cam = self.scene.static_cams[view]
        ndc = g["means2d"] * np.array([cam.width / 2.0, cam.height / 2.0])
        self.grad_sum[vis] += np.linalg.norm(ndc[vis], axis=1)
        self.grad_count[vis] += 1
        self.grad_dir += g["means"]
        self.iteration += 1
        sc = self.cfg.static
        if (sc.densify_from <= self.iteration <= sc.densify_until and self.iteration % sc.densify_every == 0):
            self.densify()
        row = {"iteration": self.iteration, "loss": loss, **terms,
               "psnr": metric_psnr(fb.color, self.scene.static_images[view]), "n_gaussians": len(self.gs)}
        if self.iteration % sc.log_every == 0 or self.done:
            self.log.append(row)
        return row

    def densify(self) -> None:
        sc = self.cfg.static
        stat = self.grad_sum / np.maximum(self.grad_count, 1)
        res = densify_and_prune(self.gs, stat, sc.grad_threshold, sc.split_size_frac * self.scene.config.extent,
                                self.rng, grad_dir=self.grad_dir, prune_alpha=sc.prune_alpha,
                                max_count=sc.max_count)
        new = res.gaussians
        for k in GaussianSet.PARAMS:
            name = f"gs.{k}"
            st = self.store.state[name]
            m, v = st.m[res.parent], st.v[res.parent]
            m[res.fresh] = 0.0
            v[res.fresh] = 0.0
            self.store.replace(name, np.ascontiguousarray(getattr(new, k)), m, v)
        new.bind(self.store)
        self.gs = new
        self._reset_stats()

    def run(self, until: int | None = None) -> None:
        end = self.cfg.static.iterations if until is None else min(until, self.cfg.static.iterations)
        while self.iteration < end:
            self.step()

    def evaluate(self) -> dict:
        ps = [metric_psnr(rasterize(self.gs, c, self.cfg.raster)[0].color, ref)
              for c, ref in zip(self.scene.static_cams, self.scene.static_images)]
        return {"psnr": float(np.mean(ps)), "psnr_min": float(np.min(ps)), "n_gaussians": len(self.gs)}

    # checkpointing -------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        arrays = dict(_gs_arrays(self.gs))
        adam, steps = _store_arrays(self.store)
        arrays.update(adam)
        arrays["densify.grad_sum"] = self.grad_sum
        arrays["densify.grad_count"] = self.grad_count
        arrays["densify.grad_dir"] = self.grad_dir
        meta = {"stage": self.stage, "iteration": self.iteration, "adam_steps": steps,
                "rng": self.rng.bit_generator.state, "config": config_to_dict(self.cfg)}
        return Checkpoint(arrays, meta)

    @classmethod
    def from_checkpoint(cls, scene: BenchmarkScene, ckpt: Checkpoint) -> "StaticTrainer":
        if ckpt.meta.get("stage") != cls.stage:
            raise StateError(f"checkpoint stage is {ckpt.meta.get('stage')!r}, expected {cls.stage!r}")
        cfg = config_from_dict(ckpt.meta["config"])
        self = cls.__new__(cls)
        self.scene, self.cfg = scene, cfg
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = ckpt.meta["rng"]
        self.gs = gaussians_from_checkpoint(ckpt)
        self.store = ParamStore()
        self._set_lrs()
        self.gs.register(self.store)
        _load_store(self.store, ckpt, ckpt.meta["adam_steps"])
        self.iteration = int(ckpt.meta["iteration"])
        self.grad_sum = ckpt.arrays["densify.grad_sum"].copy()
        self.grad_count = ckpt.arrays["densify.grad_count"].copy()
        self.grad_dir = ckpt.arrays["densify.grad_dir"].copy()
        self.log = []
        return self


# ------------------------------------------------------------------ audio2point

def pretrain_audio2point(net: Audio2PointNet, pairs, iterations: int, lr: float,
                         rng: np.random.Generator) -> list[float]:
    """Adam on the mean squared point error, one (audio (T, F_a), clouds
    (T, N_template, 3)) sequence per step drawn from ``pairs``. Returns the
    per-step loss history."""
    if not pairs:
        raise InvalidArgumentError("audio-to-point pre-training needs at least one sequence")
    store = ParamStore()
    store.lr["a2p"] = lr
    net.register(store, "a2p")
    hist = []
    for it in range(iterations):
        audio, clouds = pairs[int(rng.integers(len(pairs)))]
        pred, cache = net.forward(audio)
        d = pred - clouds
        hist.append(float(np.mean(d * d)))
        grads = net.backward(cache, 2.0 * d / d.size)
        store.step(grads, {"a2p": cosine_lr(lr, it, iterations)})
    return hist


# ------------------------------------------------------------------ deform stage

class DeformTrainer:
    """Trains the conditional pipeline on the talk sequence."""

    stage = "deform"

    def __init__(self, scene: BenchmarkScene, cfg: RunConfig, canonical: GaussianSet, pretrain: bool = True):
        self.scene, self.cfg = scene, cfg
        self.rng = np.random.default_rng([cfg.seed, 2])
        self.gs = canonical.copy()
        init_rng = np.random.default_rng([cfg.seed, 3])
        self.model = TalkingHead(cfg.model, scene.config.bbox, scene.config.extent, scene.audio.n_features,
                                 scene.head.template, scene.head.lip_index, init_rng)
        self.n_train = scene.n_train
        self.audio = scene.audio.features
        self.a2p_history = []
        dc = cfg.deform
        if dc.cl_synthetic > dc.a2p_pairs:
            raise InvalidArgumentError("cl_synthetic cannot exceed a2p_pairs")
        syn = synthetic_pairs(scene.head, scene.config, dc.a2p_pairs, dc.a2p_pair_frames, cfg.seed)
        self.syn_audio = [a for a, _ in syn[:dc.cl_synthetic]]
        if pretrain and dc.a2p_iterations > 0:
            pairs = [(self.audio[:self.n_train], scene.lip_points[:self.n_train])] + syn
            self.a2p_history = pretrain_audio2point(self.model.a2p, pairs, dc.a2p_iterations, dc.a2p_lr,
                                                    np.random.default_rng([cfg.seed, 5]))
        self._build_store()
        self.refresh_points()
        self.iteration = 0
        self.log: list[dict] = []

    def _build_store(self):
        dc = self.cfg.deform
        self.store = ParamStore()
        self.model.register(self.store, with_a2p=dc.joint_a2p)
        if dc.unfreeze_canonical:
            self.gs.register(self.store)
        self._set_lrs(0)

    def _set_lrs(self, it):
        dc, sc = self.cfg.deform, self.cfg.static
        f = cosine_lr(1.0, it, dc.iterations, dc.final_ratio)
        self.store.lr.update({"net": dc.lr_net * f, "grid": dc.lr_grid * f, "a2p": dc.lr_net * f})
        c = dc.canonical_lr_scale
        self.store.lr.update({"gs_pos": c * sc.lr_pos_final * self.scene.config.extent, "gs_rot": c * sc.lr_rot,
                              "gs_scale": c * sc.lr_scale, "gs_opacity": c * sc.lr_opacity,
                              "gs_color": c * sc.lr_color})

    def refresh_points(self):
        """Predicted lip clouds for the whole sequence. The TCN is causal, so
        the training prefix is unaffected by the held-out audio."""
        self.points = self.model.a2p.lip_points(self.audio)
        self.syn_points = [self.model.a2p.lip_points(a) for a in self.syn_audio]

    @property
    def done(self) -> bool:
        return self.iteration >= self.cfg.deform.iterations

    def sample(self):
        T = self.n_train
        t = int(self.rng.integers(T))
        L = min(self.cfg.deform.cl_segment, T)
        s = int(self.rng.integers(max(0, t - L + 1), min(t, T - L) + 1))
        return t, (s, L)

    def frame_loss(self, t: int, seg, patches):
        """Forward pass on a training frame. Returns the loss, its terms and
        everything the backward pass needs."""
        lw = self.cfg.loss
        T = self.n_train
        if self.cfg.deform.joint_a2p:
            pts_full, a2p_cache = self.model.a2p.forward(self.audio[:T])
            points = pts_full[:, self.model.a2p.lip_index]
        else:
            points, a2p_cache = self.points[:T], None
        out = self.model.forward_frame(self.gs.means, self.audio[:T], points, t, seg)
        cam, ref = self.scene.talk_cams[t], self.scene.talk_images[t]
        fb, cache = rasterize(self.gs, cam, self.cfg.raster, delta=out.delta)
        l1, g1 = loss_l1(fb.color, ref, with_grad=True)
        ds, g2 = loss_dssim(fb.color, ref, with_grad=True)
        px, g3 = loss_perceptual_proxy(fb.color, ref, patches, lw.proxy_levels, with_grad=True)
        cl = out.loss_cl if out.loss_cl is not None else 0.0
        loss = _finite_or_raise(l1 + lw.dssim * ds + lw.proxy * px + lw.cl * cl, "deformation loss")
        gimg = g1 + lw.dssim * g2 + lw.proxy * g3
        terms = {"l1": l1, "dssim": ds, "proxy": px, "cl": cl}
        return loss, terms, fb, cache, gimg, out, a2p_cache

    def step(self) -> dict:
        t, seg = self.sample()
        lw = self.cfg.loss
        H, W = self.scene.talk_images.shape[1:3]
        patches = sample_patches(self.rng, H, W, lw.patch_size, lw.patch_count) if lw.proxy > 0 else []
        loss, terms, fb, cache, gimg, out, a2p_cache = self.frame_loss(t, seg, patches)
        g = rasterize_backward(cache, gimg)
        dc = self.cfg.deform
        grads, gmeans, gpts = self.model.backward_frame(out.cache, g["means"], g["quats"], g["log_scales"], lw.cl,
                                                        dc.unfreeze_canonical, dc.joint_a2p)
        if self.cfg.deform.unfreeze_canonical:
            grads.update({"gs.means": g["means"] + gmeans, "gs.quats": g["quats"],
                          "gs.log_scales": g["log_scales"], "gs.opacity_logit": g["opacity_logit"],
                          "gs.colors": g["colors"]})
            grads["gs.means"][self.gs.marker] = 0.0
        if self.syn_audio:
            k = int(self.rng.integers(len(self.syn_audio)))
            syn_cl, syn_cache = self.model.contrastive(self.syn_audio[k], self.syn_points[k])
            _finite_or_raise(syn_cl, "synthetic contrastive loss")
            for name, v in self.model.contrastive_backward(syn_cache, lw.cl).items():
                grads[name] = grads[name] + v if name in grads else v
            terms["cl_syn"] = syn_cl
        if a2p_cache is not None:
            a2p = self.model.a2p
            gfull = np.zeros((self.n_train, len(a2p.template), 3))
            rows = np.arange(out.cache.flo, out.cache.flo + gpts.shape[0])
            gfull[rows[:, None], a2p.lip_index[None, :]] += gpts
            grads.update(a2p.backward(a2p_cache, gfull))
        self._set_lrs(self.iteration)
        try:
            self.store.step(grads)
        except NonFiniteGradientError as e:
            raise NonFiniteLossError(f"non-finite gradient for {e}") from None
        if self.cfg.deform.joint_a2p:
            self.refresh_points()
        self.iteration += 1
        row = {"iteration": self.iteration, "loss": loss, **terms,
               "psnr": metric_psnr(fb.color, self.scene.talk_images[t])}
        if self.iteration % self.cfg.deform.log_every == 0 or self.done:
            self.log.append(row)
        return row

    def run(self, until: int | None = None) -> None:
        end = self.cfg.deform.iterations if until is None else min(until, self.cfg.deform.iterations)
        while self.iteration < end:
            self.step()

    # evaluation -----------------------------------------------------------
    def render(self, t: int):
        out = self.model.forward_frame(self.gs.means, self.audio, self.points, t)
        fb, _ = rasterize(self.gs, self.scene.talk_cams[t], self.cfg.raster, delta=out.delta)
        return fb.color, out.delta

    def landmarks(self, t: int, delta) -> np.ndarray:
        mk = self.gs.marker
        return self.scene.talk_cams[t].project_points(self.gs.means[mk] + delta[0][mk])

    def heldout_frames(self) -> np.ndarray:
        return np.arange(self.n_train, len(self.scene.talk_cams))

    def evaluate(self, frames=None) -> dict:
        frames = self.heldout_frames() if frames is None else np.asarray(frames)
        ps, ss, pred, base = [], [], [], []
        for t in frames:
            img, delta = self.render(int(t))
            ref = self.scene.talk_images[t]
            ps.append(metric_psnr(img, ref))
            ss.append(metric_ssim(img, ref))
            pred.append(self.landmarks(int(t), delta))
            base.append(self.scene.talk_cams[t].project_points(self.gs.means[self.gs.marker]))
        gt = self.scene.landmarks[frames]
        a = self.model.audio_rows(self.audio, frames)
        p = self.model.point_rows(self.points[frames])
        return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)),
                "lmd": metric_lmd(np.stack(pred), gt), "lmd_static": metric_lmd(np.stack(base), gt),
                "retrieval_top1": retrieval_top1(a, p)}

    # checkpointing -------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        arrays = dict(_gs_arrays(self.gs))
        arrays.update({k: v for k, v in self.model.params.items()})
        adam, steps = _store_arrays(self.store)
        arrays.update(adam)
        meta = {"stage": self.stage, "iteration": self.iteration, "adam_steps": steps,
                "rng": self.rng.bit_generator.state, "config": config_to_dict(self.cfg)}
        return Checkpoint(arrays, meta)

    @classmethod
    def from_checkpoint(cls, scene: BenchmarkScene, ckpt: Checkpoint) -> "DeformTrainer":
        if ckpt.meta.get("stage") != cls.stage:
            raise StateError(f"checkpoint stage is {ckpt.meta.get('stage')!r}, expected {cls.stage!r}")
        cfg = config_from_dict(ckpt.meta["config"])
        self = cls(scene, cfg, gaussians_from_checkpoint(ckpt), pretrain=False)
        for k, v in self.model.params.items():
            if k not in ckpt.arrays:
                raise ParseError(f"checkpoint lacks parameter '{k}'")
            v[...] = ckpt.arrays[k]
        _load_store(self.store, ckpt, ckpt.meta["adam_steps"])
        self.rng.bit_generator.state = ckpt.meta["rng"]
        self.iteration = int(ckpt.meta["iteration"])
        self._set_lrs(self.iteration)
        self.refresh_points()
        return self


def static_render_loss(gs: GaussianSet, cam, ref, cfg: RunConfig) -> float:
    """The static-stage objective for one view."""
    fb, _ = rasterize(gs, cam, cfg.raster)
    return loss_l1(fb.color, ref) + cfg.loss.dssim * loss_dssim(fb.color, ref)


__all__ = [
    "SCHEMA_VERSION", "LossWeights", "StaticConfig", "DeformConfig", "RunConfig", "ModelConfig", "SceneConfig",
    "Checkpoint", "save_checkpoint", "load_checkpoint", "load_config", "save_config", "dump_config",
    "config_from_dict", "config_to_dict", "StaticTrainer", "DeformTrainer", "pretrain_audio2point",
    "gaussians_from_checkpoint", "write_csv", "static_render_loss",
]
