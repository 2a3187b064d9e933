"""Condition streams: audio feature files, synthetic audio, the audio-to-lip
point generator, the per-frame point-cloud encoder and the frame-difference
encoder.

File formats (little-endian, bit-exact):

* features: ``b"PTFEAT1\\0"``, u32 T, u32 F, f32 frame rate, T*F f32 row-major
* lip points: ``b"PTLIP1\\0\\0"``, u32 T, u32 N, T*N*3 f32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, ParseError, ShapeError, StateError
from .hashgrid import HashGrid, TriPlane
from .nn import DenseNet

FEAT_MAGIC = b"PTFEAT1\0"
LIP_MAGIC = b"PTLIP1\0\0"


@dataclass
class AudioFeatureSequence:
    features: np.ndarray  # (T, F)
    fps: float

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 2:
            raise InvalidArgumentError("audio features must be (T, F) with T >= 2")
        if not np.all(np.isfinite(self.features)):
            raise InvalidArgumentError("audio features must be finite")

    @property
    def n_frames(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]


@dataclass
class LipPointSequence:
    points: np.ndarray  # (T, N_p, 3)
    template: np.ndarray | None = None  # (N_template, 3)
    lip_index: np.ndarray | None = None  # (N_p,) rows of the template

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[2] != 3 or self.points.shape[1] < 3:
            raise InvalidArgumentError("lip points must be (T, N_p >= 3, 3)")

    @property
    def n_frames(self):
        return self.points.shape[0]


def f32_exact(a) -> np.ndarray:
    """Round to float32-representable doubles, so file round trips are exact."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def save_features(path, seq: AudioFeatureSequence) -> None:
    T, F = seq.features.shape
    with open(path, "wb") as f:
        f.write(FEAT_MAGIC)
        f.write(struct.pack("<IIf", T, F, seq.fps))
        f.write(np.ascontiguousarray(seq.features, dtype="<f4").tobytes())


def load_features(path) -> AudioFeatureSequence:
    data = open(path, "rb").read()
    if len(data) < 8 or data[:8] != FEAT_MAGIC:
        raise ParseError("bad magic/version for feature file", 0)
    if len(data) < 20:
        raise ParseError("truncated feature header", len(data))
    T, F, fps = struct.unpack_from("<IIf", data, 8)
    need = 20 + 4 * T * F
    if len(data) != need:
        raise ParseError(f"feature payload size {len(data) - 20} != {4 * T * F} for T={T}, F={F}", len(data))
    arr = np.frombuffer(data, dtype="<f4", offset=20, count=T * F).astype(np.float64).reshape(T, F)
    try:
        return AudioFeatureSequence(arr, float(fps))
    except InvalidArgumentError as e:
        raise ParseError(str(e), 8) from None


def save_lip_points(path, points: np.ndarray) -> None:
    points = np.asarray(points)
    T, N, _ = points.shape
    with open(path, "wb") as f:
        f.write(LIP_MAGIC)
        f.write(struct.pack("<II", T, N))
        f.write(np.ascontiguousarray(points, dtype="<f4").tobytes())


def load_lip_points(path) -> np.ndarray:
    data = open(path, "rb").read()
    if len(data) < 8 or data[:8] != LIP_MAGIC:
        raise ParseError("bad magic/version for lip point file", 0)
    if len(data) < 16:
        raise ParseError("truncated lip point header", len(data))
    T, N = struct.unpack_from("<II", data, 8)
    need = 16 + 12 * T * N
    if len(data) != need:
        raise ParseError(f"lip payload size {len(data) - 16} != {12 * T * N}", len(data))
    return np.frombuffer(data, dtype="<f4", offset=16).astype(np.float64).reshape(T, N, 3)


# ------------------------------------------------------------ synthetic audio

@dataclass
class AudioSynthConfig:
    n_frames: int = 250
    n_features: int = 16
    fps: float = 25.0
    amplitude: float = 1.0
    syllable_hz: tuple = (2.0, 3.5)
    phrase_hz: tuple = (0.15, 0.4)
    spread_hz: tuple = (0.3, 0.9)


def opening_from_band(band0: np.ndarray) -> np.ndarray:
    """Mouth opening in [0, 1] as a function of feature band 0."""
    return np.clip(band0, 0.0, 1.0)


def spread_from_band(band1: np.ndarray) -> np.ndarray:
    """Lateral lip spread in [-0.5, 0.5] as a function of feature band 1."""
    return np.clip(band1, -0.5, 0.5)


def synthesize_benchmark_audio(cfg: AudioSynthConfig, seed: int):
    """Smooth multi-band feature sequence plus the mouth track it drives.

    Band 0 is ``A * 0.5 * (1 - cos(w_s t + p_s)) * (0.65 + 0.35 sin(w_p t + p_p))``
    and fixes the opening via :func:`opening_from_band`; band 1 is
    ``0.5 * A * sin(w_r t + p_r)`` and fixes the spread. Other bands are
    enveloped sinusoids. Returns ``(AudioFeatureSequence, track)`` with
    track (T, 2) = (opening, spread).
    """
    if cfg.n_features < 2:
        raise InvalidArgumentError("need at least two feature bands")
    rng = np.random.default_rng(seed)
    t = np.arange(cfg.n_frames) / cfg.fps
    A = cfg.amplitude
    tau = 2 * np.pi
    ws, wp, wr = (tau * rng.uniform(*r) for r in (cfg.syllable_hz, cfg.phrase_hz, cfg.spread_hz))
    ps, pp, pr = rng.uniform(0, tau, size=3)
    F = np.empty((cfg.n_frames, cfg.n_features))
    F[:, 0] = A * 0.5 * (1 - np.cos(ws * t + ps)) * (0.65 + 0.35 * np.sin(wp * t + pp))
    F[:, 1] = 0.5 * A * np.sin(wr * t + pr)
    for k in range(2, cfg.n_features):
        f = tau * rng.uniform(0.5, 6.0)
        g = tau * rng.uniform(0.1, 1.0)
        a = rng.uniform(0.2, 0.8)
        ph, ph2 = rng.uniform(0, tau, size=2)
        F[:, k] = A * a * np.sin(f * t + ph) * 0.5 * (1 + np.sin(g * t + ph2))
    F = f32_exact(F)
    track = np.stack([opening_from_band(F[:, 0]), spread_from_band(F[:, 1])], axis=1)
    return AudioFeatureSequence(F, cfg.fps), track


# ------------------------------------------------------------ audio -> points

class CausalConv1d:
    """Dilated causal convolution over time with edge-replicate padding:
    ``y[t] = b + sum_k x[max(t - k*d, 0)] @ W[k]``."""

    def __init__(self, name, c_in, c_out, kernel, dilation, rng):
        self.name, self.kernel, self.dilation = name, kernel, dilation
        lim = np.sqrt(6.0 / (c_in * kernel + c_out))
        self.params = {f"{name}.W": rng.uniform(-lim, lim, size=(kernel, c_in, c_out)),
                       f"{name}.b": np.zeros(c_out)}

    def _src(self, T):
        t = np.arange(T)
        return [np.maximum(t - k * self.dilation, 0) for k in range(self.kernel)]

    def forward(self, x):
        W, b = self.params[f"{self.name}.W"], self.params[f"{self.name}.b"]
        y = np.broadcast_to(b, (x.shape[0], W.shape[2])).copy()
        for k, src in enumerate(self._src(x.shape[0])):
            y += x[src] @ W[k]
        return y

    def backward(self, x, gy):
        W = self.params[f"{self.name}.W"]
        gW = np.empty_like(W)
        gx = np.zeros_like(x)
        for k, src in enumerate(self._src(x.shape[0])):
            gW[k] = x[src].T @ gy
            np.add.at(gx, src, gy @ W[k].T)
        return {f"{self.name}.W": gW, f"{self.name}.b": gy.sum(axis=0)}, gx


class Audio2PointNet:
    """TCN (kernel 3, dilations 1, 2, 4, 8; receptive field 31 frames) ->
    audio encoder MLP, plus a template embedding, -> offset decoder with a
    zero-initialized last layer. Output = template + offsets."""

    DILATIONS = (1, 2, 4, 8)

    def __init__(self, n_audio: int, template: np.ndarray, lip_index: np.ndarray,
                 rng: np.random.Generator, hidden: int = 32, embed: int = 32, name: str = "a2p"):
        self.name = name
        self.template = np.asarray(template, dtype=np.float64)
        self.lip_index = np.asarray(lip_index, dtype=np.int64)
        self.n_audio = n_audio
        nt = len(self.template)
        self.convs = [CausalConv1d(f"{name}.tcn{i}", n_audio if i == 0 else hidden, hidden, 3, d, rng)
                      for i, d in enumerate(self.DILATIONS)]
        self.encoder = DenseNet(f"{name}.enc", [hidden, embed, embed], ["relu", "identity"], rng)
        self.embedding = DenseNet(f"{name}.emb", [3 * nt, embed], ["identity"], rng)
        self.decoder = DenseNet(f"{name}.dec", [embed, embed, 3 * nt], ["relu", "identity"], rng,
                                zero_last=True)

    @property
    def params(self):
        out = {}
        for c in self.convs:
            out.update(c.params)
        for net in (self.encoder, self.embedding, self.decoder):
            out.update(net.params)
        return out

    def register(self, store, group="a2p"):
        for k, v in self.params.items():
            store.register(k, v, group)
        return self

    def forward(self, audio: np.ndarray):
        """Audio (T, F_a) -> full predicted point set (T, N_template, 3)."""
        audio = np.asarray(audio, dtype=np.float64)
        if audio.ndim != 2 or audio.shape[1] != self.n_audio:
            raise ShapeError(f"audio width {audio.shape} does not match network input {self.n_audio}")
        xs = [audio]
        pre = []
        h = audio
        for i, conv in enumerate(self.convs):
            z = conv.forward(h)
            pre.append(z)
            a = np.tanh(z)
            h = a if i == 0 else h + a
            xs.append(h)
        code, c_enc = self.encoder.forward(h)
        emb, c_emb = self.embedding.forward(self.template.reshape(1, -1))
        z = code + emb
        off, c_dec = self.decoder.forward(z)
        T = audio.shape[0]
        out = self.template[None] + off.reshape(T, -1, 3)
        return out, (xs, pre, c_enc, c_emb, c_dec)

    def lip_points(self, audio: np.ndarray) -> np.ndarray:
        return self.forward(audio)[0][:, self.lip_index]

    def backward(self, cache, grad_out: np.ndarray) -> dict:
        """``grad_out`` is dL/d(full point set), (T, N_template, 3)."""
        if cache is None:
            raise StateError("audio2point backward without cache")
        xs, pre, c_enc, c_emb, c_dec = cache
        T = grad_out.shape[0]
        grads = {}
        g, gz = self.decoder.backward(c_dec, grad_out.reshape(T, -1))
        grads.update(g)
        g, _ = self.embedding.backward(c_emb, gz.sum(axis=0, keepdims=True))
        grads.update(g)
        g, gh = self.encoder.backward(c_enc, gz)
        grads.update(g)
        for i in reversed(range(len(self.convs))):
            a = np.tanh(pre[i])
            gzc = gh * (1 - a * a)
            g, gx = self.convs[i].backward(xs[i], gzc)
            grads.update(g)
            gh = gx if i == 0 else gh + gx
        return grads


def audio2point(net: Audio2PointNet, seq: AudioFeatureSequence) -> LipPointSequence:
    pts = net.lip_points(seq.features)
    return LipPointSequence(pts, net.template, net.lip_index)


# ------------------------------------------------------------ point features

def _exact_mean(a: np.ndarray, axis: int) -> np.ndarray:
    # summing in sorted order makes the mean independent of point order
    return np.sort(a, axis=axis).sum(axis=axis) / a.shape[axis]


class PointEncoder:
    """Per-frame point-cloud feature: grid features per point, mean and max
    pooled over points, then a linear projection to ``out_dim``."""

    def __init__(self, grid: HashGrid | TriPlane, out_dim: int, rng: np.random.Generator,
                 name: str = "pointenc"):
        self.grid = grid
        self.name = name
        self.out_dim = out_dim
        self.proj = DenseNet(f"{name}.proj", [2 * grid.out_dim, out_dim], ["identity"], rng)

    @property
    def params(self):
        out = dict(self.grid.params)
        out.update(self.proj.params)
        return out

    def register(self, store, group="net", grid_group="grid"):
        self.grid.register(store, grid_group)
        self.proj.register(store, group)
        return self

    def forward(self, P: np.ndarray):
        """P (N_p, 3) -> (F,) or (T, N_p, 3) -> (T, F)."""
        P = np.asarray(P, dtype=np.float64)
        single = P.ndim == 2
        if single:
            P = P[None]
        T, n, _ = P.shape
        feat, gcache = self.grid.forward(P.reshape(-1, 3))
        feat = feat.reshape(T, n, -1)
        mean = _exact_mean(feat, 1)
        amax = np.argmax(feat, axis=1)  # (T, LD)
        mx = np.take_along_axis(feat, amax[:, None, :], axis=1)[:, 0]
        pooled = np.concatenate([mean, mx], axis=1)
        out, pcache = self.proj.forward(pooled)
        cache = (gcache, amax, T, n, pooled)
        return (out[0] if single else out), (cache, pcache)

    def __call__(self, P):
        return self.forward(P)[0]

    def backward(self, cache, grad_out: np.ndarray, point_grad: bool = True):
        """Returns ``(param_grads, grad_points)``; ``grad_points`` is None
        when not requested."""
        (gcache, amax, T, n, pooled), pcache = cache
        grad_out = np.atleast_2d(grad_out)
        grads, gpool = self.proj.backward(pcache, grad_out)
        D = gpool.shape[1] // 2
        gfeat = np.broadcast_to(gpool[:, None, :D] / n, (T, n, D)).copy()
        np.put_along_axis(gfeat, amax[:, None, :],
                          np.take_along_axis(gfeat, amax[:, None, :], axis=1) + gpool[:, None, D:], axis=1)
        tg, qg = self.grid.backward(gcache, gfeat.reshape(T * n, D), point_grad)
        if isinstance(self.grid, TriPlane):
            grads.update(tg)
        else:
            grads[f"{self.grid.name}.table"] = tg
        return grads, (qg.reshape(T, n, 3) if point_grad else None)


def frame_point_feature(enc: PointEncoder, P_t: np.ndarray) -> np.ndarray:
    return enc(P_t)


class DifferenceEncoder:
    """Row t = MLP(f[t+1] - f[t]) for consecutive per-frame features."""

    def __init__(self, dim: int, rng: np.random.Generator, name: str = "dde", hidden: int | None = None):
        hidden = hidden or dim
        self.mlp = DenseNet(name, [dim, hidden, dim], ["relu", "identity"], rng)
        self.name = name

    @property
    def params(self):
        return self.mlp.params

    def register(self, store, group="net"):
        self.mlp.register(store, group)
        return self

    def forward(self, feats: np.ndarray):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise InvalidArgumentError("difference encoding needs at least two frames")
        diff = feats[1:] - feats[:-1]
        out, c = self.mlp.forward(diff)
        return out, c

    def backward(self, cache, grad_out):
        grads, gd = self.mlp.backward(cache, grad_out)
        T = gd.shape[0] + 1
        gf = np.zeros((T, gd.shape[1]))
        gf[1:] += gd
        gf[:-1] -= gd
        return grads, gf


def dynamic_difference_encode(enc: PointEncoder, dde: DifferenceEncoder, P) -> np.ndarray:
    """F_p of shape (T-1, F) for a lip point sequence (T, N_p, 3)."""
    pts = P.points if isinstance(P, LipPointSequence) else np.asarray(P, dtype=np.float64)
    if pts.ndim != 3 or pts.shape[0] < 2:
        raise InvalidArgumentError("dynamic difference encoding needs T >= 2")
    return dde.forward(enc(pts))[0]


def frame_rows(n_frames: int) -> np.ndarray:
    """Row of the difference encoding consumed by each frame: frame t uses
    row t-1 (the difference into frame t); frame 0 reuses row 0."""
    return np.maximum(np.arange(n_frames) - 1, 0)
