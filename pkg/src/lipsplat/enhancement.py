"""Cross-modal enhancement: windowed temporal attention, per-Gaussian gating
of the audio and point conditions, and the audio/point contrastive loss."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateFeatureError, InvalidArgumentError, ShapeError, StateError
from .nn import DenseNet


class TemporalCompressor:
    """Softmax-weighted sum over an edge-clamped window ``[t-W, t+W]`` of
    linearly projected frames. Scores are ``x_j . w + b_offset``; the offset
    bias starts at ``-center_decay * |offset|`` (0 gives the window mean)."""

    def __init__(self, name: str, in_dim: int, out_dim: int, half_width: int,
                 rng: np.random.Generator, center_decay: float = 0.0):
        if half_width < 0:
            raise InvalidArgumentError("window half-width must be >= 0")
        self.name = name
        self.half_width = half_width
        self.proj = DenseNet(f"{name}.proj", [in_dim, out_dim], ["identity"], rng)
        self.score_w = np.zeros(in_dim)
        self.score_b = -center_decay * np.abs(np.arange(-half_width, half_width + 1, dtype=np.float64))

    @property
    def params(self):
        out = dict(self.proj.params)
        out[f"{self.name}.score_w"] = self.score_w
        out[f"{self.name}.score_b"] = self.score_b
        return out

    def register(self, store, group="net"):
        for k, v in self.params.items():
            store.register(k, v, group)
        return self

    def bind(self, store):
        for k in list(self.proj.params):
            self.proj.params[k] = store[k]
        self.score_w = store[f"{self.name}.score_w"]
        self.score_b = store[f"{self.name}.score_b"]

    def window(self, T: int, frames: np.ndarray) -> np.ndarray:
        off = np.arange(-self.half_width, self.half_width + 1)
        return np.clip(frames[:, None] + off[None], 0, T - 1)

    def forward(self, X: np.ndarray, frames=None, T: int | None = None, offset: int = 0):
        """X (T, F_in) -> (len(frames), F_out); all frames by default.

        ``X`` may hold only rows ``offset .. offset + len(X) - 1`` of a
        length-``T`` sequence, as long as every window of ``frames`` lies
        inside that slice after edge clamping.
        """
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] < 1:
            raise InvalidArgumentError("need at least one frame")
        T = X.shape[0] if T is None else T
        frames = np.arange(T) if frames is None else np.atleast_1d(np.asarray(frames, dtype=np.int64))
        J = self.window(T, frames) - offset
        if J.min() < 0 or J.max() >= X.shape[0]:
            raise InvalidArgumentError("window reaches outside the supplied rows")
        V, pc = self.proj.forward(X)
        s = X[J] @ self.score_w + self.score_b[None]
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        a = e / e.sum(axis=1, keepdims=True)
        out = np.einsum("to,tof->tf", a, V[J])
        return out, (X, J, V, pc, a)

    def weights(self, X, frames=None):
        return self.forward(X, frames)[1][4]

    def backward(self, cache, grad_out):
        X, J, V, pc, a = cache
        gV = np.zeros_like(V)
        np.add.at(gV, J, a[:, :, None] * grad_out[:, None, :])
        ga = np.einsum("tf,tof->to", grad_out, V[J])
        gs = a * (ga - (a * ga).sum(axis=1, keepdims=True))
        grads, gX = self.proj.backward(pc, gV)
        grads[f"{self.name}.score_w"] = np.einsum("to,tof->f", gs, X[J])
        grads[f"{self.name}.score_b"] = gs.sum(axis=0)
        np.add.at(gX, J, gs[:, :, None] * self.score_w[None, None, :])
        return grads, gX


def temporal_compress(comp: TemporalCompressor, X, frames=None):
    return comp.forward(X, frames)[0]


class Enhancer:
    """Per-Gaussian sigmoid gates from spatial features modulate the
    compressed audio and point conditions; the gated audio further gates the
    point branch."""

    def __init__(self, spatial_dim: int, cond_dim: int, rng: np.random.Generator,
                 hidden: int = 64, name: str = "enh"):
        self.name = name
        self.cond_dim = cond_dim
        self.mlp_a = DenseNet(f"{name}.mlp_a", [spatial_dim, hidden, cond_dim], ["relu", "sigmoid"], rng)
        self.mlp_p = DenseNet(f"{name}.mlp_p", [spatial_dim, hidden, cond_dim], ["relu", "sigmoid"], rng)
        self.mlp_ap = DenseNet(f"{name}.mlp_ap", [cond_dim, cond_dim, cond_dim], ["relu", "sigmoid"], rng)

    @property
    def nets(self):
        return (self.mlp_a, self.mlp_p, self.mlp_ap)

    @property
    def params(self):
        out = {}
        for n in self.nets:
            out.update(n.params)
        return out

    def register(self, store, group="net"):
        for n in self.nets:
            n.register(store, group)
        return self

    def forward(self, Fc, a_t, p_t):
        Fc = np.asarray(Fc, dtype=np.float64)
        a_t = np.asarray(a_t, dtype=np.float64).reshape(-1)
        p_t = np.asarray(p_t, dtype=np.float64).reshape(-1)
        if a_t.shape[0] != self.cond_dim or p_t.shape[0] != self.cond_dim:
            raise ShapeError("condition width mismatch")
        ga, ca = self.mlp_a.forward(Fc)
        gp, cp = self.mlp_p.forward(Fc)
        Fa = ga * a_t
        Fp_raw = gp * p_t
        gap, cap = self.mlp_ap.forward(Fa)
        Fp = gap * Fp_raw
        return Fa, Fp, (a_t, p_t, ga, ca, gp, cp, Fa, Fp_raw, gap, cap)

    def backward(self, cache, gFa, gFp):
        """Returns ``(grads, grad_Fc, grad_a_t, grad_p_t)``."""
        if cache is None:
            raise StateError("enhance backward without cache")
        a_t, p_t, ga, ca, gp, cp, Fa, Fp_raw, gap, cap = cache
        gFp_raw = gFp * gap
        grads, gFa_extra = self.mlp_ap.backward(cap, gFp * Fp_raw)
        gFa_tot = gFa + gFa_extra
        g, gFc1 = self.mlp_a.backward(ca, gFa_tot * a_t)
        grads.update(g)
        g, gFc2 = self.mlp_p.backward(cp, gFp_raw * p_t)
        grads.update(g)
        return grads, gFc1 + gFc2, (gFa_tot * ga).sum(axis=0), (gFp_raw * gp).sum(axis=0)


def enhance(net: Enhancer, Fc, a_t, p_t):
    Fa, Fp, _ = net.forward(Fc, a_t, p_t)
    return Fa, Fp


def _normalize_rows(X, label):
    n = np.linalg.norm(X, axis=1)
    bad = np.flatnonzero(n == 0)
    if len(bad):
        raise DegenerateFeatureError(f"zero-norm {label} feature at frame {int(bad[0])}")
    return X / n[:, None], n


def _masked_softmax(M, axis, include_diag):
    M = M.copy()
    if not include_diag:
        np.fill_diagonal(M, -np.inf)
    mx = M.max(axis=axis, keepdims=True)
    e = np.exp(M - mx)
    s = e.sum(axis=axis, keepdims=True)
    return e / s, np.log(s) + mx


def contrastive_loss(A, P, tau: float = 0.07, include_positive: bool = False, with_grad: bool = False):
    """Symmetric cross-modal contrastive loss over T paired rows.

    Per direction and frame t: ``-log(exp(s_tt/tau) / sum_k exp(s_tk/tau))``
    with cosine similarities ``s``; the positive pair k = t is excluded from
    the denominator unless ``include_positive``. The excluded form can be
    negative.
    """
    A = np.asarray(A, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if A.shape != P.shape or A.ndim != 2:
        raise ShapeError(f"paired feature shapes differ: {A.shape} vs {P.shape}")
    T = A.shape[0]
    if T < 2:
        raise InvalidArgumentError("contrastive loss needs T >= 2")
    if not tau > 0:
        raise InvalidArgumentError("temperature must be positive")
    Ah, na = _normalize_rows(A, "audio")
    Ph, npn = _normalize_rows(P, "point")
    S = Ah @ Ph.T
    M = S / tau
    R, lse_r = _masked_softmax(M, 1, include_positive)
    C, lse_c = _masked_softmax(M, 0, include_positive)
    diag = np.diag(M)
    loss = float(np.sum(lse_r[:, 0] - diag) + np.sum(lse_c[0, :] - diag))
    if not with_grad:
        return loss
    gS = (R + C - 2 * np.eye(T)) / tau
    gAh = gS @ Ph
    gPh = gS.T @ Ah
    gA = (gAh - Ah * np.sum(Ah * gAh, axis=1, keepdims=True)) / na[:, None]
    gP = (gPh - Ph * np.sum(Ph * gPh, axis=1, keepdims=True)) / npn[:, None]
    return loss, gA, gP


def retrieval_top1(A, P) -> float:
    """Fraction of frames whose audio row is most cosine-similar to its own
    point row."""
    Ah, _ = _normalize_rows(np.asarray(A, dtype=np.float64), "audio")
    Ph, _ = _normalize_rows(np.asarray(P, dtype=np.float64), "point")
    S = Ah @ Ph.T
    return float(np.mean(np.argmax(S, axis=1) == np.arange(len(S))))
