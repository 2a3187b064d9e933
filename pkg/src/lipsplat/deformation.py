"""AdaIN-style fusion of enhanced conditions into spatial features and the
per-Gaussian deformation decoder."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .nn import DenseNet


class DeformationDecoder:
    """Scale/shift decoders over ``Fa (+) Fp`` modulate the spatial features,
    ``F' = (1 + scale) * Fc + shift``; an adaptive MLP with a zero last layer
    maps ``F'`` to 10 channels split 3/4/3 into (dx, dr, ds).

    ``dx = max_offset * tanh(o[:3])``; ``dr = rot_scale * o[3:7]`` is added
    to raw quaternions; ``ds = scale_scale * o[7:]`` is added to log-scales.
    """

    def __init__(self, spatial_dim: int, cond_dim: int, rng: np.random.Generator,
                 max_offset: float, hidden: int = 64, rot_scale: float = 1.0,
                 scale_scale: float = 1.0, name: str = "deform"):
        self.name = name
        self.spatial_dim, self.cond_dim = spatial_dim, cond_dim
        self.max_offset = max_offset
        self.rot_scale, self.scale_scale = rot_scale, scale_scale
        self.scale_mlp = DenseNet(f"{name}.scale", [2 * cond_dim, hidden, spatial_dim],
                                  ["relu", "identity"], rng)
        self.shift_mlp = DenseNet(f"{name}.shift", [2 * cond_dim, hidden, spatial_dim],
                                  ["relu", "identity"], rng)
        self.adaptive = DenseNet(f"{name}.adaptive", [spatial_dim, hidden, 10],
                                 ["relu", "identity"], rng, zero_last=True)

    @property
    def nets(self):
        return (self.scale_mlp, self.shift_mlp, self.adaptive)

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

    def fuse(self, Fc, Fa, Fp):
        Fc = np.asarray(Fc, dtype=np.float64)
        if Fa.shape != Fp.shape or Fa.shape[0] != Fc.shape[0] or Fc.shape[1] != self.spatial_dim:
            raise ShapeError(f"fusion shapes disagree: Fc {Fc.shape}, Fa {Fa.shape}, Fp {Fp.shape}")
        cat = np.concatenate([Fa, Fp], axis=1)
        scale, cs = self.scale_mlp.forward(cat)
        shift, ch = self.shift_mlp.forward(cat)
        return (1.0 + scale) * Fc + shift, (Fc, scale, cs, ch)

    def fuse_backward(self, cache, g):
        Fc, scale, cs, ch = cache
        grads, gcat1 = self.scale_mlp.backward(cs, g * Fc)
        g2, gcat2 = self.shift_mlp.backward(ch, g)
        grads.update(g2)
        gcat = gcat1 + gcat2
        return grads, g * (1.0 + scale), gcat[:, :self.cond_dim], gcat[:, self.cond_dim:]

    def decode(self, Fc2):
        o, c = self.adaptive.forward(Fc2)
        th = np.tanh(o[:, 0:3])
        dx = self.max_offset * th
        dr = self.rot_scale * o[:, 3:7]
        ds = self.scale_scale * o[:, 7:10]
        return (dx, dr, ds), (c, th)

    def decode_backward(self, cache, gdx, gdr, gds):
        c, th = cache
        go = np.concatenate([gdx * self.max_offset * (1 - th * th),
                             gdr * self.rot_scale, gds * self.scale_scale], axis=1)
        return self.adaptive.backward(c, go)

    def forward(self, Fc, Fa, Fp):
        Fc2, cf = self.fuse(Fc, Fa, Fp)
        delta, cd = self.decode(Fc2)
        return delta, (cf, cd)

    def backward(self, cache, gdx, gdr, gds):
        """Returns ``(grads, grad_Fc, grad_Fa, grad_Fp)``."""
        cf, cd = cache
        grads, gFc2 = self.decode_backward(cd, gdx, gdr, gds)
        g2, gFc, gFa, gFp = self.fuse_backward(cf, gFc2)
        grads.update(g2)
        return grads, gFc, gFa, gFp


def adain_fuse(dec: DeformationDecoder, Fc, Fa, Fp):
    return dec.fuse(Fc, Fa, Fp)[0]


def decode_deformation(dec: DeformationDecoder, Fc2):
    return dec.decode(Fc2)[0]


def apply_deformation(gs, delta):
    """Deformed copy of a Gaussian set (opacity and color untouched)."""
    dx, dr, ds = delta
    out = gs.copy()
    out.means = gs.means + dx
    out.quats = gs.quats + dr
    out.log_scales = gs.log_scales + ds
    return out
