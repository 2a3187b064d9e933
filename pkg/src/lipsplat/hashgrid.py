"""Multi-resolution hashed feature grids (2D/3D) and the tri-plane encoder.

Level ``l`` has resolution ``N_l = floor(N_min * b**l)`` cells per axis, so
``N_l + 1`` vertices per axis. A level whose vertex count fits the table
size is indexed densely (row-major, first axis fastest); otherwise vertex
coordinates are hashed with the XOR-of-primes scheme. All levels share one
flat table array of shape (rows, D); ``offsets`` marks each level's slice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .errors import InvalidArgumentError

PRIMES = (1, 2654435761, 805459861)


@dataclass
class GridCache:
    q: np.ndarray  # (B, dim) clamped queries
    inside: np.ndarray  # (B, dim) bool, coordinate was not clamped
    idx: np.ndarray  # (B, L, C) global table rows
    w: np.ndarray  # (B, L, C) interpolation weights
    frac: np.ndarray  # (B, L, dim)


def hash_vertex(coords: np.ndarray, table_size: int) -> np.ndarray:
    """XOR-prime spatial hash of integer vertex coords (..., dim) modulo a
    power-of-two table size."""
    c = coords.astype(np.uint64)
    h = np.zeros(c.shape[:-1], dtype=np.uint64)
    for i in range(c.shape[-1]):
        h ^= c[..., i] * np.uint64(PRIMES[i])
    return (h & np.uint64(table_size - 1)).astype(np.int64)


@njit(cache=True, parallel=True)
def _encode_kernel(u, res, direct, offsets, corners, table_size, table, out, idx, w, frac):
    B, dim = u.shape
    L = res.shape[0]
    C = corners.shape[0]
    D = table.shape[1]
    mask = np.uint64(table_size - 1)
    for b in prange(B):
        for l in range(L):
            r = res[l]
            for k in range(dim):
                x = u[b, k] * r
                base = min(np.floor(x), r - 1)
                frac[b, l, k] = x - base
            for d in range(D):
                out[b, l, d] = 0.0
            for c in range(C):
                wc = 1.0
                slot = 0
                h = np.uint64(0)
                stride = 1
                for k in range(dim):
                    f = frac[b, l, k]
                    v = np.int64(min(np.floor(u[b, k] * r), r - 1)) + corners[c, k]
                    if corners[c, k] == 1:
                        wc *= f
                    else:
                        wc *= 1.0 - f
                    if direct[l]:
                        slot += v * stride
                        stride *= r + 1
                    else:
                        p = np.uint64(1) if k == 0 else (np.uint64(2654435761) if k == 1 else np.uint64(805459861))
                        h ^= np.uint64(v) * p
                if not direct[l]:
                    slot = np.int64(h & mask)
                row = slot + offsets[l]
                idx[b, l, c] = row
                w[b, l, c] = wc
                for d in range(D):
                    out[b, l, d] += wc * table[row, d]


@njit(cache=True)
def _scatter_kernel(idx, w, g, table_grad):
    # sequential in query order: deterministic accumulation
    B, L, C = idx.shape
    D = g.shape[2]
    for b in range(B):
        for l in range(L):
            for c in range(C):
                row = idx[b, l, c]
                wc = w[b, l, c]
                for d in range(D):
                    table_grad[row, d] += wc * g[b, l, d]


@njit(cache=True, parallel=True)
def _query_grad_kernel(idx, frac, corners, res, table, g, qgrad):
    B, L, C = idx.shape
    dim = frac.shape[2]
    D = table.shape[1]
    for b in prange(B):
        for k in range(dim):
            qgrad[b, k] = 0.0
        for l in range(L):
            for c in range(C):
                row = idx[b, l, c]
                val = 0.0
                for d in range(D):
                    val += table[row, d] * g[b, l, d]
                for k in range(dim):
                    dw = 1.0 if corners[c, k] == 1 else -1.0
                    for i in range(dim):
                        if i != k:
                            f = frac[b, l, i]
                            dw *= f if corners[c, i] == 1 else 1.0 - f
                    qgrad[b, k] += dw * val * res[l]


class HashGrid:
    def __init__(self, dim: int, n_levels: int = 8, n_features: int = 4, log2_table: int = 14,
                 base_res: int = 4, growth: float = 1.45, bbox=None,
                 rng: np.random.Generator | None = None, name: str = "grid",
                 init_scale: float = 1e-4):
        if dim not in (2, 3):
            raise InvalidArgumentError("grid dimensionality must be 2 or 3")
        if n_levels < 1 or n_features < 1:
            raise InvalidArgumentError("need at least one level and one feature")
        self.dim = dim
        self.n_levels = n_levels
        self.n_features = n_features
        self.table_size = 1 << log2_table
        self.base_res = base_res
        self.growth = growth
        self.name = name
        if bbox is None:
            bbox = (np.zeros(dim), np.ones(dim))
        self.lo = np.asarray(bbox[0], dtype=np.float64).reshape(dim)
        self.hi = np.asarray(bbox[1], dtype=np.float64).reshape(dim)
        if np.any(self.hi <= self.lo):
            raise InvalidArgumentError("degenerate bounding box")
        self.resolutions = [int(np.floor(base_res * growth ** l)) for l in range(n_levels)]
        if any(b < a for a, b in zip(self.resolutions, self.resolutions[1:])) or self.resolutions[0] < 1:
            raise InvalidArgumentError("level resolutions must be positive and nondecreasing")
        self.direct = [(r + 1) ** dim <= self.table_size for r in self.resolutions]
        sizes = [(r + 1) ** dim if d else self.table_size for r, d in zip(self.resolutions, self.direct)]
        self.level_sizes = sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        rng = rng or np.random.default_rng(0)
        self.table = rng.uniform(-init_scale, init_scale, size=(int(self.offsets[-1]), n_features))
        # corner bit patterns, (C, dim)
        self.corners = np.array([[(c >> i) & 1 for i in range(dim)] for c in range(1 << dim)],
                                dtype=np.int64)

    @property
    def out_dim(self) -> int:
        return self.n_levels * self.n_features

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.table": self.table}

    def register(self, store, group="grid"):
        store.register(f"{self.name}.table", self.table, group)
        return self

    def bind(self, store):
        """Re-point at the store's array (after a checkpoint load)."""
        self.table = store[f"{self.name}.table"]

    def vertex_slot(self, level: int, coords: np.ndarray) -> np.ndarray:
        """Slot within the level's table for integer vertex coords (..., dim)."""
        coords = np.asarray(coords, dtype=np.int64)
        if self.direct[level]:
            stride = (self.resolutions[level] + 1) ** np.arange(self.dim)
            return (coords * stride).sum(-1)
        return hash_vertex(coords, self.table_size)

    def forward(self, q):
        q = np.asarray(q, dtype=np.float64)
        single = q.ndim == 1
        q = np.atleast_2d(q)
        if q.shape[1] != self.dim:
            raise InvalidArgumentError(f"expected {self.dim}-d queries, got {q.shape}")
        if not np.all(np.isfinite(q)):
            raise InvalidArgumentError("non-finite query")
        u = (q - self.lo) / (self.hi - self.lo)
        inside = (u >= 0.0) & (u <= 1.0)
        u = np.clip(u, 0.0, 1.0)
        B, L, C = len(q), self.n_levels, len(self.corners)
        idx = np.empty((B, L, C), dtype=np.int64)
        w = np.empty((B, L, C))
        frac = np.empty((B, L, self.dim))
        out = np.empty((B, L, self.n_features))
        _encode_kernel(u, np.asarray(self.resolutions, dtype=np.int64), np.asarray(self.direct),
                       self.offsets, self.corners, self.table_size, self.table, out, idx, w, frac)
        out = out.reshape(B, L * self.n_features)
        cache = GridCache(u, inside, idx, w, frac)
        return (out[0] if single else out), cache

    def encode(self, q):
        return self.forward(q)[0]

    def __call__(self, q):
        return self.forward(q)[0]

    def backward(self, cache: GridCache, grad_out, query_grad: bool = True):
        """Returns ``(table_grad, query_grad)``; the query gradient is None
        when not requested."""
        g = np.asarray(grad_out, dtype=np.float64).reshape(len(cache.q), self.n_levels, self.n_features)
        table_grad = np.zeros_like(self.table)
        _scatter_kernel(cache.idx, cache.w, g, table_grad)
        if not query_grad:
            return table_grad, None
        qgrad = np.empty((len(cache.q), self.dim))
        _query_grad_kernel(cache.idx, cache.frac, self.corners, np.asarray(self.resolutions, dtype=np.float64),
                           self.table, g, qgrad)
        qgrad = qgrad / (self.hi - self.lo) * cache.inside
        return table_grad, qgrad


def grid_encode(enc: HashGrid, q):
    return enc.encode(q)


def grid_encode_backward(enc: HashGrid, q, grad_out):
    q = np.asarray(q, dtype=np.float64)
    _, cache = enc.forward(np.atleast_2d(q))
    tg, qg = enc.backward(cache, np.atleast_2d(grad_out))
    return tg, (qg[0] if q.ndim == 1 else qg)


PLANES = (("xy", (0, 1)), ("yz", (1, 2)), ("xz", (0, 2)))


class TriPlane:
    """Concatenation XY, YZ, XZ of three independent 2D hash grids."""

    def __init__(self, n_levels: int = 12, n_features: int = 2, log2_table: int = 17,
                 base_res: int = 8, growth: float = 1.287, bbox=None,
                 rng: np.random.Generator | None = None, name: str = "triplane"):
        if bbox is None:
            bbox = (np.zeros(3), np.ones(3))
        lo = np.asarray(bbox[0], dtype=np.float64)
        hi = np.asarray(bbox[1], dtype=np.float64)
        rng = rng or np.random.default_rng(0)
        self.name = name
        self.planes = [HashGrid(2, n_levels, n_features, log2_table, base_res, growth,
                                (lo[list(ax)], hi[list(ax)]), rng, f"{name}.{tag}")
                       for tag, ax in PLANES]
        self.n_levels, self.n_features = n_levels, n_features

    @property
    def out_dim(self) -> int:
        return 3 * self.n_levels * self.n_features

    @property
    def params(self):
        out = {}
        for p in self.planes:
            out.update(p.params)
        return out

    def register(self, store, group="grid"):
        for p in self.planes:
            p.register(store, group)
        return self

    def bind(self, store):
        for p in self.planes:
            p.bind(store)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        outs, caches = [], []
        for plane, (_, ax) in zip(self.planes, PLANES):
            o, c = plane.forward(x[:, list(ax)])
            outs.append(o)
            caches.append(c)
        out = np.concatenate(outs, axis=1)
        return (out[0] if single else out), caches

    def encode(self, x):
        return self.forward(x)[0]

    __call__ = encode

    def backward(self, caches, grad_out, query_grad: bool = True):
        """Returns ``(table_grads by param name, query_grad (B, 3) or None)``."""
        grad_out = np.atleast_2d(grad_out)
        w = self.n_levels * self.n_features
        grads = {}
        qgrad = np.zeros((grad_out.shape[0], 3))
        for i, (plane, (_, ax)) in enumerate(zip(self.planes, PLANES)):
            tg, qg = plane.backward(caches[i], grad_out[:, i * w:(i + 1) * w], query_grad)
            grads[f"{plane.name}.table"] = tg
            if query_grad:
                qgrad[:, list(ax)] += qg
        return grads, (qgrad if query_grad else None)


def triplane_encode(enc: TriPlane, x):
    return enc.encode(x)
