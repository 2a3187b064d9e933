"""Canonical Gaussian set: storage, random init, densify/prune, PLY I/O."""

from __future__ import annotations

import io
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidArgumentError, ParseError
from .geometry import covariances
from .nn import logit, sigmoid

SH_C0 = 0.28209479177387814
PRUNE_ALPHA = 0.005


@dataclass
class GaussianSet:
    means: np.ndarray  # (N, 3) world units
    quats: np.ndarray  # (N, 4) raw wxyz
    log_scales: np.ndarray  # (N, 3)
    opacity_logit: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3) linear RGB, clamped to [0, 1] when rendered
    marker: np.ndarray  # (N,) bool, landmark markers (benchmark only)

    PARAMS = ("means", "quats", "log_scales", "opacity_logit", "colors")

    def __post_init__(self):
        n = len(self.means)
        if n < 1:
            raise InvalidArgumentError("a Gaussian set needs at least one primitive")
        for f in fields(self):
            a = getattr(self, f.name)
            if len(a) != n:
                raise InvalidArgumentError(f"field {f.name} has {len(a)} rows, expected {n}")

    def __len__(self):
        return len(self.means)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacity(self):
        return sigmoid(self.opacity_logit)

    def covariances(self):
        return covariances(self.quats, self.scales)

    def copy(self) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f.name).copy() for f in fields(self)))

    def take(self, idx) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f.name)[idx] for f in fields(self)))

    def register(self, store, prefix="gs"):
        groups = {"means": "gs_pos", "quats": "gs_rot", "log_scales": "gs_scale",
                  "opacity_logit": "gs_opacity", "colors": "gs_color"}
        for k in self.PARAMS:
            store.register(f"{prefix}.{k}", getattr(self, k), groups[k])
        return self

    def bind(self, store, prefix="gs"):
        for k in self.PARAMS:
            setattr(self, k, store[f"{prefix}.{k}"])

    def equals(self, other: "GaussianSet") -> bool:
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))


def knn_scale(points: np.ndarray, k: int = 3, fallback: float = 0.01) -> np.ndarray:
    """Mean distance to the ``k`` nearest other points, per point."""
    n = len(points)
    if n < 2:
        return np.full(n, fallback)
    kk = min(k, n - 1)
    d, _ = cKDTree(points).query(points, k=kk + 1)
    return d[:, 1:].mean(axis=1)


def init_random(count: int, bbox, seed: int, markers: np.ndarray | None = None,
                marker_scale: float | None = None) -> GaussianSet:
    """Uniform random positions in ``bbox``, identity rotations, kNN scales,
    alpha 0.1, mid-gray. ``markers`` (K, 3) appends flagged landmark
    Gaussians at fixed positions."""
    if count < 1:
        raise InvalidArgumentError("count must be >= 1")
    lo = np.asarray(bbox[0], dtype=np.float64)
    hi = np.asarray(bbox[1], dtype=np.float64)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo) or not np.all(np.isfinite([lo, hi])):
        raise InvalidArgumentError("degenerate bounding box")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(count, 3))
    marker = np.zeros(count, dtype=bool)
    if markers is not None and len(markers):
        pts = np.concatenate([pts, np.asarray(markers, dtype=np.float64)])
        marker = np.concatenate([marker, np.ones(len(markers), dtype=bool)])
    n = len(pts)
    s = knn_scale(pts, 3, fallback=0.01 * float(np.max(hi - lo)))
    if marker_scale is not None:
        s[marker] = marker_scale
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianSet(
        means=pts,
        quats=quats,
        log_scales=np.repeat(np.log(s)[:, None], 3, axis=1),
        opacity_logit=np.full(n, logit(0.1)),
        colors=np.full((n, 3), 0.5),
        marker=marker,
    )


@dataclass
class DensifyResult:
    gaussians: GaussianSet
    parent: np.ndarray  # (N_new,) source row in the old set
    fresh: np.ndarray  # (N_new,) bool, row created by clone/split
    n_cloned: int
    n_split: int
    n_pruned: int


def densify_and_prune(gs: GaussianSet, grad_stat: np.ndarray, grad_threshold: float,
                      split_size: float, rng: np.random.Generator,
                      grad_dir: np.ndarray | None = None, prune_alpha: float = PRUNE_ALPHA,
                      max_count: int | None = None) -> DensifyResult:
    """Clone small / split large high-gradient Gaussians, then prune faint ones.

    ``grad_stat`` is the per-Gaussian screen-space positional gradient
    statistic; ``grad_dir`` (N, 3) the accumulated world-space positional
    gradient, used to offset clones downhill. Markers are never touched.
    """
    n = len(gs)
    grad_stat = np.nan_to_num(np.asarray(grad_stat, dtype=np.float64), nan=0.0)
    scales = gs.scales
    big = scales.max(axis=1) > split_size
    high = (grad_stat > grad_threshold) & ~gs.marker
    if max_count is not None:
        room = max(max_count - n, 0)
        cand = np.flatnonzero(high)
        if len(cand) > room:
            keep = cand[np.argsort(-grad_stat[cand], kind="stable")[:room]]
            high = np.zeros(n, dtype=bool)
            high[keep] = True
    clone = high & ~big
    split = high & big

    rows = [np.arange(n)]
    parent = [np.arange(n)]
    new_parts = {f.name: [] for f in fields(GaussianSet)}

    ci = np.flatnonzero(clone)
    if len(ci):
        off = np.zeros((len(ci), 3))
        if grad_dir is not None:
            d = grad_dir[ci]
            nrm = np.linalg.norm(d, axis=1, keepdims=True)
            off = -np.where(nrm > 0, d / np.where(nrm > 0, nrm, 1), 0) * 0.5 * scales[ci].mean(1, keepdims=True)
        c = gs.take(ci)
        c.means = c.means + off
        for f in fields(GaussianSet):
            new_parts[f.name].append(getattr(c, f.name))
        parent.append(ci)

    si = np.flatnonzero(split)
    if len(si):
        covs = gs.take(si).covariances()
        L = np.linalg.cholesky(covs + 1e-12 * np.eye(3))
        for _ in range(2):
            c = gs.take(si)
            c.means = c.means + np.einsum("nij,nj->ni", L, rng.standard_normal((len(si), 3)))
            c.log_scales = c.log_scales - np.log(1.6)
            for f in fields(GaussianSet):
                new_parts[f.name].append(getattr(c, f.name))
            parent.append(si)

    keep_old = ~split
    out = {}
    for f in fields(GaussianSet):
        base = getattr(gs, f.name)[keep_old]
        out[f.name] = np.concatenate([base] + new_parts[f.name]) if new_parts[f.name] else base.copy()
    par = np.concatenate([parent[0][keep_old]] + parent[1:])
    fresh = np.concatenate([np.zeros(keep_old.sum(), bool), np.ones(len(par) - keep_old.sum(), bool)])
    merged = GaussianSet(**out)

    faint = (merged.opacity < prune_alpha) & ~merged.marker
    if faint.all():
        faint[np.argmax(merged.opacity)] = False
    keep = ~faint
    return DensifyResult(merged.take(keep), par[keep], fresh[keep], len(ci), len(si), int(faint.sum()))


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_REQUIRED = (["x", "y", "z", "opacity"] + [f"scale_{i}" for i in range(3)]
             + [f"rot_{i}" for i in range(4)] + [f"f_dc_{i}" for i in range(3)])
_RGB_COMMENT = "lipsplat color rgb"


def write_ply(path, gs: GaussianSet) -> None:
    """Binary little-endian PLY with double properties.

    Files written here carry ``comment lipsplat color rgb``: their f_dc_*
    values are linear RGB. Files without that comment are read with the
    usual spherical-harmonic DC mapping ``rgb = 0.5 + C0 * f_dc``.
    """
    names = _REQUIRED + ["marker"]
    header = ["ply", "format binary_little_endian 1.0", f"comment {_RGB_COMMENT}",
              f"element vertex {len(gs)}"]
    header += [f"property double {n}" for n in _REQUIRED] + ["property uchar marker", "end_header"]
    dt = np.dtype([(n, "<f8") for n in _REQUIRED] + [("marker", "u1")])
    rec = np.empty(len(gs), dtype=dt)
    for i, a in enumerate("xyz"):
        rec[a] = gs.means[:, i]
    rec["opacity"] = gs.opacity_logit
    for i in range(3):
        rec[f"scale_{i}"] = gs.log_scales[:, i]
        rec[f"f_dc_{i}"] = gs.colors[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = gs.quats[:, i]
    rec["marker"] = gs.marker
    assert names == list(dt.names)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path) -> GaussianSet:
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file (missing 'ply' magic or end_header)", 1)
    nl = data.find(b"\n", end)
    body = data[nl + 1:] if nl >= 0 else b""
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt, count, props, rgb = None, None, [], False
    in_vertex = False
    for ln, line in enumerate(lines, start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise ParseError(f"unsupported PLY format '{line}'", ln)
            fmt = tok[1]
        elif tok[0] == "comment" and " ".join(tok[1:]) == _RGB_COMMENT:
            rgb = True
        elif tok[0] == "element":
            in_vertex = len(tok) == 3 and tok[1] == "vertex"
            if in_vertex:
                try:
                    count = int(tok[2])
                except ValueError:
                    raise ParseError(f"bad vertex count '{tok[2]}'", ln) from None
            elif count is None:
                # elements before vertex would shift the payload; unsupported
                raise ParseError(f"element '{tok[1]}' before vertex not supported", ln)
        elif tok[0] == "property" and in_vertex:
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise ParseError(f"unsupported property declaration '{line}'", ln)
            props.append((tok[2], tok[1]))
    if fmt is None or count is None:
        raise ParseError("header lacks format or vertex element", len(lines))
    names = [p[0] for p in props]
    for r in _REQUIRED:
        if r not in names:
            raise ParseError(f"missing required property '{r}'", len(lines))
    if fmt == "ascii":
        try:
            arr = np.loadtxt(io.BytesIO(body), ndmin=2, max_rows=count)
        except ValueError as e:
            raise ParseError(f"bad ascii payload: {e}", len(lines) + 2) from None
        if arr.shape != (count, len(props)):
            raise ParseError(f"expected {count} rows of {len(props)} values", len(lines) + 2)
        col = {n: arr[:, i] for i, n in enumerate(names)}
    else:
        endian = "<" if fmt == "binary_little_endian" else ">"
        dt = np.dtype([(n, endian + _PLY_TYPES[t]) for n, t in props])
        need = dt.itemsize * count
        if len(body) < need:
            raise ParseError(f"payload truncated: {len(body)} of {need} bytes", nl + 1 + len(body))
        rec = np.frombuffer(body, dtype=dt, count=count)
        col = {n: rec[n].astype(np.float64) for n in names}
    dc = np.stack([col[f"f_dc_{i}"] for i in range(3)], axis=1)
    colors = dc if rgb else 0.5 + SH_C0 * dc
    return GaussianSet(
        means=np.stack([col["x"], col["y"], col["z"]], axis=1),
        quats=np.stack([col[f"rot_{i}"] for i in range(4)], axis=1),
        log_scales=np.stack([col[f"scale_{i}"] for i in range(3)], axis=1),
        opacity_logit=np.asarray(col["opacity"], dtype=np.float64).copy(),
        colors=colors,
        marker=(col["marker"] != 0) if "marker" in col else np.zeros(count, dtype=bool),
    )
