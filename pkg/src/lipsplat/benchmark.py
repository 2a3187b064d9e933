"""Synthetic talking-blob benchmark and the metric suite.

The ground-truth head is an ellipsoidal shell of flat Gaussians with painted
features (hair cap, brows, eyes, nose, lips). A smooth analytic field moves
the lips and chin: with opening ``o`` and spread ``s``,

    dy = amp * o * (0.7 * w_low(p) - 0.3 * w_up(p))
    dx = amp * s * (p_x - m_x) * (w_low(p) + w_up(p))

where ``w_up``/``w_low`` are soft masks above/below the mouth line around
the mouth center ``m``. Mouth-interior Gaussians additionally stretch
vertically with the lip gap. The same field moves the lip point cloud and
the eight landmark markers.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .conditions import (AudioFeatureSequence, AudioSynthConfig, f32_exact, load_features,
                         load_lip_points, save_features, save_lip_points, synthesize_benchmark_audio)
from .errors import ParseError, ShapeError
from .gaussians import GaussianSet, read_ply, write_ply
from .geometry import Camera, look_at
from .losses import ssim
from .nn import logit
from .raster import RasterSettings, rasterize

IMG_MAGIC = b"PTIMG1\0\0"
N_MARKERS = 8


@dataclass
class SceneConfig:
    image_size: int = 64
    focal: float = 88.0
    distance: float = 4.0
    n_static_views: int = 100
    static_yaw_deg: float = 60.0
    static_pitch_deg: float = 30.0
    talk_yaw_deg: float = 0.0
    talk_pitch_deg: float = 0.0
    head_radii: tuple = (0.8, 1.0, 0.85)
    n_shell: int = 1400
    mouth_y: float = 0.45
    mouth_half_width: float = 0.28
    lip_gap: float = 0.03
    lip_thickness: float = 0.07
    motion_amplitude: float = 0.3  # lower-lip travel at full opening, world units
    rest_opening: float = 0.4
    n_lip_points: int = 200
    n_other_points: int = 60
    box_half: float = 1.3
    audio: AudioSynthConfig = field(default_factory=AudioSynthConfig)
    train_fraction: float = 0.8

    @property
    def bbox(self):
        h = self.box_half
        return (np.full(3, -h), np.full(3, h))

    @property
    def extent(self) -> float:
        """Scene extent: side length of the scene bounding box."""
        return 2.0 * self.box_half


def scene_config_from_dict(d: dict) -> SceneConfig:
    d = dict(d)
    audio = AudioSynthConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                                for k, v in d.pop("audio", {}).items()})
    d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
    return SceneConfig(audio=audio, **d)


# ------------------------------------------------------------------ geometry

def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.cos(phi), np.sin(theta) * np.sin(phi)], axis=1)


def _quat_from_z(normals):
    """Quaternions (wxyz) rotating +z onto each unit normal."""
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, normals)
    c = normals @ z
    q = np.concatenate([(1 + c)[:, None], axis], axis=1)
    flip = c < -1 + 1e-9
    q[flip] = [0.0, 1.0, 0.0, 0.0]
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def mouth_center(cfg: SceneConfig) -> np.ndarray:
    rx, ry, rz = cfg.head_radii
    y = cfg.mouth_y
    z = -rz * np.sqrt(1 - (y / ry) ** 2)
    return np.array([0.0, y, z - 0.015])


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def mouth_weights(p, cfg: SceneConfig):
    m = mouth_center(cfg)
    rel = p - m
    fr = np.exp(-(rel[:, 0] ** 2 / (2 * 0.32 ** 2) + rel[:, 2] ** 2 / (2 * 0.25 ** 2)))
    up = fr * _sig(-rel[:, 1] / 0.02) * np.exp(-np.maximum(-rel[:, 1] - 0.06, 0) ** 2 / (2 * 0.08 ** 2))
    low = fr * _sig(rel[:, 1] / 0.02) * np.exp(-np.maximum(rel[:, 1] - 0.06, 0) ** 2 / (2 * 0.3 ** 2))
    return up, low, rel


def mouth_displacement(p, opening, spread, cfg: SceneConfig):
    """Displacement (N, 3) of rest points ``p`` for one mouth state."""
    up, low, rel = mouth_weights(np.atleast_2d(p), cfg)
    d = np.zeros((len(up), 3))
    d[:, 1] = cfg.motion_amplitude * opening * (0.7 * low - 0.3 * up)
    d[:, 0] = cfg.motion_amplitude * spread * rel[:, 0] * (low + up)
    return d


@dataclass
class HeadModel:
    gaussians: GaussianSet  # rest state (opening 0, spread 0)
    interior: np.ndarray  # indices of mouth-interior Gaussians
    markers: np.ndarray  # indices of the landmark markers
    template: np.ndarray  # (N_template, 3) rest lip/head point cloud
    lip_index: np.ndarray


def build_head(cfg: SceneConfig, seed: int) -> HeadModel:
    rng = np.random.default_rng(seed)
    rx, ry, rz = cfg.head_radii
    radii = np.array([rx, ry, rz])
    means, quats, scales, colors, alphas = [], [], [], [], []

    def add(p, q, s, c, a):
        p = np.atleast_2d(p)
        n = len(p)
        means.append(p)
        quats.append(np.broadcast_to(np.atleast_2d(q), (n, 4)))
        scales.append(np.broadcast_to(np.atleast_2d(s), (n, 3)))
        colors.append(np.broadcast_to(np.atleast_2d(c), (n, 3)))
        alphas.append(np.broadcast_to(np.atleast_1d(a), (n,)))

    # skin shell with hair cap, smooth tint variation
    u = _fibonacci_sphere(cfg.n_shell)
    p = u * radii
    nrm = u / radii
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    skin = np.array([0.87, 0.66, 0.52])
    tint = 0.06 * np.sin(3 * p[:, 0] + 1.0)[:, None] * np.array([1.0, 0.6, 0.4])
    shade = (0.92 + 0.08 * -p[:, 2:3] / rz)
    col = (skin + tint) * shade
    hair = (p[:, 1] < -0.35 + 0.5 * np.maximum(p[:, 2], 0)) | (p[:, 2] > 0.25)
    col[hair] = np.array([0.25, 0.16, 0.1]) + 0.04 * np.sin(7 * p[hair, 0:1])
    cheek = np.exp(-((np.abs(p[:, 0]) - 0.45) ** 2 + (p[:, 1] - 0.2) ** 2) / (2 * 0.12 ** 2))
    col = col * (1 - 0.25 * cheek[:, None]) + 0.25 * cheek[:, None] * np.array([0.9, 0.45, 0.45])
    spacing = np.sqrt(4 * np.pi * np.mean(radii) ** 2 / cfg.n_shell)
    add(p, _quat_from_z(nrm), np.tile([0.6 * spacing, 0.6 * spacing, 0.02], (len(p), 1)),
        np.clip(col, 0, 1), 0.95)

    def surface(x, y, lift=0.01):
        z = -rz * np.sqrt(np.maximum(1 - (x / rx) ** 2 - (y / ry) ** 2, 0.05))
        return np.array([x, y, z - lift])

    def flat(s_xy, thick=0.015):
        return [s_xy[0], s_xy[1], thick]

    # eyes, brows, nose
    for sx in (-1, 1):
        add(surface(0.3 * sx, -0.15), [1, 0, 0, 0], flat([0.11, 0.06]), [0.95, 0.95, 0.93], 0.98)
        add(surface(0.3 * sx, -0.15, 0.025), [1, 0, 0, 0], flat([0.045, 0.045]), [0.1, 0.15, 0.3], 0.99)
        ang = 0.15 * sx
        add(surface(0.3 * sx, -0.33), [np.cos(ang / 2), 0, 0, np.sin(ang / 2)], flat([0.14, 0.03]),
            [0.2, 0.12, 0.08], 0.97)
    add(surface(0.0, 0.12, 0.06), [1, 0, 0, 0], [0.07, 0.12, 0.06], [0.8, 0.55, 0.45], 0.9)

    # lips: two rows of elongated Gaussians following a shallow arc
    m = mouth_center(cfg)
    lip_idx = []
    base = sum(len(a) for a in means)
    xs = np.linspace(-cfg.mouth_half_width, cfg.mouth_half_width, 9)
    for side in (-1, 1):  # -1 upper, +1 lower
        for x in xs:
            frac = 1 - (x / cfg.mouth_half_width) ** 2
            off = side * (cfg.lip_gap / 2 + cfg.lip_thickness / 2 * (0.4 + 0.6 * frac))
            pt = surface(x, m[1] + off, 0.015 + 0.01 * frac)
            add(pt, [1, 0, 0, 0], [0.045, cfg.lip_thickness * (0.25 + 0.25 * frac), 0.02],
                [0.72, 0.22, 0.25] if side > 0 else [0.66, 0.2, 0.24], 0.97)
            lip_idx.append(base)
            base += 1
    # mouth interior: dark row just behind the lips
    interior = []
    for x in np.linspace(-0.8, 0.8, 5) * cfg.mouth_half_width:
        pt = surface(x, m[1], 0.008)
        add(pt, [1, 0, 0, 0], [0.06, cfg.lip_gap * 0.6, 0.02], [0.12, 0.03, 0.04], 0.99)
        interior.append(base)
        base += 1
    # landmark markers: corners, three per lip
    mk = []
    pts = [(-cfg.mouth_half_width * 1.02, 0.0), (cfg.mouth_half_width * 1.02, 0.0)]
    for side in (-1, 1):
        for x in (-0.5, 0.0, 0.5):
            frac = 1 - x ** 2
            pts.append((x * cfg.mouth_half_width,
                        side * (cfg.lip_gap / 2 + cfg.lip_thickness * (0.4 + 0.6 * frac) * 0.5)))
    for x, dy in pts:
        add(surface(x, m[1] + dy, 0.03), [1, 0, 0, 0], [0.025, 0.025, 0.02], [0.3, 0.04, 0.08], 0.95)
        mk.append(base)
        base += 1

    means = np.concatenate(means)
    n = len(means)
    marker = np.zeros(n, dtype=bool)
    marker[mk] = True
    gs = GaussianSet(means, np.concatenate(quats), np.log(np.concatenate(scales)),
                     logit(np.concatenate(alphas)), np.concatenate(colors), marker)

    # lip point cloud template: lip surfaces plus some static-ish face points
    ang = rng.uniform(-1, 1, size=cfg.n_lip_points)
    side = np.where(np.arange(cfg.n_lip_points) % 2 == 0, -1, 1)
    fr = 1 - ang ** 2
    dy = side * (cfg.lip_gap / 2 + cfg.lip_thickness * (0.4 + 0.6 * fr) * rng.uniform(0.1, 1.0, cfg.n_lip_points))
    lips = np.stack([surface(a * cfg.mouth_half_width, m[1] + d, 0.02) for a, d in zip(ang, dy)])
    ox = rng.uniform(-0.5, 0.5, size=cfg.n_other_points)
    oy = rng.uniform(0.15, 0.85, size=cfg.n_other_points)
    other = np.stack([surface(a, b, 0.0) for a, b in zip(ox, oy)])
    template = f32_exact(np.concatenate([other, lips]))
    lip_index = np.arange(cfg.n_other_points, cfg.n_other_points + cfg.n_lip_points)
    return HeadModel(gs, np.array(interior), np.array(mk), template, lip_index)


def animate(head: HeadModel, opening: float, spread: float, cfg: SceneConfig) -> GaussianSet:
    """Ground-truth Gaussian set for one mouth state."""
    gs = head.gaussians.copy()
    gs.means = gs.means + mouth_displacement(gs.means, opening, spread, cfg)
    i = head.interior
    stretch = (cfg.lip_gap + cfg.motion_amplitude * opening) / cfg.lip_gap
    gs.log_scales[i, 1] += np.log(stretch)
    gs.log_scales[i, 0] += np.log1p(cfg.motion_amplitude * spread)
    return gs


def marker_positions(head: HeadModel, opening: float, spread: float, cfg: SceneConfig) -> np.ndarray:
    p = head.gaussians.means[head.markers]
    return p + mouth_displacement(p, opening, spread, cfg)


def lip_cloud(head: HeadModel, track: np.ndarray, cfg: SceneConfig) -> np.ndarray:
    """Full template point sets (T, N_template, 3) for a mouth track."""
    return np.stack([f32_exact(head.template + mouth_displacement(head.template, o, s, cfg))
                     for o, s in track])


def synthetic_pairs(head: HeadModel, cfg: SceneConfig, n_pairs: int, n_frames: int, seed: int):
    """Independent (audio features, template clouds) sequences for
    supervising the audio-to-point generator. Each pair draws its own audio
    seed, so the nuisance bands differ between pairs."""
    seeds = np.random.default_rng([seed, 4]).integers(0, 2 ** 31, size=n_pairs)
    out = []
    for s in seeds:
        audio, track = synthesize_benchmark_audio(replace(cfg.audio, n_frames=n_frames), int(s))
        out.append((audio.features, lip_cloud(head, track, cfg)))
    return out


# ------------------------------------------------------------------ cameras

def orbit_camera(cfg: SceneConfig, yaw_deg: float, pitch_deg: float) -> Camera:
    yaw, pitch = np.radians(yaw_deg), np.radians(pitch_deg)
    d = cfg.distance
    eye = d * np.array([np.sin(yaw) * np.cos(pitch), np.sin(pitch), -np.cos(yaw) * np.cos(pitch)])
    R, t = look_at(eye, np.zeros(3))
    c = cfg.image_size / 2
    return Camera(R, t, cfg.focal, cfg.focal, c, c, cfg.image_size, cfg.image_size)


def static_cameras(cfg: SceneConfig, rng) -> list[Camera]:
    n = cfg.n_static_views
    # stratified over a yaw/pitch grid, jittered
    k = int(np.ceil(np.sqrt(n)))
    cams = []
    for i in range(n):
        a, b = (i % k + rng.uniform()) / k, (i // k + rng.uniform()) / k
        cams.append(orbit_camera(cfg, (2 * a - 1) * cfg.static_yaw_deg, (2 * b - 1) * cfg.static_pitch_deg))
    return cams


def talk_cameras(cfg: SceneConfig, n: int) -> list[Camera]:
    # a fixed viewpoint: with zero motion amplitude every talk frame is identical
    cam = orbit_camera(cfg, cfg.talk_yaw_deg, cfg.talk_pitch_deg)
    return [cam] * n


# ------------------------------------------------------------------ file io

def save_image_f32(path, img: np.ndarray) -> None:
    H, W, C = img.shape
    with open(path, "wb") as f:
        f.write(IMG_MAGIC)
        f.write(struct.pack("<III", H, W, C))
        f.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def load_image_f32(path) -> np.ndarray:
    data = open(path, "rb").read()
    if data[:8] != IMG_MAGIC:
        raise ParseError("bad image dump magic", 0)
    if len(data) < 20:
        raise ParseError("truncated image dump header", len(data))
    H, W, C = struct.unpack_from("<III", data, 8)
    if len(data) != 20 + 4 * H * W * C:
        raise ParseError("image dump payload size mismatch", len(data))
    return np.frombuffer(data, dtype="<f4", offset=20).astype(np.float64).reshape(H, W, C)


def linear_to_srgb(x):
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def save_png(path, img: np.ndarray) -> None:
    """8-bit sRGB PNG from a linear image in [0, 1]."""
    from PIL import Image

    px = np.round(linear_to_srgb(img) * 255.0).astype(np.uint8)
    Image.fromarray(px, "RGB").save(path, optimize=False, compress_level=6)


CAMERA_HEADER = "# index fx fy cx cy width height near r00 r01 r02 r10 r11 r12 r20 r21 r22 t0 t1 t2"


def save_cameras(path, cams: list[Camera]) -> None:
    lines = [CAMERA_HEADER]
    for i, c in enumerate(cams):
        vals = [c.fx, c.fy, c.cx, c.cy, c.width, c.height, c.near, *c.R.reshape(-1), *c.t]
        lines.append(" ".join([str(i)] + [repr(float(v)) if not isinstance(v, int) else str(v) for v in vals]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_cameras(path) -> list[Camera]:
    cams = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 20:
            raise ParseError(f"camera record needs 20 fields, got {len(tok)}", ln)
        try:
            v = [float(x) for x in tok[1:]]
            cams.append(Camera(np.array(v[7:16]).reshape(3, 3), np.array(v[16:19]), v[0], v[1], v[2], v[3],
                               int(v[4]), int(v[5]), v[6]))
        except ValueError as e:
            raise ParseError(f"bad camera record: {e}", ln) from None
    return cams


def save_matrix(path, a: np.ndarray, header: str) -> None:
    a = np.asarray(a)
    rows = a.reshape(a.shape[0], -1)
    lines = [f"# {header}", f"# shape {' '.join(map(str, a.shape))}"]
    lines += [" ".join(repr(float(x)) for x in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def load_matrix(path) -> np.ndarray:
    shape = None
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.startswith("# shape"):
            shape = tuple(int(x) for x in line.split()[2:])
        elif line.startswith("#") or not line.strip():
            continue
        else:
            try:
                rows.append([float(x) for x in line.split()])
            except ValueError as e:
                raise ParseError(str(e), ln) from None
    a = np.array(rows, dtype=np.float64)
    return a.reshape(shape) if shape else a


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ------------------------------------------------------------------ scene

@dataclass
class BenchmarkScene:
    config: SceneConfig
    seed: int
    head: HeadModel
    static_cams: list
    static_images: np.ndarray  # (V, H, W, 3)
    talk_cams: list
    talk_images: np.ndarray  # (T, H, W, 3)
    audio: AudioFeatureSequence
    track: np.ndarray  # (T, 2) opening, spread
    lip_points: np.ndarray  # (T, N_template, 3)
    landmarks: np.ndarray  # (T, K, 2)
    marker_rest: np.ndarray  # (K, 3) marker centers at the static rest state

    @property
    def n_train(self) -> int:
        return int(round(self.config.train_fraction * len(self.talk_cams)))

    @property
    def lip_index(self):
        return self.head.lip_index


def render_gt(gs: GaussianSet, cam: Camera, settings: RasterSettings | None = None) -> np.ndarray:
    fb, _ = rasterize(gs, cam, settings)
    return f32_exact(fb.color)


def generate_scene(cfg: SceneConfig, seed: int) -> BenchmarkScene:
    rng = np.random.default_rng(seed)
    head = build_head(cfg, int(rng.integers(2 ** 31)))
    audio, track = synthesize_benchmark_audio(cfg.audio, int(rng.integers(2 ** 31)))
    scams = static_cameras(cfg, rng)
    tcams = talk_cameras(cfg, audio.n_frames)
    rest = animate(head, cfg.rest_opening, 0.0, cfg)
    static_images = np.stack([render_gt(rest, c) for c in scams])
    talk_images, landmarks = [], []
    for (o, s), cam in zip(track, tcams):
        talk_images.append(render_gt(animate(head, o, s, cfg), cam))
        landmarks.append(cam.project_points(marker_positions(head, o, s, cfg)))
    return BenchmarkScene(cfg, seed, head, scams, static_images, tcams, np.stack(talk_images), audio,
                          track, lip_cloud(head, track, cfg), np.stack(landmarks),
                          marker_positions(head, cfg.rest_opening, 0.0, cfg))


def write_frames(root: Path, images: np.ndarray, png: bool = True) -> list[Path]:
    root.mkdir(parents=True, exist_ok=True)
    out = []
    for i, img in enumerate(images):
        p = root / f"{i:04d}.ptimg"
        save_image_f32(p, img)
        out.append(p)
        if png:
            q = root / f"{i:04d}.png"
            save_png(q, img)
            out.append(q)
    return out


def read_frames(root: Path) -> np.ndarray:
    files = sorted(Path(root).glob("*.ptimg"))
    return np.stack([load_image_f32(f) for f in files])


def write_scene(scene: BenchmarkScene, out: Path) -> Path:
    """Dataset layout::

        manifest.json            config, seed, file list with sha256
        head.ply                 ground-truth rest Gaussians (markers flagged)
        head.json                interior / marker indices
        template.lip, lip_index.txt
        static/cameras.txt, static/frames/NNNN.{ptimg,png}
        talk/cameras.txt, talk/frames/..., talk/audio.feat, talk/lips.lip,
        talk/track.txt, talk/landmarks.txt
        marker_rest.txt
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    write_ply(out / "head.ply", scene.head.gaussians)
    (out / "head.json").write_text(json.dumps({"interior": scene.head.interior.tolist(),
                                               "markers": scene.head.markers.tolist()}) + "\n")
    save_lip_points(out / "template.lip", scene.head.template[None])
    save_matrix(out / "lip_index.txt", scene.head.lip_index[:, None], "lip template rows")
    save_matrix(out / "marker_rest.txt", scene.marker_rest, "marker centers at rest, world units")
    files += [out / n for n in ("head.ply", "head.json", "template.lip", "lip_index.txt", "marker_rest.txt")]
    (out / "static").mkdir(exist_ok=True)
    save_cameras(out / "static" / "cameras.txt", scene.static_cams)
    files.append(out / "static" / "cameras.txt")
    files += write_frames(out / "static" / "frames", scene.static_images)
    talk = out / "talk"
    talk.mkdir(exist_ok=True)
    save_cameras(talk / "cameras.txt", scene.talk_cams)
    save_features(talk / "audio.feat", scene.audio)
    save_lip_points(talk / "lips.lip", scene.lip_points)
    save_matrix(talk / "track.txt", scene.track, "opening spread")
    save_matrix(talk / "landmarks.txt", scene.landmarks, "landmark pixels (T, K, 2)")
    files += [talk / n for n in ("cameras.txt", "audio.feat", "lips.lip", "track.txt", "landmarks.txt")]
    files += write_frames(talk / "frames", scene.talk_images)
    manifest = {
        "format": "lipsplat-benchmark",
        "version": 1,
        "seed": scene.seed,
        "config": _jsonable(asdict(scene.config)),
        "n_train": scene.n_train,
        "files": {str(f.relative_to(out)): _sha256(f) for f in sorted(files)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (tuple, list)):
        return [_jsonable(v) for v in d]
    return d


def read_scene(root) -> BenchmarkScene:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise ParseError(f"no manifest.json in {root}") from None
    if manifest.get("format") != "lipsplat-benchmark" or manifest.get("version") != 1:
        raise ParseError("unsupported dataset manifest version")
    cfg = scene_config_from_dict(manifest["config"])
    gs = read_ply(root / "head.ply")
    meta = json.loads((root / "head.json").read_text())
    template = load_lip_points(root / "template.lip")[0]
    lip_index = load_matrix(root / "lip_index.txt").reshape(-1).astype(np.int64)
    head = HeadModel(gs, np.array(meta["interior"]), np.array(meta["markers"]), template, lip_index)
    talk = root / "talk"
    return BenchmarkScene(
        cfg, manifest["seed"], head,
        load_cameras(root / "static" / "cameras.txt"), read_frames(root / "static" / "frames"),
        load_cameras(talk / "cameras.txt"), read_frames(talk / "frames"),
        load_features(talk / "audio.feat"), load_matrix(talk / "track.txt"),
        load_lip_points(talk / "lips.lip"), load_matrix(talk / "landmarks.txt"),
        load_matrix(root / "marker_rest.txt"),
    )


def verify_manifest(root) -> list[str]:
    """Paths whose checksum does not match the manifest."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    return [p for p, h in manifest["files"].items() if not (root / p).exists() or _sha256(root / p) != h]


# ------------------------------------------------------------------ metrics

def metric_psnr(img, ref) -> float:
    img, ref = np.asarray(img, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ShapeError(f"image shapes differ: {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def metric_lmd(pred, ref) -> float:
    pred, ref = np.asarray(pred, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape or pred.shape[-1] != 2:
        raise ShapeError(f"landmark shapes differ: {pred.shape} vs {ref.shape}")
    return float(np.linalg.norm(pred - ref, axis=-1).mean())


def metric_ssim(img, ref) -> float:
    return ssim(img, ref)
