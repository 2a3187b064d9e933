"""Small scene builders shared across test files."""

import numpy as np

from lipsplat.gaussians import GaussianSet
from lipsplat.geometry import Camera, look_at
from lipsplat.nn import logit


def front_camera(width=16, height=16, f=20.0):
    """Identity-pose camera whose principal point sits on a pixel center."""
    return Camera(np.eye(3), np.zeros(3), f, f, width / 2 + 0.5, height / 2 + 0.5, width, height)


def orbit_camera(rng, width=24, height=20, dist=4.0):
    eye = rng.normal(size=3)
    eye = dist * eye / np.linalg.norm(eye)
    R, t = look_at(eye, np.zeros(3))
    return Camera(R, t, 18.0, 18.0, width / 2 + 0.2, height / 2 - 0.3, width, height)


def random_gaussians(rng, n, spread=0.6, scale=(0.05, 0.3), opacity=(0.2, 0.95)):
    return GaussianSet(
        means=rng.normal(scale=spread, size=(n, 3)),
        quats=rng.normal(size=(n, 4)),
        log_scales=np.log(rng.uniform(*scale, size=(n, 3))),
        opacity_logit=logit(rng.uniform(*opacity, size=n)),
        colors=rng.uniform(0.05, 0.95, size=(n, 3)),
        marker=np.zeros(n, dtype=bool),
    )


def splat_at(xy_depth, scale, opacity, color, quat=(1.0, 0, 0, 0)):
    xy_depth = np.atleast_2d(np.asarray(xy_depth, dtype=np.float64))
    n = len(xy_depth)
    return GaussianSet(xy_depth, np.tile(quat, (n, 1)), np.log(np.broadcast_to(scale, (n, 3)).astype(float)),
                       np.broadcast_to(opacity, (n,)).astype(float), np.broadcast_to(color, (n, 3)).astype(float),
                       np.zeros(n, dtype=bool))


def tiny_config(seed=0):
    """A run configuration small enough for a test to train in seconds."""
    from lipsplat.benchmark import SceneConfig
    from lipsplat.conditions import AudioSynthConfig
    from lipsplat.model import ModelConfig
    from lipsplat.training import DeformConfig, LossWeights, RunConfig, StaticConfig

    scene = SceneConfig(image_size=24, focal=33.0, n_static_views=6, n_shell=200, n_lip_points=40,
                        n_other_points=10, audio=AudioSynthConfig(n_frames=30))
    static = StaticConfig(iterations=20, n_init=120, max_count=240, densify_from=5, densify_until=15,
                          densify_every=5, log_every=5)
    model = ModelConfig(cond_dim=8, hidden=16, plane_levels=4, plane_log2_table=10, point_levels=4,
                        point_log2_table=10, a2p_hidden=8, window=2)
    deform = DeformConfig(iterations=10, cl_segment=10, a2p_iterations=20, a2p_pairs=2, a2p_pair_frames=12, cl_synthetic=2,
                          log_every=5)
    return RunConfig(seed=seed, scene=scene, static=static, model=model, deform=deform,
                     loss=LossWeights(patch_size=8, patch_count=2, proxy_levels=2))


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}")
