"""Quaternion and covariance algebra, pinhole camera, EWA projection.

Camera convention: right-handed, OpenCV style. View space has x right,
y down, z forward; a world point X maps to view space as ``R @ X + t`` and
to pixels as ``(fx * x / z + cx, fy * y / z + cy)``.

Quaternions are stored (w, x, y, z) and may be unnormalized; every consumer
normalizes first and the backward passes include the normalization Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, SingularCovarianceError

# low-pass dilation added to the screen covariance diagonal (px^2)
SCREEN_DILATION = 0.3


@dataclass(frozen=True)
class Camera:
    R: np.ndarray  # 3x3 world-to-view rotation
    t: np.ndarray  # 3 world-to-view translation
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidArgumentError("camera pose must be finite")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9:
            raise InvalidArgumentError("camera rotation is not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError("focal lengths must be positive")
        if not self.near > 0:
            raise InvalidArgumentError("near plane must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError("image size must be positive")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_view(self, X: np.ndarray) -> np.ndarray:
        return X @ self.R.T + self.t

    def project_points(self, X: np.ndarray) -> np.ndarray:
        """Pinhole projection of world points (N, 3) to pixels (N, 2)."""
        v = self.to_view(np.atleast_2d(X))
        return np.stack([self.fx * v[:, 0] / v[:, 2] + self.cx,
                         self.fy * v[:, 1] / v[:, 2] + self.cy], axis=1)


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-view (R, t) for a camera at ``eye`` looking at ``target``.

    ``up`` is the world direction that should appear upward in the image,
    i.e. along view -y.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ eye


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_normalize_backward(q: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the unit quaternion back to the raw quaternion."""
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / n
    return (grad_unit - qh * np.sum(qh * grad_unit, axis=-1, keepdims=True)) / n


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) from unit quaternions (..., 4)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    R = np.empty(w.shape + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. a unit quaternion given dL/dR."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    G = grad_R
    g = lambda i, j: G[..., i, j]  # noqa: E731
    dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    dx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
              + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    dy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
              - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    dz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
              + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    return np.stack([dw, dx, dy, dz], axis=-1)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidArgumentError("non-finite input")


def covariance_from_rs(r, s) -> np.ndarray:
    """Sigma = R diag(s)^2 R^T for one quaternion ``r`` and scale vector ``s``."""
    r = np.asarray(r, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    _check_finite(r, s)
    if r.shape != (4,) or s.shape != (3,):
        raise InvalidArgumentError("expected a 4-quaternion and a 3-scale")
    if np.any(s <= 0):
        raise InvalidArgumentError("scales must be positive")
    if not np.linalg.norm(r) > 0:
        raise InvalidArgumentError("zero quaternion")
    return covariances(r[None], s[None])[0]


def covariances(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Batched covariance construction, (N, 4), (N, 3) -> (N, 3, 3)."""
    R = quat_to_rotmat(quat_normalize(q))
    M = R * s[:, None, :]
    return M @ np.swapaxes(M, -1, -2)


def covariances_backward(q: np.ndarray, s: np.ndarray, grad_cov: np.ndarray):
    """Gradients of the covariance map w.r.t. raw quaternions and scales."""
    qh = quat_normalize(q)
    R = quat_to_rotmat(qh)
    Gs = grad_cov + np.swapaxes(grad_cov, -1, -2)
    grad_R = Gs @ (R * (s * s)[:, None, :])
    RtGR = np.swapaxes(R, -1, -2) @ grad_cov @ R
    grad_s = 2 * s * np.diagonal(RtGR, axis1=-2, axis2=-1)
    grad_q = quat_normalize_backward(q, quat_to_rotmat_backward(qh, grad_R))
    return grad_q, grad_s


def gaussian_eval(cov, x, p) -> float:
    """Unnormalized Gaussian exp(-1/2 (p-x)^T cov^-1 (p-x))."""
    cov = np.asarray(cov, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    _check_finite(cov, x, p)
    if np.linalg.cond(cov) >= 1e12:
        raise SingularCovarianceError("covariance is singular or ill-conditioned")
    d = p - x
    return float(np.exp(-0.5 * d @ np.linalg.solve(cov, d)))


@dataclass
class Projection:
    """Batched projection result; entries with ``valid == False`` are culled."""

    means2d: np.ndarray  # (N, 2) pixels
    cov2d: np.ndarray  # (N, 2, 2) dilated screen covariance
    depth: np.ndarray  # (N,) view z
    valid: np.ndarray  # (N,) bool
    view: np.ndarray  # (N, 3) view-space centers
    M: np.ndarray  # (N, 2, 3) J @ R


def project(means: np.ndarray, covs: np.ndarray, cam: Camera) -> Projection:
    v = cam.to_view(means)
    tx, ty, tz = v[:, 0], v[:, 1], v[:, 2]
    valid = tz > cam.near
    # culled rows get a dummy depth so the arithmetic below stays finite
    z = np.where(valid, tz, 1.0)
    means2d = np.stack([cam.fx * tx / z + cam.cx, cam.fy * ty / z + cam.cy], axis=1)
    J = np.zeros((len(v), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * tx / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * ty / (z * z)
    M = J @ cam.R
    cov2d = M @ covs @ np.swapaxes(M, -1, -2)
    cov2d[:, 0, 0] += SCREEN_DILATION
    cov2d[:, 1, 1] += SCREEN_DILATION
    return Projection(means2d, cov2d, tz, valid, v, M)


def project_backward(proj: Projection, covs: np.ndarray, cam: Camera,
                     grad_means2d: np.ndarray, grad_cov2d: np.ndarray):
    """Gradients w.r.t. world means (N, 3) and 3D covariances (N, 3, 3).

    ``grad_cov2d`` is the gradient w.r.t. the full 2x2 matrix (both
    off-diagonal entries treated independently).
    """
    mask = proj.valid.astype(np.float64)
    gm = grad_means2d * mask[:, None]
    gc = grad_cov2d * mask[:, None, None]
    M = proj.M
    grad_covs = np.swapaxes(M, -1, -2) @ gc @ M
    grad_M = (gc + np.swapaxes(gc, -1, -2)) @ M @ covs
    grad_J = grad_M @ cam.R.T
    tx, ty = proj.view[:, 0], proj.view[:, 1]
    z = np.where(proj.valid, proj.view[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy
    iz, iz2, iz3 = 1 / z, 1 / (z * z), 1 / (z * z * z)
    g_tx = gm[:, 0] * fx * iz - grad_J[:, 0, 2] * fx * iz2
    g_ty = gm[:, 1] * fy * iz - grad_J[:, 1, 2] * fy * iz2
    g_tz = (-gm[:, 0] * fx * tx * iz2 - gm[:, 1] * fy * ty * iz2
            - grad_J[:, 0, 0] * fx * iz2 + grad_J[:, 0, 2] * 2 * fx * tx * iz3
            - grad_J[:, 1, 1] * fy * iz2 + grad_J[:, 1, 2] * 2 * fy * ty * iz3)
    grad_view = np.stack([g_tx, g_ty, g_tz], axis=1)
    return grad_view @ cam.R, grad_covs


def project_gaussian(cov, x, cam: Camera):
    """Project one Gaussian. Returns (mean2d, cov2d, depth) or None if culled."""
    cov = np.asarray(cov, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_finite(cov, x)
    p = project(x[None], cov[None], cam)
    if not p.valid[0]:
        return None
    return p.means2d[0], p.cov2d[0], float(p.depth[0])
