"""Camera geometry: pinhole model, SE(3) poses, PnP, RANSAC, pose metrics.

Pose convention is world-from-camera throughout: y_world = R @ y_cam + t,
so t is the camera center in world coordinates. All functions are pure and
operate on float64 numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Z_MIN = 0.1  # points closer than this (or behind) count as invalid projections


class SolverDegenerateError(RuntimeError):
    """Minimal PnP system is rank deficient (e.g. collinear points)."""


class LocalizationFailure(RuntimeError):
    """RANSAC found no hypothesis with enough inliers."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)


@dataclass(frozen=True)
class PoseSE3:
    """World-from-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6 or np.linalg.det(r) < 0:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3))

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self ∘ other: apply other first, then self."""
        return PoseSE3(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def transform(self, pts: np.ndarray) -> np.ndarray:
        """Map camera-frame points to world coordinates."""
        return np.asarray(pts) @ self.rotation.T + self.translation

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.translation) @ self.rotation


@dataclass
class Correspondence2D3D:
    pixel: np.ndarray
    point: np.ndarray
    sigma: float | None = None

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=np.float64).reshape(2)
        self.point = np.asarray(self.point, dtype=np.float64).reshape(3)
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive when present")


def project(K: Intrinsics, pose: PoseSE3, y_world: np.ndarray) -> tuple[np.ndarray, float]:
    """Project one world point; returns (pixel, z_cam). Caller checks z_cam."""
    y_cam = pose.rotation.T @ (np.asarray(y_world, dtype=np.float64) - pose.translation)
    z = float(y_cam[2])
    zsafe = z if abs(z) > 1e-12 else 1e-12
    px = K.fx * y_cam[0] / zsafe + K.cx
    py = K.fy * y_cam[1] / zsafe + K.cy
    return np.array([px, py]), z


def project_many(K: Intrinsics, pose: PoseSE3, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of an (n,3) array; returns (pixels (n,2), z (n,))."""
    cam = (np.asarray(pts, dtype=np.float64) - pose.translation) @ pose.rotation
    z = cam[:, 2]
    zsafe = np.where(np.abs(z) > 1e-12, z, 1e-12)
    px = K.fx * cam[:, 0] / zsafe + K.cx
    py = K.fy * cam[:, 1] / zsafe + K.cy
    return np.stack([px, py], axis=1), z


def backproject(K: Intrinsics, pose: PoseSE3, pixel: np.ndarray, depth: float) -> np.ndarray:
    """Invert the pinhole model at a known camera depth."""
    x = (pixel[0] - K.cx) / K.fx * depth
    y = (pixel[1] - K.cy) / K.fy * depth
    return pose.rotation @ np.array([x, y, depth]) + pose.translation


def pixel_ray(K: Intrinsics, pixel: np.ndarray) -> np.ndarray:
    """Unit viewing ray through a pixel, in the camera frame."""
    d = np.array([(pixel[0] - K.cx) / K.fx, (pixel[1] - K.cy) / K.fy, 1.0])
    return d / np.linalg.norm(d)


def rodrigues(omega: np.ndarray) -> np.ndarray:
    """Axis-angle vector to rotation matrix."""
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        w = _skew(omega)
        return np.eye(3) + w + 0.5 * (w @ w)
    axis = omega / theta
    w = _skew(axis)
    return np.eye(3) + math.sin(theta) * w + (1.0 - math.cos(theta)) * (w @ w)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def rotation_about_axis(axis: np.ndarray, degrees: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    return rodrigues(axis / np.linalg.norm(axis) * math.radians(degrees))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation (QR of a Gaussian matrix with sign fix)."""
    m = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> PoseSE3:
    """World-from-camera pose looking from center toward target (image y down)."""
    center = np.asarray(center, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - center
    f = f / np.linalg.norm(f)
    upv = np.asarray(up, dtype=np.float64)
    x = np.cross(f, upv)
    n = np.linalg.norm(x)
    if n < 1e-9:  # looking straight along up: pick another reference
        upv = np.array([0.0, 1.0, 0.0])
        x = np.cross(f, upv)
        n = np.linalg.norm(x)
    x = x / n
    y = np.cross(f, x)
    return PoseSE3(np.stack([x, y, f], axis=1), center)


def _corr_arrays(corrs) -> tuple[np.ndarray, np.ndarray]:
    pts = np.array([c.point for c in corrs], dtype=np.float64)
    pix = np.array([c.pixel for c in corrs], dtype=np.float64)
    return pts, pix


def pnp_minimal(corrs, K: Intrinsics) -> PoseSE3:
    """Linear 6+ point DLT, decomposed via nearest-orthonormal projection."""
    if len(corrs) < 6:
        raise ValueError("pnp_minimal needs at least 6 correspondences")
    pts, pix = _corr_arrays(corrs)
    # work in normalized camera coordinates to keep the system well conditioned
    xn = (pix[:, 0] - K.cx) / K.fx
    yn = (pix[:, 1] - K.cy) / K.fy

    n = len(corrs)
    a = np.zeros((2 * n, 12))
    homog = np.concatenate([pts, np.ones((n, 1))], axis=1)
    a[0::2, 0:4] = homog
    a[0::2, 8:12] = -xn[:, None] * homog
    a[1::2, 4:8] = homog
    a[1::2, 8:12] = -yn[:, None] * homog

    _, s, vt = np.linalg.svd(a)
    if s[10] <= 1e-9 * s[0]:
        raise SolverDegenerateError("rank-deficient PnP system")
    m = vt[-1].reshape(3, 4)

    # fix sign so depths are positive, then factor out the scale
    depths = homog @ m[2]
    if np.sum(depths > 0) < np.sum(depths < 0):
        m = -m
    u, sv, vt3 = np.linalg.svd(m[:, :3])
    scale = sv.mean()
    if scale <= 1e-12:
        raise SolverDegenerateError("zero-scale PnP solution")
    r_cw = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt3)]) @ vt3
    t_cw = m[:, 3] / scale
    return PoseSE3(r_cw.T, -r_cw.T @ t_cw)


def reprojection_errors(pose: PoseSE3, corrs, K: Intrinsics) -> np.ndarray:
    """Per-correspondence pixel errors; invalid depth maps to +inf."""
    pts, pix = _corr_arrays(corrs)
    proj, z = project_many(K, pose, pts)
    err = np.linalg.norm(proj - pix, axis=1)
    return np.where(z > Z_MIN, err, np.inf)


def refine_pose(pose0: PoseSE3, corrs, K: Intrinsics, iters: int = 20) -> PoseSE3:
    """Levenberg-Marquardt on summed squared reprojection error.

    The pose increment is a 6-vector (axis-angle, translation) applied on
    the camera-from-world side; accepted steps never increase the cost.
    """
    pts, pix = _corr_arrays(corrs)
    r_cw = pose0.rotation.T.copy()
    t_cw = -r_cw @ pose0.translation

    def residuals(rc, tc):
        cam = pts @ rc.T + tc
        z = np.where(np.abs(cam[:, 2]) > 1e-9, cam[:, 2], 1e-9)
        proj = np.stack([K.fx * cam[:, 0] / z + K.cx,
                         K.fy * cam[:, 1] / z + K.cy], axis=1)
        return (proj - pix).reshape(-1), cam

    res, cam = residuals(r_cw, t_cw)
    cost = float(res @ res)
    if not np.isfinite(cost):
        raise FloatingPointError("non-finite initial reprojection cost")

    lam = 1e-3
    for _ in range(iters):
        n = len(pts)
        z = cam[:, 2]
        zs = np.where(np.abs(z) > 1e-9, z, 1e-9)
        # d(pixel)/d(cam point)
        jp = np.zeros((n, 2, 3))
        jp[:, 0, 0] = K.fx / zs
        jp[:, 0, 2] = -K.fx * cam[:, 0] / zs**2
        jp[:, 1, 1] = K.fy / zs
        jp[:, 1, 2] = -K.fy * cam[:, 1] / zs**2
        # d(cam point)/d(omega, dt): rotation perturbs about the camera origin
        u = pts @ r_cw.T
        jc = np.zeros((n, 3, 6))
        jc[:, 0, 1] = u[:, 2]
        jc[:, 0, 2] = -u[:, 1]
        jc[:, 1, 0] = -u[:, 2]
        jc[:, 1, 2] = u[:, 0]
        jc[:, 2, 0] = u[:, 1]
        jc[:, 2, 1] = -u[:, 0]
        jc[:, 0, 3] = jc[:, 1, 4] = jc[:, 2, 5] = 1.0
        jac = np.einsum("nij,njk->nik", jp, jc).reshape(-1, 6)

        jtj = jac.T @ jac
        jtr = jac.T @ res
        improved = False
        for _ in range(8):
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj)) + 1e-12 * np.eye(6), -jtr)
            except np.linalg.LinAlgError:
                lam *= 4.0
                continue
            r_new = rodrigues(delta[:3]) @ r_cw
            t_new = t_cw + delta[3:]
            res_new, cam_new = residuals(r_new, t_new)
            cost_new = float(res_new @ res_new)
            if np.isfinite(cost_new) and cost_new <= cost:
                r_cw, t_cw, res, cam, cost = r_new, t_new, res_new, cam_new, cost_new
                lam = max(lam / 3.0, 1e-12)
                improved = True
                break
            lam *= 4.0
        if not improved or cost < 1e-20:
            break

    return PoseSE3(r_cw.T, -r_cw.T @ t_cw)


@dataclass
class RansacConfig:
    inlier_thresh_px: float = 10.0
    max_iters: int = 1024
    confidence: float = 0.9999
    min_inliers: int = 6
    refine_iters: int = 20


def ransac_pnp(corrs, K: Intrinsics, cfg: RansacConfig | None = None,
               seed: int = 0) -> tuple[PoseSE3, np.ndarray]:
    """Robust pose from 2D-3D matches; returns (pose, boolean inlier mask).

    Deterministic given the seed; raises LocalizationFailure when no
    hypothesis reaches min_inliers.
    """
    cfg = cfg or RansacConfig()
    n = len(corrs)
    if n < 6:
        raise LocalizationFailure(f"need at least 6 correspondences, got {n}")
    rng = np.random.default_rng(seed)

    best_count = 0
    best_mask: np.ndarray | None = None
    needed = cfg.max_iters
    i = 0
    while i < min(needed, cfg.max_iters):
        sample = rng.choice(n, size=6, replace=False)
        try:
            pose = pnp_minimal([corrs[j] for j in sample], K)
        except SolverDegenerateError:
            i += 1
            continue
        err = reprojection_errors(pose, corrs, K)
        mask = err < cfg.inlier_thresh_px
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            w = count / n
            if w >= 1.0 - 1e-12:
                break
            denom = math.log(max(1.0 - w**6, 1e-12))
            needed = min(cfg.max_iters, int(math.ceil(math.log(1.0 - cfg.confidence) / denom)))
        i += 1

    if best_mask is None or best_count < cfg.min_inliers:
        raise LocalizationFailure(f"best hypothesis had {best_count} inliers")

    inlier_corrs = [c for c, keep in zip(corrs, best_mask) if keep]
    pose0 = pnp_minimal(inlier_corrs, K)
    pose = refine_pose(pose0, inlier_corrs, K, iters=cfg.refine_iters)
    final_mask = reprojection_errors(pose, corrs, K) < cfg.inlier_thresh_px
    if int(final_mask.sum()) < cfg.min_inliers:
        final_mask = best_mask
    return pose, final_mask


def pose_error(est: PoseSE3, gt: PoseSE3) -> tuple[float, float]:
    """(translation error in scene units, rotation error in degrees)."""
    t_err = float(np.linalg.norm(est.translation - gt.translation))
    c = (np.trace(gt.rotation.T @ est.rotation) - 1.0) / 2.0
    r_err = math.degrees(math.acos(min(1.0, max(-1.0, c))))
    return t_err, r_err
