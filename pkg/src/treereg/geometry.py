"""Core pointmap geometry: normalization, rotations, Sim(3) alignment, PnP, focal recovery.

Conventions used consistently across the package:
  * pixel (row i, col j) has image-plane coordinates (u, v) = (j, i);
  * the camera ray through (u, v) points along ((u - cx)/f, (v - cy)/f, 1) in the
    camera frame, so depth is the camera-frame z coordinate;
  * rotations are plain (3, 3) orthonormal ndarrays with det +1;
  * Se3Pose stores the camera-to-world rotation and the camera center,
    world = R @ cam + center.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DegeneratePointmap,
    InsufficientCorrespondences,
    ShapeMismatch,
)


@dataclass(frozen=True)
class Pointmap:
    """Per-pixel 3D coordinates with a validity mask."""

    xyz: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=float)
        valid = np.asarray(self.valid, dtype=bool)
        if xyz.ndim != 3 or xyz.shape[2] != 3:
            raise ShapeMismatch(f"xyz must be (H, W, 3), got {xyz.shape}")
        if valid.shape != xyz.shape[:2]:
            raise ShapeMismatch(f"mask {valid.shape} does not match {xyz.shape[:2]}")
        if xyz.shape[0] * xyz.shape[1] == 0:
            raise ShapeMismatch("empty pointmap")
        if not np.all(np.isfinite(xyz[valid])):
            raise ShapeMismatch("non-finite coordinates at valid pixels")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.xyz.shape[0]

    @property
    def width(self) -> int:
        return self.xyz.shape[1]

    def valid_points(self) -> np.ndarray:
        """Valid pixels as an (N, 3) array."""
        return self.xyz[self.valid]


@dataclass(frozen=True)
class ConfidenceMap:
    """Per-pixel positive confidence (exp-activated, so strictly > 0)."""

    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        if c.ndim != 2 or c.size == 0:
            raise ShapeMismatch(f"confidence must be (H, W), got {c.shape}")
        if not np.all(np.isfinite(c)) or np.any(c <= 0):
            raise ShapeMismatch("confidence must be finite and > 0 everywhere")
        object.__setattr__(self, "c", c)

    @property
    def height(self) -> int:
        return self.c.shape[0]

    @property
    def width(self) -> int:
        return self.c.shape[1]


@dataclass(frozen=True)
class NormalizationParams:
    """Centroid and mean radius of a reference pointmap."""

    mu: np.ndarray
    z: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).reshape(3)
        if not self.z > 0:
            raise DegeneratePointmap(f"normalization scale must be positive, got {self.z}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "z", float(self.z))


@dataclass(frozen=True)
class Se3Pose:
    """Camera pose: camera-to-world rotation plus camera center."""

    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        c = np.asarray(self.center, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "center", c)

    @staticmethod
    def identity() -> "Se3Pose":
        return Se3Pose(np.eye(3), np.zeros(3))

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into this camera's frame."""
        return (np.asarray(pts, dtype=float) - self.center) @ self.rotation

    def camera_to_world(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.rotation.T + self.center


@dataclass(frozen=True)
class Sim3Transform:
    """Similarity transform x -> scale * R @ x + t."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise DegenerateConfiguration(f"scale must be positive, got {self.scale}")
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Sim3Transform":
        return Sim3Transform(1.0, np.eye(3), np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Apply to points of shape (..., 3)."""
        return np.asarray(pts, dtype=float) @ (self.scale * self.rotation).T + self.translation

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        """self o other, i.e. apply `other` first."""
        return Sim3Transform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Sim3Transform":
        r_inv = self.rotation.T
        s_inv = 1.0 / self.scale
        return Sim3Transform(s_inv, r_inv, -s_inv * r_inv @ self.translation)


@dataclass(frozen=True)
class Intrinsics:
    """Shared pinhole parameters, in pixels."""

    focal: float
    cx: float
    cy: float

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")


def project_points(pts_cam: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Project camera-frame points (..., 3) to pixel coordinates (..., 2) = (u, v)."""
    pts_cam = np.asarray(pts_cam, dtype=float)
    z = pts_cam[..., 2]
    u = k.focal * pts_cam[..., 0] / z + k.cx
    v = k.focal * pts_cam[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1)


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """(u, v) coordinate arrays of shape (H, W) under the (u, v) = (col, row) convention."""
    v, u = np.mgrid[0:height, 0:width]
    return u.astype(float), v.astype(float)


# ---------------------------------------------------------------------------
# pointmap normalization


def normalization_params(pm: Pointmap) -> NormalizationParams:
    """Centroid and mean distance-to-centroid of the valid points.

    Raises DegeneratePointmap when there are no valid pixels or all valid
    points coincide; a silently clamped scale would corrupt every frame
    conversion downstream.
    """
    pts = pm.valid_points()
    if pts.shape[0] == 0:
        raise DegeneratePointmap("no valid pixels")
    mu = pts.mean(axis=0)
    z = float(np.linalg.norm(pts - mu, axis=1).mean())
    if z < 1e-12:
        raise DegeneratePointmap(f"all valid points coincide (z={z})")
    return NormalizationParams(mu=mu, z=z)


def apply_normalization(pm: Pointmap, p: NormalizationParams) -> Pointmap:
    """Center by p.mu and scale by 1/p.z."""
    return Pointmap((pm.xyz - p.mu) / p.z, pm.valid)


def apply_denormalization(pm: Pointmap, p: NormalizationParams) -> Pointmap:
    """Exact inverse of apply_normalization."""
    return Pointmap(pm.xyz * p.z + p.mu, pm.valid)


# ---------------------------------------------------------------------------
# rotations


def is_rotation(r: np.ndarray, tol: float = 1e-9) -> bool:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        return False
    return (
        np.linalg.norm(r.T @ r - np.eye(3)) < tol
        and abs(np.linalg.det(r) - 1.0) < tol
    )


def random_rotation_uniform(rng: np.random.Generator) -> np.ndarray:
    """Rotation drawn uniformly over SO(3).

    A normalized 4D Gaussian is uniform on the unit quaternion sphere, which
    double-covers SO(3) uniformly.
    """
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return rotation_from_quat(q)


def so3_hat(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(3)
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues exponential of an axis-angle 3-vector."""
    w = np.asarray(w, dtype=float).reshape(3)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + so3_hat(w)
    k = so3_hat(w / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def project_so3(m: np.ndarray) -> np.ndarray:
    """Nearest rotation to m in the Frobenius sense (SVD with det correction)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float).reshape(3, 3))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_geodesic_sq(a: np.ndarray, b: np.ndarray) -> float:
    """Squared relative rotation angle, theta^2 with theta = |log(a^T b)|.

    The angle comes from atan2 of the symmetric/antisymmetric parts of a^T b,
    which stays accurate near both 0 and pi.
    """
    m = np.asarray(a, dtype=float).T @ np.asarray(b, dtype=float)
    cos_t = np.clip((np.trace(m) - 1.0) / 2.0, -1.0, 1.0)
    skew = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    sin_t = 0.5 * np.linalg.norm(skew)
    theta = float(np.arctan2(sin_t, cos_t))
    return theta * theta


def quat_from_rotation(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 for a canonical representation."""
    r = np.asarray(r, dtype=float).reshape(3, 3)
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s,
                      (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s,
                      0.25 * s, (r[1, 2] + r[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
                      (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def rotation_from_quat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float).reshape(4)
    n = w * w + x * x + y * y + z * z
    w, x, y, z = (c / np.sqrt(n) for c in (w, x, y, z))
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def apply_sim3_to_pose(t: Sim3Transform, pose: Se3Pose) -> Se3Pose:
    """Express a camera pose in the frame obtained by applying `t` to the world."""
    return Se3Pose(t.rotation @ pose.rotation, t.apply(pose.center))


# ---------------------------------------------------------------------------
# weighted Umeyama similarity alignment


def umeyama_sim3(src: np.ndarray, dst: np.ndarray,
                 weights: np.ndarray | None = None) -> Sim3Transform:
    """Weighted least-squares similarity transform from src onto dst.

    Minimizes sum_i w_i || s R src_i + t - dst_i ||^2 in closed form.

    Args:
        src, dst: (N, 3) corresponding point sets, N >= 3.
        weights: optional (N,) nonnegative weights.

    Raises:
        DegenerateConfiguration: fewer than 3 effective points, or the
            weighted src cloud is coincident or collinear.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ShapeMismatch(f"src {src.shape} vs dst {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise DegenerateConfiguration(f"need >= 3 points, got {n}")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=float).reshape(n)
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        total = w.sum()
        if not total > 0:
            raise DegenerateConfiguration("all weights are zero")
        w = w / total
        if np.count_nonzero(w) < 3:
            raise DegenerateConfiguration("fewer than 3 points with positive weight")

    mu_s = w @ src
    mu_d = w @ dst
    ds = src - mu_s
    dd = dst - mu_d
    var_s = float(np.sum(w * np.einsum("ij,ij->i", ds, ds)))
    if var_s < 1e-24:
        raise DegenerateConfiguration("source points coincide")
    cov = (dd * w[:, None]).T @ ds
    u, d, vt = np.linalg.svd(cov)
    if d[1] <= 1e-9 * d[0] or d[0] == 0.0:
        raise DegenerateConfiguration("source points are collinear")
    s_diag = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_diag[2] = -1.0
    rot = u @ np.diag(s_diag) @ vt
    scale = float((d * s_diag).sum() / var_s)
    if not scale > 0:
        raise DegenerateConfiguration(f"non-positive scale {scale}")
    trans = mu_d - scale * rot @ mu_s
    return Sim3Transform(scale, rot, trans)


# ---------------------------------------------------------------------------
# PnP pose recovery


@dataclass(frozen=True)
class PnpResult:
    """Recovered pose plus solver diagnostics.

    `converged` is False when Gauss-Newton hit the iteration cap; the pose is
    then the best iterate rather than a refined solution.
    """

    pose: Se3Pose
    converged: bool
    rms_reprojection: float


def _dlt_full(x_world: np.ndarray, ab: np.ndarray, w: np.ndarray):
    """12-parameter DLT for [R|t] on normalized pixel coordinates."""
    n = x_world.shape[0]
    xh = np.hstack([x_world, np.ones((n, 1))])
    rows = np.zeros((2 * n, 12))
    sw = np.sqrt(w)[:, None]
    rows[0::2, 0:4] = xh * sw
    rows[0::2, 8:12] = -ab[:, 0:1] * xh * sw
    rows[1::2, 4:8] = xh * sw
    rows[1::2, 8:12] = -ab[:, 1:2] * xh * sw
    _, _, vt = np.linalg.svd(rows, full_matrices=False)
    p = vt[-1].reshape(3, 4)
    if np.linalg.det(p[:, :3]) < 0:
        p = -p
    m = p[:, :3]
    u, d, vt2 = np.linalg.svd(m)
    rot = u @ np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt2))]) @ vt2
    lam = d.mean()
    t = p[:, 3] / lam
    # the sign convention above should leave most depths positive; flip if not
    z = (x_world @ rot.T + t)[:, 2]
    if np.median(z) < 0:
        rot = -rot
        rot = project_so3(rot)
        t = -t
    return rot, t


def _dlt_planar(x_world: np.ndarray, ab: np.ndarray, w: np.ndarray):
    """Homography-based initialization for (near-)planar world points."""
    centroid = x_world.mean(axis=0)
    xc = x_world - centroid
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    e1, e2 = vt[0], vt[1]
    plane_uv = np.stack([xc @ e1, xc @ e2], axis=1)

    n = x_world.shape[0]
    ph = np.hstack([plane_uv, np.ones((n, 1))])
    rows = np.zeros((2 * n, 9))
    sw = np.sqrt(w)[:, None]
    rows[0::2, 0:3] = ph * sw
    rows[0::2, 6:9] = -ab[:, 0:1] * ph * sw
    rows[1::2, 3:6] = ph * sw
    rows[1::2, 6:9] = -ab[:, 1:2] * ph * sw
    _, _, vth = np.linalg.svd(rows, full_matrices=False)
    h = vth[-1].reshape(3, 3)
    # fix the overall sign so points land in front of the camera
    depths = ph @ h[2]
    if np.median(depths) < 0:
        h = -h
    h1, h2, h3 = h[:, 0], h[:, 1], h[:, 2]
    inv_norm = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    r1 = h1 / np.linalg.norm(h1)
    r2 = h2 - (r1 @ h2) * r1
    r2 /= np.linalg.norm(r2)
    r3 = np.cross(r1, r2)
    rot_plane = project_so3(np.stack([r1, r2, r3], axis=1))
    t_plane = h3 * inv_norm

    basis = np.stack([e1, e2, np.cross(e1, e2)], axis=1)
    rot = rot_plane @ basis.T
    rot = project_so3(rot)
    t = t_plane - rot @ centroid
    return rot, t


def _refine_pose(x_world, uv, w, k, rot, t, max_iters, step_tol):
    """Weighted Gauss-Newton on reprojection residuals from a given start."""
    converged = False
    rms = np.inf
    for _ in range(max_iters):
        x_cam = x_world @ rot.T + t
        z = x_cam[:, 2]
        safe = z > 1e-12
        if not np.any(safe):
            break
        zs = np.where(safe, z, 1.0)
        res = np.stack([
            k.focal * x_cam[:, 0] / zs + k.cx - uv[:, 0],
            k.focal * x_cam[:, 1] / zs + k.cy - uv[:, 1],
        ], axis=1)
        wi = np.where(safe, w, 0.0)
        rms = float(np.sqrt(np.sum(wi[:, None] * res**2) / max(wi.sum(), 1e-300)))

        # J = dproj/dXc @ [ -hat(R X) | I ], assembled per point
        jp = np.zeros((x_world.shape[0], 2, 3))
        jp[:, 0, 0] = k.focal / zs
        jp[:, 0, 2] = -k.focal * x_cam[:, 0] / zs**2
        jp[:, 1, 1] = k.focal / zs
        jp[:, 1, 2] = -k.focal * x_cam[:, 1] / zs**2
        rx = x_cam - t
        jrot = np.zeros((x_world.shape[0], 3, 3))
        jrot[:, 0, 1] = rx[:, 2]
        jrot[:, 0, 2] = -rx[:, 1]
        jrot[:, 1, 0] = -rx[:, 2]
        jrot[:, 1, 2] = rx[:, 0]
        jrot[:, 2, 0] = rx[:, 1]
        jrot[:, 2, 1] = -rx[:, 0]
        jac = np.concatenate([np.einsum("nij,njk->nik", jp, jrot), jp], axis=2)

        h = np.einsum("n,nir,nis->rs", wi, jac, jac)
        g = np.einsum("n,nir,ni->r", wi, jac, res)
        try:
            step = -np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            break
        rot = so3_exp(step[:3]) @ rot
        t = t + step[3:]
        if np.max(np.abs(step)) < step_tol:
            converged = True
            break
    return rot, t, converged, rms


def solve_pnp(pm: Pointmap, conf: ConfidenceMap, k: Intrinsics,
              conf_threshold: float = 0.0, *, max_iters: int = 50,
              step_tol: float = 1e-10) -> PnpResult:
    """Pose from a world-frame pointmap via confidence-weighted PnP.

    Two direct linear transform initializations exist: the 12-parameter
    variant, sound for well-spread 3D points, and a homography variant for
    (near-)planar points where the former is rank-deficient. Every
    initialization that applies is refined by Gauss-Newton on the
    reprojection residuals and the lowest-residual solution wins, so the
    solver needs no fragile planarity threshold.

    Returns a PnpResult whose pose is camera-to-world.

    Raises:
        InsufficientCorrespondences: fewer than 6 usable pixels, or the
            usable points are collinear.
    """
    if conf.c.shape != pm.xyz.shape[:2]:
        raise ShapeMismatch("confidence does not match pointmap")
    sel = pm.valid & (conf.c >= conf_threshold)
    n_sel = int(sel.sum())
    if n_sel < 6:
        raise InsufficientCorrespondences(f"{n_sel} usable pixels, need >= 6")
    x_world = pm.xyz[sel]
    w = conf.c[sel]
    w = w / w.sum()
    u_grid, v_grid = pixel_grid(pm.height, pm.width)
    uv = np.stack([u_grid[sel], v_grid[sel]], axis=1)
    ab = (uv - np.array([k.cx, k.cy])) / k.focal

    sv = np.linalg.svd(x_world - x_world.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * sv[0] or sv[0] == 0.0:
        raise InsufficientCorrespondences("world points are collinear")
    starts = [_dlt_planar(x_world, ab, w)]
    if sv[2] > 1e-6 * sv[0]:
        starts.append(_dlt_full(x_world, ab, w))

    best = None
    for rot0, t0 in starts:
        rot, t, converged, rms = _refine_pose(x_world, uv, w, k, rot0, t0,
                                              max_iters, step_tol)
        if best is None or rms < best[3]:
            best = (rot, t, converged, rms)
    rot, t, converged, rms = best
    rot = project_so3(rot)
    pose = Se3Pose(rot.T, -rot.T @ t)
    return PnpResult(pose=pose, converged=converged, rms_reprojection=rms)


# ---------------------------------------------------------------------------
# focal recovery


def estimate_focal(pm_camera_frame: Pointmap, cx: float, cy: float) -> Intrinsics:
    """Median-of-ratios focal estimate from a camera-frame pointmap.

    Each off-axis pixel with forward-facing geometry yields f = (u - cx) z / x
    (and the v analog); the median is robust and scale-invariant.
    """
    u_grid, v_grid = pixel_grid(pm_camera_frame.height, pm_camera_frame.width)
    sel = pm_camera_frame.valid & (pm_camera_frame.xyz[..., 2] > 1e-12)
    if not np.any(sel):
        raise DegeneratePointmap("no valid forward-facing points")
    x = pm_camera_frame.xyz[..., 0][sel]
    y = pm_camera_frame.xyz[..., 1][sel]
    z = pm_camera_frame.xyz[..., 2][sel]
    du = u_grid[sel] - cx
    dv = v_grid[sel] - cy

    mask_u = (np.abs(du) >= 1.0) & (np.abs(x) > 1e-12 * z)
    mask_v = (np.abs(dv) >= 1.0) & (np.abs(y) > 1e-12 * z)
    estimates = np.concatenate([du[mask_u] * z[mask_u] / x[mask_u],
                                dv[mask_v] * z[mask_v] / y[mask_v]])
    estimates = estimates[np.isfinite(estimates) & (estimates > 0)]
    if estimates.size == 0:
        raise DegeneratePointmap("no usable focal estimates")
    return Intrinsics(focal=float(np.median(estimates)), cx=float(cx), cy=float(cy))
