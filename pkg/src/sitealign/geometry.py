"""Camera model, projection, similarity fitting, and pose error metrics.

Conventions used across the package:

* World frame is right-handed, units are meters.
* Poses are world-to-camera: ``Xc = R @ X + t``. The camera looks down
  ``+Z`` in its own frame; points with ``z <= 0`` are behind the camera.
* Pixel coordinates have the origin at the top-left corner, ``+x`` right,
  ``+y`` down. The principal point is the image center and pixels are
  square, so intrinsics are focal length plus two radial coefficients.
* Rotations are stored as axis-angle 3-vectors (radians) with magnitude
  normalized into ``[0, pi]``; this keeps every solver's pose a minimal
  6-vector.

Radial distortion follows the even polynomial ``1 + k1*r^2 + k2*r^4``
applied to normalized image coordinates after perspective division.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCamera, DegenerateConfiguration, NoConvergence, ValidationError

_EPS_ANGLE = 1e-12


def normalize_rotvec(v: np.ndarray) -> np.ndarray:
    """Map an axis-angle vector to the equivalent one with magnitude in [0, pi]."""
    v = np.asarray(v, dtype=float).reshape(3).copy()
    theta = float(np.linalg.norm(v))
    if theta > np.pi:
        # subtract full turns, then flip into [0, pi]
        turns = np.floor((theta + np.pi) / (2.0 * np.pi))
        v *= (theta - 2.0 * np.pi * turns) / theta
    return v


def rotvec_to_matrix(v: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(v, dtype=float).reshape(3)).as_matrix()


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    return normalize_rotvec(Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec())


def skew(p: np.ndarray) -> np.ndarray:
    """Cross-product matrix [p]x such that skew(p) @ q == cross(p, q)."""
    p = np.asarray(p, dtype=float)
    out = np.zeros(p.shape[:-1] + (3, 3))
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def rotate_points_jacobian(rotvec: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Derivative of ``R(rotvec) @ p`` with respect to rotvec.

    Parameters
    ----------
    rotvec : (3,) axis-angle rotation.
    points : (n, 3) points being rotated.

    Returns
    -------
    (n, 3, 3) array ``J`` with ``J[i] = d(R p_i)/d rotvec``.
    """
    rotvec = np.asarray(rotvec, dtype=float).reshape(3)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    R = rotvec_to_matrix(rotvec)
    theta2 = float(rotvec @ rotvec)
    if theta2 < _EPS_ANGLE**2:
        return -skew(points)
    M = (np.outer(rotvec, rotvec) + (R.T - np.eye(3)) @ skew(rotvec)) / theta2
    return -np.einsum("ab,nbc,cd->nad", R, skew(points), M)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics: single focal length and two radial coefficients.

    The principal point is implicitly ``(width / 2, height / 2)``.
    """

    focal: float
    k1: float
    k2: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal <= 0:
            raise ValidationError(f"focal must be positive, got {self.focal}")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("image dimensions must be positive")

    @property
    def principal_point(self) -> np.ndarray:
        return np.array([self.width / 2.0, self.height / 2.0])

    @classmethod
    def from_fov(cls, fov_deg: float, width: int, height: int) -> "Intrinsics":
        """Intrinsics with zero distortion and a given horizontal field of view."""
        focal = width / (2.0 * np.tan(np.radians(fov_deg) / 2.0))
        return cls(focal=focal, k1=0.0, k2=0.0, width=width, height=height)

    def with_params(self, focal=None, k1=None, k2=None) -> "Intrinsics":
        return Intrinsics(
            focal=self.focal if focal is None else float(focal),
            k1=self.k1 if k1 is None else float(k1),
            k2=self.k2 if k2 is None else float(k2),
            width=self.width,
            height=self.height,
        )


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform stored as axis-angle + translation."""

    rotvec: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotvec", normalize_rotvec(self.rotvec))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())
        if not np.all(np.isfinite(self.center)):
            raise ValidationError("camera center is not finite")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(matrix_to_rotvec(R), t)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Pose of a camera at ``eye`` looking toward ``target``.

        ``up`` is the world direction that should point toward the top of
        the image (image +y points down).
        """
        eye = np.asarray(eye, dtype=float)
        target = np.asarray(target, dtype=float)
        fwd = target - eye
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise ValidationError("look_at eye and target coincide")
        fwd = fwd / n
        right = np.cross(fwd, np.asarray(up, dtype=float))
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            raise ValidationError("look_at up vector is parallel to the view direction")
        right /= rn
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])  # rows: camera axes in world coords
        return cls.from_matrix(R, -R @ eye)

    @property
    def R(self) -> np.ndarray:
        return rotvec_to_matrix(self.rotvec)

    @property
    def center(self) -> np.ndarray:
        return -rotvec_to_matrix(self.rotvec).T @ self.t

    @property
    def view_direction(self) -> np.ndarray:
        """Unit vector along the optical axis, in world coordinates."""
        return rotvec_to_matrix(self.rotvec).T @ np.array([0.0, 0.0, 1.0])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """World points -> camera-frame points. Accepts (3,) or (n, 3)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.R.T + self.t

    def params(self) -> np.ndarray:
        """The minimal 6-vector (rotvec, t) used by the solvers."""
        return np.concatenate([self.rotvec, self.t])

    @classmethod
    def from_params(cls, p: np.ndarray) -> "Pose":
        p = np.asarray(p, dtype=float).reshape(6)
        return cls(p[:3], p[3:])


class ErrorTriple(NamedTuple):
    """Pose error metrics: viewing-direction angle (deg), camera-center
    distance (m), mean reprojection error (% of image width)."""

    rotation_deg: float
    translation_m: float
    reprojection_pct: float


@dataclass(frozen=True)
class SimilarityTransform:
    """Scaled rigid transform ``y = scale * R @ x + t``."""

    scale: float
    rotvec: np.ndarray
    t: np.ndarray
    residual_rms: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValidationError(f"similarity scale must be positive, got {self.scale}")
        object.__setattr__(self, "rotvec", normalize_rotvec(self.rotvec))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.zeros(3), np.zeros(3))

    @property
    def R(self) -> np.ndarray:
        return rotvec_to_matrix(self.rotvec)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return self.scale * (pts @ self.R.T) + self.t

    def inverse(self) -> "SimilarityTransform":
        Rinv = self.R.T
        return SimilarityTransform(
            scale=1.0 / self.scale,
            rotvec=matrix_to_rotvec(Rinv),
            t=-(Rinv @ self.t) / self.scale,
        )


def distort_normalized(xy: np.ndarray, k1: float, k2: float) -> np.ndarray:
    """Apply the radial polynomial to normalized image coordinates."""
    xy = np.asarray(xy, dtype=float)
    r2 = np.sum(xy * xy, axis=-1, keepdims=True)
    return xy * (1.0 + k1 * r2 + k2 * r2 * r2)


def project(point: np.ndarray, pose: Pose, intr: Intrinsics) -> np.ndarray:
    """Project a world point to pixel coordinates.

    Raises
    ------
    BehindCamera
        If the point maps to camera-space depth ``z <= 0``.
    """
    Xc = pose.apply(np.asarray(point, dtype=float).reshape(3))
    if Xc[2] <= 0:
        raise BehindCamera(f"point has non-positive depth z={Xc[2]:.6g}")
    xy = Xc[:2] / Xc[2]
    xyd = distort_normalized(xy, intr.k1, intr.k2)
    return intr.focal * xyd + intr.principal_point


def project_many(points: np.ndarray, pose: Pose, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (n, 3) world points.

    Returns
    -------
    pixels : (n, 2) array; rows with non-positive depth hold NaN.
    valid : (n,) boolean mask of points with positive depth.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    Xc = pose.apply(pts)
    valid = Xc[:, 2] > 0
    z = np.where(valid, Xc[:, 2], np.nan)
    xy = Xc[:, :2] / z[:, None]
    xyd = distort_normalized(xy, intr.k1, intr.k2)
    return intr.focal * xyd + intr.principal_point, valid


def undistort(pixel: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Invert distortion: pixel -> normalized undistorted coordinates.

    Newton iteration on the radial polynomial; converges such that
    re-distorting reproduces the input within 1e-6 px.

    Raises
    ------
    ValidationError
        If the pixel is outside twice the image bounds.
    NoConvergence
        After 50 iterations, or when the polynomial folds (non-invertible).
    """
    pixel = np.asarray(pixel, dtype=float).reshape(2)
    pp = intr.principal_point
    if abs(pixel[0] - pp[0]) > intr.width or abs(pixel[1] - pp[1]) > intr.height:
        raise ValidationError(f"pixel {pixel} outside twice the image bounds")
    xyd = (pixel - pp) / intr.focal
    if intr.k1 == 0.0 and intr.k2 == 0.0:
        return xyd
    rd = float(np.linalg.norm(xyd))
    if rd == 0.0:
        return xyd
    k1, k2 = intr.k1, intr.k2
    ru = rd
    tol = 1e-9 / intr.focal  # comfortably under 1e-6 px after re-distortion
    for _ in range(50):
        r2 = ru * ru
        g = ru * (1.0 + k1 * r2 + k2 * r2 * r2) - rd
        if abs(g) < tol:
            return xyd * (ru / rd)
        dg = 1.0 + 3.0 * k1 * r2 + 5.0 * k2 * r2 * r2
        if dg <= 0.0 or not np.isfinite(dg):
            raise NoConvergence(
                f"distortion polynomial not invertible at radius {ru:.4f} (k1={k1}, k2={k2})"
            )
        ru -= g / dg
        if not np.isfinite(ru) or ru < 0.0:
            raise NoConvergence("radius iteration left the valid domain")
    raise NoConvergence("undistortion did not converge in 50 iterations")


def undistorted_pixel(pixel: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Pixel coordinates the point would have under zero distortion."""
    return intr.focal * undistort(pixel, intr) + intr.principal_point


def pixel_ray(pixel: np.ndarray, pose: Pose, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray (origin, unit direction) through a pixel."""
    xy = undistort(pixel, intr)
    d_cam = np.array([xy[0], xy[1], 1.0])
    d_world = pose.R.T @ d_cam
    return pose.center, d_world / np.linalg.norm(d_world)


def fit_similarity(src: np.ndarray, dst: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity transform mapping ``src`` onto ``dst``.

    Closed-form Umeyama solution over >= 3 non-collinear correspondences.

    Raises
    ------
    DegenerateConfiguration
        Fewer than 3 points, or all points collinear.
    """
    src = np.atleast_2d(np.asarray(src, dtype=float))
    dst = np.atleast_2d(np.asarray(dst, dtype=float))
    if src.shape != dst.shape or src.shape[1] != 3:
        raise ValidationError("src and dst must be matching (n, 3) arrays")
    n = src.shape[0]
    if n < 3:
        raise DegenerateConfiguration(f"need >= 3 correspondences, got {n}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    X = src - mu_s
    Y = dst - mu_d
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateConfiguration("source points are collinear")
    cov = (Y.T @ X) / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = float(np.mean(np.sum(X * X, axis=1)))
    scale = float(np.trace(np.diag(D) @ S)) / var_s
    t = mu_d - scale * (R @ mu_s)
    mapped = scale * (src @ R.T) + t
    rms = float(np.sqrt(np.mean(np.sum((mapped - dst) ** 2, axis=1))))
    return SimilarityTransform(scale=scale, rotvec=matrix_to_rotvec(R), t=t, residual_rms=rms)


def rotation_angle_deg(R_a: np.ndarray, R_b: np.ndarray) -> float:
    """Angle of the relative rotation between two rotation matrices, degrees.

    atan2 of the axial (sine) and trace (cosine) parts; precise down to
    machine epsilon for near-identical rotations, where arccos is not.
    """
    M = R_a @ R_b.T
    cos = (np.trace(M) - 1.0) / 2.0
    axial = 0.5 * np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    return float(np.degrees(np.arctan2(np.linalg.norm(axial), cos)))


def angle_between_deg(u: np.ndarray, v: np.ndarray) -> float:
    """Angle between two 3-vectors, degrees, stable near 0 and 180."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(u, v)), float(u @ v))))


def camera_errors(estimated, truth, probe_points: Sequence[np.ndarray]) -> ErrorTriple:
    """Error triple between an estimated and a ground-truth camera.

    ``estimated`` and ``truth`` are any objects exposing ``pose`` and
    ``intrinsics``. Reprojection error is averaged over ``probe_points``
    (which must be visible in the truth camera) and reported as a
    percentage of the image width. A probe that falls behind the
    estimated camera contributes a very large but finite error.
    """
    ep, tp = estimated.pose, truth.pose
    angle = angle_between_deg(ep.view_direction, tp.view_direction)
    center_dist = float(np.linalg.norm(ep.center - tp.center))
    probes = np.atleast_2d(np.asarray(probe_points, dtype=float))
    truth_px, truth_ok = project_many(probes, tp, truth.intrinsics)
    if not np.all(truth_ok):
        raise ValidationError("probe points must be visible in the truth camera")
    est_cam = estimated.pose.apply(probes)
    z = np.maximum(est_cam[:, 2], 1e-9)  # behind-camera probes blow up finitely
    xy = est_cam[:, :2] / z[:, None]
    xyd = distort_normalized(xy, estimated.intrinsics.k1, estimated.intrinsics.k2)
    est_px = estimated.intrinsics.focal * xyd + estimated.intrinsics.principal_point
    err = np.linalg.norm(est_px - truth_px, axis=1)
    reproj_pct = float(np.mean(err) / truth.intrinsics.width * 100.0)
    return ErrorTriple(float(angle), center_dist, reproj_pct)


# --- projection residual blocks shared by the solvers -----------------------


def project_with_jacobians(
    points: np.ndarray,
    rotvec: np.ndarray,
    t: np.ndarray,
    focal: float,
    k1: float,
    k2: float,
    width: int,
    height: int,
):
    """Project (n, 3) world points and return every Jacobian block.

    Returns
    -------
    pixels : (n, 2)
    valid : (n,) depth > 0 mask (invalid rows hold unusable garbage)
    J : dict with keys ``rot`` (n,2,3), ``t`` (n,2,3), ``point`` (n,2,3),
        ``focal`` (n,2,1), ``dist`` (n,2,2) for (k1, k2).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    R = rotvec_to_matrix(rotvec)
    Xc = pts @ R.T + np.asarray(t, dtype=float)
    z = Xc[:, 2]
    valid = z > 0
    zs = np.where(valid, z, 1.0)  # keep math finite on invalid rows

    x = Xc[:, 0] / zs
    y = Xc[:, 1] / zs
    r2 = x * x + y * y
    d = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = x * d
    yd = y * d
    cx = width / 2.0
    cy = height / 2.0
    pixels = np.stack([focal * xd + cx, focal * yd + cy], axis=1)

    # d(x, y)/dXc
    dxy_dXc = np.zeros((n, 2, 3))
    dxy_dXc[:, 0, 0] = 1.0 / zs
    dxy_dXc[:, 0, 2] = -Xc[:, 0] / zs**2
    dxy_dXc[:, 1, 1] = 1.0 / zs
    dxy_dXc[:, 1, 2] = -Xc[:, 1] / zs**2

    # d(xd, yd)/d(x, y)
    g = 2.0 * k1 + 4.0 * k2 * r2
    dd = np.zeros((n, 2, 2))
    dd[:, 0, 0] = d + x * x * g
    dd[:, 0, 1] = x * y * g
    dd[:, 1, 0] = x * y * g
    dd[:, 1, 1] = d + y * y * g

    dpix_dXc = focal * np.einsum("nab,nbc->nac", dd, dxy_dXc)
    J_rot = np.einsum("nab,nbc->nac", dpix_dXc, rotate_points_jacobian(rotvec, pts))
    J_t = dpix_dXc
    J_point = np.einsum("nab,bc->nac", dpix_dXc, R)
    J_focal = np.stack([xd, yd], axis=1)[:, :, None]
    J_dist = np.zeros((n, 2, 2))
    J_dist[:, 0, 0] = focal * x * r2
    J_dist[:, 1, 0] = focal * y * r2
    J_dist[:, 0, 1] = focal * x * r2 * r2
    J_dist[:, 1, 1] = focal * y * r2 * r2

    return pixels, valid, {
        "rot": J_rot,
        "t": J_t,
        "point": J_point,
        "focal": J_focal,
        "dist": J_dist,
    }
