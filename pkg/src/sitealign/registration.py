"""Pose and structure solvers.

All solvers are Levenberg-Marquardt over minimal parameterizations:
poses are 6-vectors (axis-angle + translation), scene points triangulated
through an anchor camera carry a single depth along the anchor's ray, and
anchor poses are never part of the parameter vector. Reprojection
residuals everywhere use a Huber loss with width equal to 1% of the image
width.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from . import matching
from .errors import (
    InsufficientCorrespondences,
    NarrowBaseline,
    NoConsensus,
    ValidationError,
)
from .geometry import Intrinsics, Pose, pixel_ray, project_with_jacobians, undistorted_pixel
from .lm import LMResult, huber_scale, lm_minimize

log = logging.getLogger(__name__)

USER_PICKED = "user-picked"
HOMOGRAPHY_TRANSFERRED = "homography-transferred"

HUBER_FRAC = 0.01  # Huber width as a fraction of image width
PNP_MAX_ITERATIONS = 100
PNP_REL_TOL = 1e-12


@dataclass(frozen=True)
class Correspondence2D3D:
    """A picked or transferred 2D pixel <-> 3D model-surface point pair."""

    pixel: np.ndarray
    model_point: np.ndarray
    source: str = USER_PICKED

    def __post_init__(self):
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=float).reshape(2))
        object.__setattr__(
            self, "model_point", np.asarray(self.model_point, dtype=float).reshape(3)
        )
        if self.source not in (USER_PICKED, HOMOGRAPHY_TRANSFERRED):
            raise ValidationError(f"unknown correspondence source {self.source!r}")


@dataclass(frozen=True)
class EpipolarConstraint:
    """A normalized image line paired with the anchor-picked model point
    whose projection should fall on it."""

    line: np.ndarray  # (a, b, c) with a^2 + b^2 == 1, pixel units
    model_point: np.ndarray

    def __post_init__(self):
        line = np.asarray(self.line, dtype=float).reshape(3)
        n = float(np.hypot(line[0], line[1]))
        if n < 1e-12:
            raise ValidationError("degenerate epipolar line (a, b) ~ 0")
        object.__setattr__(self, "line", line / n)
        object.__setattr__(
            self, "model_point", np.asarray(self.model_point, dtype=float).reshape(3)
        )


@dataclass(frozen=True)
class Camera:
    """A registered image: intrinsics + world-to-camera pose.

    Anchor cameras were registered from user picks; their pose is frozen
    during bundle adjustment (intrinsics may still change).
    """

    image_id: str
    intrinsics: Intrinsics
    pose: Pose
    is_anchor: bool = False

    @property
    def center(self) -> np.ndarray:
        return self.pose.center


class AnchorRay(NamedTuple):
    origin: np.ndarray
    direction: np.ndarray
    depth: float

    def point(self) -> np.ndarray:
        return self.origin + self.depth * self.direction


@dataclass(frozen=True)
class ScenePoint:
    """A triangulated track. Points seen by an anchor are pinned to the
    anchor's viewing ray and move only along it."""

    position: np.ndarray
    track_id: int
    anchor_ray: AnchorRay | None = None

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))


class Observation(NamedTuple):
    """Index-based observation used by bundle adjustment."""

    camera: int
    point: int
    pixel: np.ndarray


class ModelObservation(NamedTuple):
    """A camera's view of a fixed model-surface point (picked or
    homography-transferred). The 3D point is not a parameter; these
    residuals keep the reconstruction pinned to model coordinates."""

    camera: int
    point: np.ndarray
    pixel: np.ndarray


def _as_pixel_model_arrays(corrs) -> tuple[np.ndarray, np.ndarray]:
    pixels = np.array([np.asarray(c.pixel, dtype=float) for c in corrs]).reshape(-1, 2)
    points = np.array([np.asarray(c.model_point, dtype=float) for c in corrs]).reshape(-1, 3)
    return pixels, points


def solve_pnp(
    corrs: Sequence[Correspondence2D3D],
    intr: Intrinsics,
    init: Pose,
) -> tuple[Pose, float]:
    """Recover a camera pose from >= 4 2D-3D correspondences.

    LM over the 6 pose parameters with intrinsics held fixed at zero
    radial distortion. Returns the pose and the final reprojection RMS in
    pixels.

    Raises
    ------
    InsufficientCorrespondences
        Fewer than 4 correspondences.
    SolverDiverged
        Non-finite cost at the initial pose (e.g. points behind it).
    """
    return solve_constrained_pnp(
        [(c.model_point, c.pixel) for c in corrs], [], intr, init, _min_corrs=4
    )


def solve_constrained_pnp(
    track_corrs: Sequence[tuple[np.ndarray, np.ndarray]],
    epi: Sequence[EpipolarConstraint],
    intr: Intrinsics,
    init: Pose,
    _min_corrs: int = 4,
) -> tuple[Pose, float]:
    """Pose from track correspondences plus anchor epipolar constraints.

    Jointly minimizes the reprojection error of ``track_corrs`` (pairs of
    3D point, observed pixel) and the point-to-line distance from each
    projected anchor model point to its epipolar line. With ``epi`` empty
    this is exactly :func:`solve_pnp`.
    """
    if len(track_corrs) < _min_corrs:
        raise InsufficientCorrespondences(
            f"need >= {_min_corrs} correspondences, got {len(track_corrs)}"
        )
    points = np.array([np.asarray(p, dtype=float) for p, _ in track_corrs]).reshape(-1, 3)
    pixels = np.array([np.asarray(u, dtype=float) for _, u in track_corrs]).reshape(-1, 2)
    epi_points = np.array([c.model_point for c in epi]).reshape(-1, 3)
    epi_lines = np.array([c.line for c in epi]).reshape(-1, 3)
    delta = HUBER_FRAC * intr.width

    def fun(x):
        pose_pix, valid, J = project_with_jacobians(
            points, x[:3], x[3:], intr.focal, 0.0, 0.0, intr.width, intr.height
        )
        r = (pose_pix - pixels).ravel()
        Jp = np.concatenate([J["rot"], J["t"]], axis=2).reshape(-1, 6)
        if not valid.all():
            r = np.where(np.repeat(valid, 2), r, np.nan)
        if len(epi) > 0:
            e_pix, e_valid, Je = project_with_jacobians(
                epi_points, x[:3], x[3:], intr.focal, 0.0, 0.0, intr.width, intr.height
            )
            # signed distance to the normalized line
            d = np.sum(e_pix * epi_lines[:, :2], axis=1) + epi_lines[:, 2]
            Jd = np.einsum(
                "na,nab->nb", epi_lines[:, :2], np.concatenate([Je["rot"], Je["t"]], axis=2)
            )
            d = np.where(e_valid, d, np.nan)
            r = np.concatenate([r, d])
            Jp = np.concatenate([Jp, Jd], axis=0)
        r_s, drv = huber_scale(r, delta)
        return r_s, Jp * drv[:, None]

    result = lm_minimize(fun, init.params(), PNP_MAX_ITERATIONS, PNP_REL_TOL)
    pose = Pose.from_params(result.x)
    rms = reprojection_rms(points, pixels, pose, intr)
    return pose, rms


def reprojection_rms(points: np.ndarray, pixels: np.ndarray, pose: Pose, intr: Intrinsics) -> float:
    """Unrobust RMS pixel error of zero-distortion projections."""
    pix, valid, _ = project_with_jacobians(
        points, pose.rotvec, pose.t, intr.focal, 0.0, 0.0, intr.width, intr.height
    )
    err = np.linalg.norm(pix - pixels, axis=1)
    if not valid.all():
        return float("inf")
    return float(np.sqrt(np.mean(err**2))) if len(err) else 0.0


def ransac_pnp(
    track_corrs: Sequence[tuple[np.ndarray, np.ndarray]],
    intr: Intrinsics,
    init: Pose,
    epi: Sequence[EpipolarConstraint] = (),
    threshold_frac: float = 0.01,
    max_iterations: int = 2000,
    confidence: float = 0.999,
    seed: int = 0,
) -> tuple[Pose, np.ndarray]:
    """RANSAC-robust pose: minimal 4-point LM hypotheses, consensus by
    reprojection error within ``threshold_frac`` of the image width
    (inclusive), then refinement on the inliers -- constrained by the
    anchor epipolar lines when any are supplied.

    Raises
    ------
    NoConsensus
        When the best hypothesis supports fewer than 4 inliers.
    """
    n = len(track_corrs)
    if n < 4:
        raise InsufficientCorrespondences(f"need >= 4 correspondences, got {n}")
    points = np.array([np.asarray(p, dtype=float) for p, _ in track_corrs]).reshape(-1, 3)
    pixels = np.array([np.asarray(u, dtype=float) for _, u in track_corrs]).reshape(-1, 2)
    threshold = threshold_frac * intr.width
    rng = np.random.default_rng(seed)

    def errors(pose: Pose) -> np.ndarray:
        pix, valid, _ = project_with_jacobians(
            points, pose.rotvec, pose.t, intr.focal, 0.0, 0.0, intr.width, intr.height
        )
        err = np.linalg.norm(pix - pixels, axis=1)
        return np.where(valid, err, np.inf)

    best_mask = np.zeros(n, dtype=bool)
    best_pose = None
    needed = max_iterations
    i = 0
    while i < min(needed, max_iterations):
        idx = rng.choice(n, size=4, replace=False)
        subset = [track_corrs[j] for j in idx]
        try:
            pose, _ = solve_constrained_pnp(subset, [], intr, init)
        except Exception:
            i += 1
            continue
        mask = errors(pose) <= threshold
        if mask.sum() > best_mask.sum():
            best_mask, best_pose = mask, pose
            w = best_mask.sum() / n
            if w > 0:
                denom = np.log1p(-min(w**4, 1 - 1e-12))
                needed = int(np.ceil(np.log(1 - confidence) / denom)) if denom < 0 else 0
        i += 1
    if best_pose is None or best_mask.sum() < 4:
        raise NoConsensus(f"best consensus {int(best_mask.sum())} < 4 of {n}")
    inlier_corrs = [track_corrs[j] for j in np.flatnonzero(best_mask)]
    refined, _ = solve_constrained_pnp(inlier_corrs, epi, intr, best_pose)
    final_mask = errors(refined) <= threshold
    if final_mask.sum() >= 4:
        return refined, final_mask
    return best_pose, best_mask


def triangulate(
    observations: Sequence[tuple[Camera, np.ndarray]],
    track_id: int = -1,
    min_angle_deg: float = 2.0,
) -> ScenePoint:
    """Triangulate a track from >= 2 registered observations.

    Midpoint initialization followed by LM refinement of the reprojection
    error. When any observation comes from an anchor camera the point is
    parameterized by depth along that anchor's pixel ray (first anchor in
    the observation order), and the returned point carries the ray.

    Raises
    ------
    NarrowBaseline
        All pairs of viewing rays are closer than ``min_angle_deg``.
    """
    if len(observations) < 2:
        raise ValidationError(f"need >= 2 observations, got {len(observations)}")
    origins = []
    dirs = []
    for cam, pixel in observations:
        o, d = pixel_ray(np.asarray(pixel, dtype=float), cam.pose, cam.intrinsics)
        origins.append(o)
        dirs.append(d)
    origins = np.array(origins)
    dirs = np.array(dirs)

    dots = np.clip(np.abs(dirs @ dirs.T), -1.0, 1.0)
    iu = np.triu_indices(len(dirs), k=1)
    max_angle = float(np.degrees(np.max(np.arccos(dots[iu]))))
    if max_angle < min_angle_deg:
        raise NarrowBaseline(
            f"max pairwise ray angle {max_angle:.3f} deg < {min_angle_deg} deg"
        )

    # midpoint: closest point to all rays
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for o, d in zip(origins, dirs):
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ o
    p0 = np.linalg.lstsq(A, b, rcond=None)[0]

    anchor_idx = next((i for i, (cam, _) in enumerate(observations) if cam.is_anchor), None)

    def residuals_free(x):
        rs = []
        Js = []
        for cam, pixel in observations:
            pix, valid, J = project_with_jacobians(
                x[None, :],
                cam.pose.rotvec,
                cam.pose.t,
                cam.intrinsics.focal,
                cam.intrinsics.k1,
                cam.intrinsics.k2,
                cam.intrinsics.width,
                cam.intrinsics.height,
            )
            r = (pix[0] - pixel) if valid[0] else np.full(2, np.nan)
            r_s, drv = huber_scale(r, HUBER_FRAC * cam.intrinsics.width)
            rs.append(r_s)
            Js.append(J["point"][0] * drv[:, None])
        return np.concatenate(rs), np.vstack(Js)

    if anchor_idx is None:
        result = lm_minimize(residuals_free, p0, PNP_MAX_ITERATIONS, PNP_REL_TOL)
        return ScenePoint(position=result.x, track_id=track_id)

    origin = origins[anchor_idx]
    direction = dirs[anchor_idx]
    depth0 = max(float((p0 - origin) @ direction), 1e-6)

    def residuals_depth(x):
        p = origin + x[0] * direction
        r, J = residuals_free(p)
        return r, (J @ direction)[:, None]

    result = lm_minimize(residuals_depth, np.array([depth0]), PNP_MAX_ITERATIONS, PNP_REL_TOL)
    depth = float(result.x[0])
    ray = AnchorRay(origin=origin, direction=direction, depth=depth)
    return ScenePoint(position=ray.point(), track_id=track_id, anchor_ray=ray)


def epipolar_lines_from_anchor(
    anchor: Camera,
    anchor_corrs: Sequence[Correspondence2D3D],
    anchor_px: np.ndarray,
    target_px: np.ndarray,
    target_width: int,
    seed: int = 0,
) -> list[EpipolarConstraint]:
    """Epipolar-line constraints for a target image being registered.

    Estimates the fundamental matrix between the anchor image and the
    target from their feature matches (``anchor_px[i] <-> target_px[i]``),
    then maps every user-picked anchor pixel to its line in the target,
    paired with the picked 3D model point. Picks at the epipole produce a
    degenerate line and are dropped with a warning.

    Raises
    ------
    InsufficientMatches
        Fewer than 8 matches between anchor and target.
    """
    if len(anchor_corrs) == 0:
        return []
    anchor_px = np.asarray(anchor_px, dtype=float).reshape(-1, 2)
    target_px = np.asarray(target_px, dtype=float).reshape(-1, 2)
    anchor_und = np.array([undistorted_pixel(p, anchor.intrinsics) for p in anchor_px])
    F, _ = matching.estimate_fundamental(anchor_und, target_px, target_width, seed=seed)
    constraints = []
    for corr in anchor_corrs:
        u = undistorted_pixel(corr.pixel, anchor.intrinsics)
        line = F @ np.array([u[0], u[1], 1.0])
        if np.hypot(line[0], line[1]) < 1e-9:
            log.warning(
                "anchor pick %s lies at the epipole; dropping its epipolar constraint", corr.pixel
            )
            continue
        constraints.append(EpipolarConstraint(line=line, model_point=corr.model_point))
    return constraints


# --- constrained bundle adjustment ------------------------------------------


@dataclass
class _BALayout:
    """Column layout of the bundle parameter vector."""

    pose_cols: dict[int, int]
    intr_cols: dict[int, int]
    point_cols: dict[int, int]
    depth_points: set[int]
    size: int


def _ba_layout(
    cameras: Sequence[Camera],
    points: Sequence[ScenePoint],
    intrinsics_groups: "Sequence[int] | None" = None,
) -> _BALayout:
    """``intrinsics_groups[i]`` assigns camera i to a shared intrinsics
    block (images from one physical camera); default is one block each."""
    col = 0
    pose_cols = {}
    intr_cols = {}
    group_col: dict[int, int] = {}
    point_cols = {}
    depth_points = set()
    for i, cam in enumerate(cameras):
        if not cam.is_anchor:
            pose_cols[i] = col
            col += 6
        group = intrinsics_groups[i] if intrinsics_groups is not None else i
        if group not in group_col:
            group_col[group] = col
            col += 3
        intr_cols[i] = group_col[group]
    for j, pt in enumerate(points):
        point_cols[j] = col
        if pt.anchor_ray is not None:
            depth_points.add(j)
            col += 1
        else:
            col += 3
    return _BALayout(pose_cols, intr_cols, point_cols, depth_points, col)


def _ba_pack(cameras, points, layout: _BALayout) -> np.ndarray:
    x = np.zeros(layout.size)
    seen_intr = set()
    for i, cam in enumerate(cameras):
        if i in layout.pose_cols:
            x[layout.pose_cols[i] : layout.pose_cols[i] + 6] = cam.pose.params()
        c = layout.intr_cols[i]
        if c in seen_intr:
            continue  # shared block: first camera of the group seeds it
        seen_intr.add(c)
        x[c : c + 3] = [cam.intrinsics.focal, cam.intrinsics.k1, cam.intrinsics.k2]
    for j, pt in enumerate(points):
        c = layout.point_cols[j]
        if j in layout.depth_points:
            x[c] = pt.anchor_ray.depth
        else:
            x[c : c + 3] = pt.position
    return x


def _ba_unpack(x, cameras, points, layout: _BALayout):
    new_cams = []
    for i, cam in enumerate(cameras):
        c = layout.intr_cols[i]
        intr = cam.intrinsics.with_params(focal=x[c], k1=x[c + 1], k2=x[c + 2])
        if i in layout.pose_cols:
            pose = Pose.from_params(x[layout.pose_cols[i] : layout.pose_cols[i] + 6])
        else:
            pose = cam.pose  # anchor: same object, bit-identical
        new_cams.append(replace(cam, intrinsics=intr, pose=pose))
    new_points = []
    for j, pt in enumerate(points):
        c = layout.point_cols[j]
        if j in layout.depth_points:
            ray = pt.anchor_ray._replace(depth=float(x[c]))
            new_points.append(replace(pt, position=ray.point(), anchor_ray=ray))
        else:
            new_points.append(replace(pt, position=x[c : c + 3].copy()))
    return new_cams, new_points


def constrained_bundle_adjust(
    cameras: Sequence[Camera],
    points: Sequence[ScenePoint],
    observations: Sequence[Observation],
    model_observations: Sequence[ModelObservation] = (),
    max_iterations: int = 100,
    rel_tol: float = 1e-12,
    focal_prior_frac: float = 0.15,
    distortion_prior_sigma: float = 0.05,
    prior_intrinsics: "Sequence[tuple[float, float, float]] | None" = None,
    intrinsics_groups: "Sequence[int] | None" = None,
) -> tuple[list[Camera], list[ScenePoint], float | None]:
    """Joint refinement of cameras and triangulated points.

    Parameters are the non-anchor poses (6 each), every camera's
    intrinsics (focal, k1, k2 -- anchors included), free points (3 each),
    and anchor-ray points (1 depth each). Anchor poses stay out of the
    parameter vector entirely, so they are returned bit-identical.

    ``model_observations`` are reprojections of fixed model-surface points
    (the picked/transferred correspondences of registered cameras). They
    are required to pin the reconstruction's gauge: without them the scene
    scale about a lone anchor's center is a zero-cost direction.

    Weak priors hold each camera's intrinsics near their entry values
    (sigma ``focal_prior_frac * focal`` and ``distortion_prior_sigma``):
    views whose support is nearly planar otherwise slide freely along the
    focal-versus-depth ambiguity. Pass non-positive values to disable.

    With no points or observations the inputs are returned unchanged and
    the RMS is None (adjustment skipped).
    """
    cameras = list(cameras)
    points = list(points)
    if len(points) == 0 or len(observations) == 0:
        return cameras, points, None
    layout = _ba_layout(cameras, points, intrinsics_groups)
    x0 = _ba_pack(cameras, points, layout)

    obs_by_cam: dict[int, list] = {}
    for ob in observations:
        if ob.camera >= len(cameras) or ob.point >= len(points):
            raise ValidationError("observation references an unknown camera or point")
        obs_by_cam.setdefault(ob.camera, []).append(ob)
    for ob in model_observations:
        if ob.camera >= len(cameras):
            raise ValidationError("model observation references an unknown camera")
        obs_by_cam.setdefault(ob.camera, []).append(ob)
    use_priors = focal_prior_frac > 0 and distortion_prior_sigma > 0
    n_prior = 3 * len(cameras) if use_priors else 0
    n_res = 2 * (len(observations) + len(model_observations)) + n_prior
    if prior_intrinsics is not None:
        prior_center = np.asarray(prior_intrinsics, dtype=float).reshape(len(cameras), 3)
    else:
        prior_center = np.array(
            [[c.intrinsics.focal, c.intrinsics.k1, c.intrinsics.k2] for c in cameras]
        )
    prior_sigma = np.stack(
        [
            np.maximum(prior_center[:, 0] * focal_prior_frac, 1e-6),
            np.full(len(cameras), distortion_prior_sigma),
            np.full(len(cameras), distortion_prior_sigma),
        ],
        axis=1,
    )

    anchor_dirs = {j: points[j].anchor_ray.direction for j in layout.depth_points}
    anchor_origins = {j: points[j].anchor_ray.origin for j in layout.depth_points}

    # precompute per-camera vectorized observation tables
    cam_tables = []
    row0 = 0
    for ci, obs in obs_by_cam.items():
        n = len(obs)
        kind = np.array(
            [
                0 if isinstance(ob, ModelObservation) else (1 if ob.point in layout.depth_points else 2)
                for ob in obs
            ]
        )
        fixed_pts = np.array(
            [ob.point if isinstance(ob, ModelObservation) else (0.0, 0.0, 0.0) for ob in obs],
            dtype=float,
        )
        pcols = np.array(
            [0 if isinstance(ob, ModelObservation) else layout.point_cols[ob.point] for ob in obs]
        )
        dirs = np.array(
            [
                anchor_dirs[ob.point] if (not isinstance(ob, ModelObservation)) and ob.point in layout.depth_points else (0.0, 0.0, 0.0)
                for ob in obs
            ]
        )
        origins = np.array(
            [
                anchor_origins[ob.point] if (not isinstance(ob, ModelObservation)) and ob.point in layout.depth_points else (0.0, 0.0, 0.0)
                for ob in obs
            ]
        )
        pixels = np.array([ob.pixel for ob in obs], dtype=float)
        cam_tables.append(
            {
                "ci": ci,
                "row0": row0,
                "kind": kind,
                "fixed_pts": fixed_pts,
                "pcols": pcols,
                "dirs": dirs,
                "origins": origins,
                "pixels": pixels,
            }
        )
        row0 += 2 * n

    def _emit(rows_out, cols_out, vals_out, base_rows, col0, block, drv):
        """Append COO triplets for an (n, 2, w) block at fixed columns."""
        n, _, wdt = block.shape
        rr = (base_rows[:, None, None] + np.arange(2)[None, :, None]).repeat(wdt, axis=2)
        cc = np.broadcast_to(np.asarray(col0).reshape(-1, 1, 1) + np.arange(wdt), (n, 2, wdt))
        rows_out.append(rr.ravel())
        cols_out.append(cc.ravel())
        vals_out.append((block * drv[:, :, None]).ravel())

    def fun(x):
        r = np.zeros(n_res)
        rows_out, cols_out, vals_out = [], [], []
        for tab in cam_tables:
            ci = tab["ci"]
            cam = cameras[ci]
            if ci in layout.pose_cols:
                pc = layout.pose_cols[ci]
                rotvec = x[pc : pc + 3]
                t = x[pc + 3 : pc + 6]
            else:
                rotvec, t = cam.pose.rotvec, cam.pose.t
            ic = layout.intr_cols[ci]
            focal, k1, k2 = x[ic], x[ic + 1], x[ic + 2]
            kind = tab["kind"]
            n = len(kind)
            pts = tab["fixed_pts"].copy()
            depth_m = kind == 1
            free_m = kind == 2
            if depth_m.any():
                pts[depth_m] = tab["origins"][depth_m] + (
                    x[tab["pcols"][depth_m]][:, None] * tab["dirs"][depth_m]
                )
            if free_m.any():
                fc = tab["pcols"][free_m]
                pts[free_m] = np.stack([x[fc], x[fc + 1], x[fc + 2]], axis=1)
            pix, valid, J = project_with_jacobians(
                pts, rotvec, t, focal, k1, k2, cam.intrinsics.width, cam.intrinsics.height
            )
            res = pix - tab["pixels"]
            res[~valid] = np.nan
            r_s, drv = huber_scale(res.ravel(), HUBER_FRAC * cam.intrinsics.width)
            r[tab["row0"] : tab["row0"] + 2 * n] = r_s
            drv = drv.reshape(-1, 2)
            base_rows = tab["row0"] + 2 * np.arange(n)
            if ci in layout.pose_cols:
                pc = layout.pose_cols[ci]
                _emit(rows_out, cols_out, vals_out, base_rows, pc, J["rot"], drv)
                _emit(rows_out, cols_out, vals_out, base_rows, pc + 3, J["t"], drv)
            _emit(rows_out, cols_out, vals_out, base_rows, ic, J["focal"], drv)
            _emit(rows_out, cols_out, vals_out, base_rows, ic + 1, J["dist"], drv)
            if depth_m.any():
                Jd = np.einsum("nab,nb->na", J["point"][depth_m], tab["dirs"][depth_m])
                _emit(
                    rows_out,
                    cols_out,
                    vals_out,
                    base_rows[depth_m],
                    tab["pcols"][depth_m],
                    Jd[:, :, None],
                    drv[depth_m],
                )
            if free_m.any():
                _emit(
                    rows_out,
                    cols_out,
                    vals_out,
                    base_rows[free_m],
                    tab["pcols"][free_m],
                    J["point"][free_m],
                    drv[free_m],
                )
        if use_priors:
            base = n_res - n_prior
            for i in range(len(cameras)):
                # cameras sharing an intrinsics block each contribute their
                # prior row; with identical centers these simply stack
                ic = layout.intr_cols[i]
                vals = (x[ic : ic + 3] - prior_center[i]) / prior_sigma[i]
                r[base + 3 * i : base + 3 * i + 3] = vals
                rows_out.append(base + 3 * i + np.arange(3))
                cols_out.append(ic + np.arange(3))
                vals_out.append(1.0 / prior_sigma[i])
        Jmat = sp.coo_matrix(
            (np.concatenate(vals_out), (np.concatenate(rows_out), np.concatenate(cols_out))),
            shape=(n_res, layout.size),
        )
        return r, Jmat

    result: LMResult = lm_minimize(fun, x0, max_iterations, rel_tol)
    new_cams, new_points = _ba_unpack(result.x, cameras, points, layout)
    rms = _ba_rms(new_cams, new_points, observations)
    return new_cams, new_points, rms


def _ba_rms(cameras, points, observations) -> float:
    total = 0.0
    for ob in observations:
        cam = cameras[ob.camera]
        pix, valid, _ = project_with_jacobians(
            points[ob.point].position[None, :],
            cam.pose.rotvec,
            cam.pose.t,
            cam.intrinsics.focal,
            cam.intrinsics.k1,
            cam.intrinsics.k2,
            cam.intrinsics.width,
            cam.intrinsics.height,
        )
        if valid[0]:
            total += float(np.sum((pix[0] - ob.pixel) ** 2))
        else:
            return float("inf")
    return float(np.sqrt(total / max(len(observations), 1)))
