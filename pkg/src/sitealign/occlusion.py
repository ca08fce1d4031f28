"""Static and dynamic occlusion masks.

Static: triangulated cloud points that sit in front of the building model
along their viewing ray (more than 0.3 m nearer, or with normals more
than 30 degrees apart) mark their superpixels as occluded; the sparse
verdicts are flooded through SLIC superpixels and smoothed with a
cross-bilateral filter.

Dynamic: the per-pixel median over a pixel-aligned time-lapse (excluding
the target frame) gives a clean background; the squared HSV difference
against it, cross-bilaterally smoothed, is thresholded at 0.05 in any
channel.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import InsufficientFrames, NoCloudCoverage, ValidationError
from .geometry import Intrinsics, Pose, project_many
from .imutil import rgb_to_hsv, rgb_to_lab, to_gray
from .scene import BuildingModel
from .timelapse import AlignedStack

DEPTH_GAP_M = 0.3
NORMAL_ANGLE_RAD = np.pi / 6.0
DYNAMIC_THRESHOLD = 0.05
NORMAL_NEIGHBORS = 12
SLIC_COMPACTNESS = 10.0
SLIC_PIXELS_PER_REGION = 1024
BILATERAL_SIGMA_SPATIAL = 8.0
BILATERAL_SIGMA_RANGE = 0.1
STATIC_CONFIDENCE_THRESHOLD = 0.5


@dataclass(frozen=True)
class OcclusionSample:
    """One triangulated point compared against the model surface along
    the same camera ray."""

    point: np.ndarray  # p, world
    model_point: np.ndarray  # first mesh intersection on the ray
    normal_point: np.ndarray  # unit normal from the point's cloud neighbors
    normal_model: np.ndarray  # unit mesh normal at the intersection
    depth_gap: float  # positive when p is nearer the camera, meters
    pixel: np.ndarray


@dataclass
class OcclusionMask:
    image_id: str
    kind: str  # static | dynamic
    mask: np.ndarray  # (H, W) bool
    confidence: np.ndarray  # (H, W) float in [0, 1], post-filter pre-threshold
    parameters: dict


def classify_sample(sample: OcclusionSample) -> bool:
    """True iff the point occludes the model: strictly more than 0.3 m
    nearer the camera, or normals strictly more than 30 degrees apart."""
    if sample.depth_gap > DEPTH_GAP_M:
        return True
    cos = float(np.clip(sample.normal_point @ sample.normal_model, -1.0, 1.0))
    return bool(np.arccos(cos) > NORMAL_ANGLE_RAD)


def estimate_cloud_normals(points: np.ndarray, k: int = NORMAL_NEIGHBORS) -> np.ndarray:
    """Per-point unit normals from the smallest principal axis of the k
    nearest neighbors. Orientation is left to the caller."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise ValidationError("need at least 3 cloud points for normals")
    k = min(k, len(pts) - 1)
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k + 1)
    normals = np.empty_like(pts)
    for i, nb in enumerate(idx):
        nbrs = pts[nb]
        centered = nbrs - nbrs.mean(axis=0)
        _, _, Vt = np.linalg.svd(centered, full_matrices=False)
        normals[i] = Vt[-1]
    return normals


def slic_superpixels(image: np.ndarray, k: int, compactness: float = SLIC_COMPACTNESS) -> np.ndarray:
    """SLIC: k-means over (L, a, b, x, y) with grid seeding, 10 iterations,
    and connectivity enforcement. Labels are contiguous from 0.

    ``k`` is the requested region count; the result may deviate slightly
    after the connectivity merge.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    img = np.asarray(image, dtype=float)
    h, w = img.shape[:2]
    if k == 1:
        return np.zeros((h, w), dtype=int)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    lab = rgb_to_lab(img)
    n = h * w
    interval = np.sqrt(n / k)
    # seed grid covering about k cells: least overshoot, then squarest
    # cells, then prefer columns (breaks symmetric k-means ties)
    candidates = []
    for nx in range(1, min(k, w) + 1):
        ny = int(np.ceil(k / nx))
        if ny > h:
            continue
        aspect = abs(np.log((w / nx) / (h / ny)))
        candidates.append((nx * ny - k, aspect, -nx, nx, ny))
    _, _, _, nx, ny = min(candidates)
    step = max(int(max(interval, w / nx, h / ny)), 1)

    # grid seeds, nudged to the lowest-gradient neighbor in a 3x3 window
    gray = to_gray(img)
    gy, gx = np.gradient(gray)
    grad = gx * gx + gy * gy
    seeds = []
    ys = ((np.arange(ny) + 0.5) * h / ny).astype(int)
    xs = ((np.arange(nx) + 0.5) * w / nx).astype(int)
    for sy in ys:
        for sx in xs:
            best = (grad[sy, sx], sy, sx)
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    py, px = sy + dy, sx + dx
                    if 0 <= py < h and 0 <= px < w and grad[py, px] < best[0]:
                        best = (grad[py, px], py, px)
            seeds.append((best[1], best[2]))
    centers = np.array(
        [[lab[sy, sx, 0], lab[sy, sx, 1], lab[sy, sx, 2], float(sx), float(sy)] for sy, sx in seeds]
    )

    yy, xx = np.mgrid[0:h, 0:w]
    labels = np.full((h, w), -1, dtype=int)
    dists = np.full((h, w), np.inf)
    m2 = (compactness / step) ** 2
    for _ in range(10):
        labels.fill(-1)
        dists.fill(np.inf)
        for ci, c in enumerate(centers):
            x0 = max(int(c[3]) - step, 0)
            x1 = min(int(c[3]) + step + 1, w)
            y0 = max(int(c[4]) - step, 0)
            y1 = min(int(c[4]) + step + 1, h)
            if x0 >= x1 or y0 >= y1:
                continue
            patch = lab[y0:y1, x0:x1]
            d_lab = np.sum((patch - c[:3]) ** 2, axis=2)
            d_xy = (xx[y0:y1, x0:x1] - c[3]) ** 2 + (yy[y0:y1, x0:x1] - c[4]) ** 2
            d = d_lab + m2 * d_xy
            better = d < dists[y0:y1, x0:x1]
            dists[y0:y1, x0:x1][better] = d[better]
            labels[y0:y1, x0:x1][better] = ci
        # update centers
        for ci in range(len(centers)):
            mask = labels == ci
            if not mask.any():
                continue
            centers[ci, :3] = lab[mask].mean(axis=0)
            centers[ci, 3] = xx[mask].mean()
            centers[ci, 4] = yy[mask].mean()

    # connectivity: orphaned fragments merge into their largest neighbor
    out = np.full((h, w), -1, dtype=int)
    next_label = 0
    min_size = max((step * step) // 4, 1)
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    for ci in range(len(centers)):
        mask = labels == ci
        if not mask.any():
            continue
        sub, n_sub = ndimage.label(mask, structure=structure)
        sizes = ndimage.sum_labels(np.ones((h, w)), sub, index=np.arange(1, n_sub + 1))
        main = int(np.argmax(sizes)) + 1
        for s in range(1, n_sub + 1):
            part = sub == s
            if s == main or sizes[s - 1] >= min_size:
                out[part] = next_label
                next_label += 1
            else:
                out[part] = -2  # fragment: absorb below
    if (out == -2).any():
        # absorb fragments into the nearest labeled neighbor iteratively
        while (out == -2).any():
            frag = out == -2
            dilated = ndimage.grey_dilation(out, size=3, mode="nearest")
            fill = frag & (dilated >= 0)
            if not fill.any():
                out[frag] = 0
                break
            out[fill] = dilated[fill]
    # compact label ids
    uniq = np.unique(out)
    remap = np.zeros(uniq.max() + 1, dtype=int)
    remap[uniq] = np.arange(len(uniq))
    return remap[out]


def cross_bilateral(
    signal: np.ndarray,
    guide: np.ndarray,
    sigma_spatial: float = BILATERAL_SIGMA_SPATIAL,
    sigma_range: float = BILATERAL_SIGMA_RANGE,
) -> np.ndarray:
    """Cross-bilateral filter: Gaussian spatial weights modulated by the
    guide image's range distances; edge-preserving w.r.t. the guide.

    ``sigma_spatial -> 0`` degenerates to the identity.
    """
    sig = np.asarray(signal, dtype=float)
    gd = np.asarray(guide, dtype=float)
    if sig.shape[:2] != gd.shape[:2]:
        raise ValidationError("signal and guide dimensions differ")
    if sigma_spatial <= 0:
        return sig.copy()
    if gd.ndim == 2:
        gd = gd[:, :, None]
    radius = int(np.ceil(3.0 * sigma_spatial))
    h, w = sig.shape[:2]
    acc = np.zeros_like(sig, dtype=float)
    norm = np.zeros((h, w))
    inv_2ss = 1.0 / (2.0 * sigma_spatial**2)
    inv_2sr = 1.0 / (2.0 * sigma_range**2)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            ws = np.exp(-(dx * dx + dy * dy) * inv_2ss)
            if ws < 1e-6:
                continue
            ys0, ys1 = max(0, dy), min(h, h + dy)
            xs0, xs1 = max(0, dx), min(w, w + dx)
            yt0, yt1 = max(0, -dy), min(h, h - dy)
            xt0, xt1 = max(0, -dx), min(w, w - dx)
            g_shift = gd[ys0:ys1, xs0:xs1]
            g_here = gd[yt0:yt1, xt0:xt1]
            wr = np.exp(-np.sum((g_shift - g_here) ** 2, axis=2) * inv_2sr) * ws
            s_shift = sig[ys0:ys1, xs0:xs1]
            if sig.ndim == 3:
                acc[yt0:yt1, xt0:xt1] += s_shift * wr[:, :, None]
            else:
                acc[yt0:yt1, xt0:xt1] += s_shift * wr
            norm[yt0:yt1, xt0:xt1] += wr
    norm = np.maximum(norm, 1e-12)
    return acc / (norm[:, :, None] if sig.ndim == 3 else norm)


def build_samples(
    cloud: np.ndarray,
    camera_pose: Pose,
    intr: Intrinsics,
    model: BuildingModel,
    date: dt.date,
) -> list[OcclusionSample]:
    """Project cloud points into the view and pair each with the first
    model intersection along its camera ray; points whose ray misses the
    model (at the date's snapshot) are discarded."""
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(cloud) < 3:
        raise NoCloudCoverage("point cloud too sparse")
    pixels, in_front = project_many(cloud, camera_pose, intr)
    inb = (
        in_front
        & (pixels[:, 0] >= 0)
        & (pixels[:, 0] < intr.width)
        & (pixels[:, 1] >= 0)
        & (pixels[:, 1] < intr.height)
    )
    if not inb.any():
        raise NoCloudCoverage("no cloud points project into this view")
    normals = estimate_cloud_normals(cloud)
    center = camera_pose.center
    active = set(model.snapshot_at(date).visible)
    samples = []
    for i in np.flatnonzero(inb):
        p = cloud[i]
        ray = p - center
        dist_p = float(np.linalg.norm(ray))
        if dist_p < 1e-9:
            continue
        direction = ray / dist_p
        hit = model.raycast(center, direction, active=active)
        if hit is None:
            continue
        n_p = normals[i]
        if n_p @ direction > 0:  # orient toward the camera
            n_p = -n_p
        n_m = hit.normal
        if n_m @ direction > 0:
            n_m = -n_m
        samples.append(
            OcclusionSample(
                point=p,
                model_point=hit.point,
                normal_point=n_p,
                normal_model=n_m,
                depth_gap=float(hit.t - dist_p),
                pixel=pixels[i],
            )
        )
    if not samples:
        raise NoCloudCoverage("no cloud points project onto the model")
    return samples


def static_mask(
    image: np.ndarray,
    camera_pose: Pose,
    intr: Intrinsics,
    cloud: np.ndarray,
    model: BuildingModel,
    date: dt.date,
    image_id: str = "",
    superpixel_count: int | None = None,
) -> OcclusionMask:
    """Occlusion mask for scene structure in front of the model.

    Classify cloud samples (depth gap / normal test), flood the SLIC
    superpixels containing at least one occluder sample, smooth the
    binary flood with the cross-bilateral filter (guide = image), and
    threshold at 0.5.

    Raises
    ------
    NoCloudCoverage
        No triangulated point projects onto the model in this view.
    """
    samples = build_samples(cloud, camera_pose, intr, model, date)
    h, w = image.shape[:2]
    k = superpixel_count or max((h * w) // SLIC_PIXELS_PER_REGION, 16)
    labels = slic_superpixels(image, k)
    flood = np.zeros(labels.max() + 1, dtype=bool)
    for s in samples:
        if classify_sample(s):
            col = min(int(s.pixel[0]), w - 1)
            row = min(int(s.pixel[1]), h - 1)
            flood[labels[row, col]] = True
    pre = flood[labels].astype(float)
    confidence = np.clip(cross_bilateral(pre, image), 0.0, 1.0)
    return OcclusionMask(
        image_id=image_id,
        kind="static",
        mask=confidence > STATIC_CONFIDENCE_THRESHOLD,
        confidence=confidence,
        parameters={
            "depth_gap_m": DEPTH_GAP_M,
            "normal_angle_deg": float(np.degrees(NORMAL_ANGLE_RAD)),
            "superpixels": int(labels.max() + 1),
            "samples": len(samples),
            "occluder_samples": int(flood.sum()),
            "threshold": STATIC_CONFIDENCE_THRESHOLD,
            "date": date.isoformat(),
        },
    )


def hsv_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared per-channel HSV difference with circular hue distance."""
    ha = rgb_to_hsv(a)
    hb = rgb_to_hsv(b)
    dh = np.abs(ha[..., 0] - hb[..., 0])
    dh = np.minimum(dh, 1.0 - dh)
    ds = ha[..., 1] - hb[..., 1]
    dv = ha[..., 2] - hb[..., 2]
    return np.stack([dh * dh, ds * ds, dv * dv], axis=-1)


def dynamic_mask(
    stack: AlignedStack,
    target: str,
    threshold: float = DYNAMIC_THRESHOLD,
) -> tuple[OcclusionMask, np.ndarray]:
    """Transient-object mask for one frame of an aligned stack.

    The background is the per-pixel median over the other frames' valid
    samples; the squared HSV difference to it is cross-bilaterally
    smoothed (guide = target frame) and thresholded: a pixel is masked
    when any channel exceeds ``threshold``. Returns (mask, background).

    Raises
    ------
    InsufficientFrames
        No frame besides the target covers the stack.
    """
    ti = stack.frame_index(target)
    others = [i for i in range(len(stack.image_ids)) if i != ti]
    if not others:
        raise InsufficientFrames("stack holds no frame besides the target")
    frames = stack.frames[others]
    valid = stack.valid[others]
    data = np.where(valid[..., None], frames, np.nan)
    with np.errstate(all="ignore"):
        background = np.nanmedian(data, axis=0)
    covered = valid.any(axis=0)
    background = np.where(covered[..., None], background, stack.frames[ti])
    diff = hsv_difference(stack.frames[ti], background)
    smoothed = cross_bilateral(diff, stack.frames[ti])
    mask = (smoothed > threshold).any(axis=-1) & covered & stack.valid[ti]
    confidence = np.clip(smoothed.max(axis=-1) / max(2.0 * threshold, 1e-9), 0.0, 1.0)
    confidence[~(covered & stack.valid[ti])] = 0.0
    return (
        OcclusionMask(
            image_id=target,
            kind="dynamic",
            mask=mask,
            confidence=confidence,
            parameters={
                "threshold": threshold,
                "frames_used": [stack.image_ids[i] for i in others],
                "reference": stack.reference,
            },
        ),
        background,
    )
