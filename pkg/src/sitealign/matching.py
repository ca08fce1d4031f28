"""Interest points, descriptor matching, robust two-view geometry, tracks.

The built-in detector is a FAST-style segment test with an oriented
256-bit binary patch descriptor; it exists so the pipeline is
self-contained and deterministic. Stronger third-party matchers can be
injected through plain-text match files (see :func:`load_match_file`).

Every RANSAC here is seeded and iteration-capped, so identical inputs and
seeds give identical outputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateConfiguration,
    ImageTooSmall,
    InsufficientMatches,
    ValidationError,
)
from .imutil import box_blur, to_gray

log = logging.getLogger(__name__)

DESCRIPTOR_BITS = 256
RATIO_TEST = 0.8
MAX_FEATURES = 4000
RANSAC_MAX_ITERATIONS = 2000
RANSAC_CONFIDENCE = 0.999
INLIER_THRESHOLD_FRAC = 0.01  # of image width
HOMOGRAPHY_GATE = 0.80

# FAST ring of 16 offsets (dx, dy), radius 3
_RING = np.array(
    [
        (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
        (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
    ]
)
# segment-test arc length: 9 of 16 (a right-angle corner subtends 11)
_ARC = 9
_PATCH_MARGIN = 22

# fixed sampling pattern for the 256 descriptor comparisons
_pattern_rng = np.random.default_rng(1408)
_PATTERN = np.clip(_pattern_rng.normal(scale=6.0, size=(DESCRIPTOR_BITS, 2, 2)), -14, 14)


@dataclass(frozen=True)
class Feature:
    """An interest point with a 256-bit descriptor packed into 32 bytes."""

    position: np.ndarray  # (x, y) pixels
    descriptor: np.ndarray  # (32,) uint8
    response: float

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(2))
        object.__setattr__(self, "descriptor", np.asarray(self.descriptor, dtype=np.uint8))


@dataclass
class PairMatches:
    """Index pairs between two images' feature lists."""

    image_a: str
    image_b: str
    pairs: np.ndarray  # (n, 2) int indices
    inlier_mask: np.ndarray  # (n,) bool, refined by F-RANSAC

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=int).reshape(-1, 2)
        self.inlier_mask = np.asarray(self.inlier_mask, dtype=bool).reshape(-1)
        if len(self.inlier_mask) != len(self.pairs):
            raise ValidationError("inlier mask length differs from pair count")
        for col in range(2):
            vals = self.pairs[:, col]
            if len(np.unique(vals)) != len(vals):
                raise ValidationError("matches must be one-to-one per side")


@dataclass(frozen=True)
class Homography:
    """3x3 plane-induced map between two images, plus its RANSAC support."""

    matrix: np.ndarray
    inlier_ratio: float
    inlier_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float).reshape(3, 3)
        if abs(np.linalg.det(m)) < 1e-12:
            raise DegenerateConfiguration("homography is singular")
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        object.__setattr__(self, "matrix", m)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ph = np.hstack([pts, np.ones((len(pts), 1))]) @ self.matrix.T
        with np.errstate(divide="ignore", invalid="ignore"):
            return ph[:, :2] / ph[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(
            np.linalg.inv(self.matrix), self.inlier_ratio, self.inlier_mask
        )


def passes_homography_gate(inlier_ratio: float, gate: float = HOMOGRAPHY_GATE) -> bool:
    """The single source of truth for the viewpoint-grouping predicate."""
    return inlier_ratio >= gate


def detect_features(
    image: np.ndarray,
    max_features: int = MAX_FEATURES,
    threshold: float = 0.06,
) -> list[Feature]:
    """FAST-style corners plus oriented binary patch descriptors.

    Deterministic: candidates are non-max suppressed on the corner score
    and ordered by (response desc, y, x) before the top-N cut; two calls
    on the same image return bitwise-identical features.

    Raises
    ------
    ImageTooSmall
        When the shorter image side is under 32 px.
    """
    gray = to_gray(image)
    h, w = gray.shape
    if min(h, w) < 32:
        raise ImageTooSmall(f"minimum dimension {min(h, w)} < 32")

    m = 3
    center = gray[m : h - m, m : w - m]
    ring = np.empty(center.shape + (16,))
    for k, (dx, dy) in enumerate(_RING):
        ring[..., k] = gray[m + dy : h - m + dy, m + dx : w - m + dx]
    brighter = ring > (center[..., None] + threshold)
    darker = ring < (center[..., None] - threshold)

    def has_arc(flags):
        hit = np.zeros(center.shape, dtype=bool)
        for start in range(16):
            seg = flags[..., (start + np.arange(_ARC)) % 16]
            hit |= seg.all(axis=-1)
        return hit

    corner = has_arc(brighter) | has_arc(darker)
    diff = np.abs(ring - center[..., None])
    score = np.where(corner, np.maximum(diff - threshold, 0.0).sum(axis=-1), 0.0)

    full = np.zeros((h, w))
    full[m : h - m, m : w - m] = score
    # 3x3 non-max suppression, ties kept (strictly-greater neighbors suppress)
    neigh = np.full((h, w), -np.inf)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            shifted = np.full((h, w), -np.inf)
            ys = slice(max(0, dy), h + min(0, dy))
            xs = slice(max(0, dx), w + min(0, dx))
            ys_src = slice(max(0, -dy), h + min(0, -dy))
            xs_src = slice(max(0, -dx), w + min(0, -dx))
            shifted[ys, xs] = full[ys_src, xs_src]
            neigh = np.maximum(neigh, shifted)
    keep = (full > 0) & (full >= neigh)
    keep[:_PATCH_MARGIN, :] = False
    keep[-_PATCH_MARGIN:, :] = False
    keep[:, :_PATCH_MARGIN] = False
    keep[:, -_PATCH_MARGIN:] = False

    ys, xs = np.nonzero(keep)
    if len(ys) == 0:
        return []

    # Harris cornerness gate: segment-test responses along aliased straight
    # edges carry near-identical descriptors and poison matching
    blur1 = box_blur(gray, 1)
    gy, gx = np.gradient(blur1)
    ixx = box_blur(gx * gx, 2)
    iyy = box_blur(gy * gy, 2)
    ixy = box_blur(gx * gy, 2)
    harris = (
        ixx[ys, xs] * iyy[ys, xs]
        - ixy[ys, xs] ** 2
        - 0.05 * (ixx[ys, xs] + iyy[ys, xs]) ** 2
    )
    corner_like = harris > 0
    ys, xs = ys[corner_like], xs[corner_like]
    if len(ys) == 0:
        return []
    responses = full[ys, xs]
    order = np.lexsort((xs, ys, -responses))[:max_features]
    ys, xs, responses = ys[order], xs[order], responses[order]

    smoothed = box_blur(gray, 3)
    descriptors = _describe(smoothed, xs, ys)
    return [
        Feature(position=(float(x), float(y)), descriptor=d, response=float(r))
        for x, y, r, d in zip(xs, ys, responses, descriptors)
    ]


def _describe(smoothed: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Oriented BRIEF-style bits for each keypoint, packed to 32 bytes."""
    n = len(xs)
    # orientation from the intensity centroid of a radius-7 disk
    r = 7
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    disk = (dx**2 + dy**2) <= r * r
    dxs = dx[disk]
    dys = dy[disk]
    patches = smoothed[ys[:, None] + dys[None, :], xs[:, None] + dxs[None, :]]
    m10 = patches @ dxs
    m01 = patches @ dys
    theta = np.arctan2(m01, m10)
    # quantized steering keeps bits stable under small orientation jitter
    theta = np.round(theta / (2 * np.pi / 30)) * (2 * np.pi / 30)

    cos = np.cos(theta)
    sin = np.sin(theta)
    bits = np.empty((n, DESCRIPTOR_BITS), dtype=bool)
    pa = _PATTERN[:, 0]
    pb = _PATTERN[:, 1]
    for k in range(DESCRIPTOR_BITS):
        ax = np.rint(cos * pa[k, 0] - sin * pa[k, 1]).astype(int)
        ay = np.rint(sin * pa[k, 0] + cos * pa[k, 1]).astype(int)
        bx = np.rint(cos * pb[k, 0] - sin * pb[k, 1]).astype(int)
        by = np.rint(sin * pb[k, 0] + cos * pb[k, 1]).astype(int)
        va = smoothed[ys + ay, xs + ax]
        vb = smoothed[ys + by, xs + bx]
        bits[:, k] = va < vb
    return np.packbits(bits, axis=1)


def hamming_distances(da: np.ndarray, db: np.ndarray) -> np.ndarray:
    """All-pairs Hamming distances between packed descriptor arrays.

    Computed exactly via float32 matmuls (`popcount(a^b) = |a| + |b| - 2 a.b`),
    which BLAS makes far faster than byte-wise popcounts.
    """
    a = np.unpackbits(np.atleast_2d(da), axis=1).astype(np.float32)
    b = np.unpackbits(np.atleast_2d(db), axis=1).astype(np.float32)
    cross = a @ b.T
    return a.sum(axis=1)[:, None] + b.sum(axis=1)[None, :] - 2.0 * cross


def match_pair(
    feats_a: list[Feature],
    feats_b: list[Feature],
    image_a: str = "a",
    image_b: str = "b",
    ratio: float = RATIO_TEST,
) -> PairMatches:
    """Mutual-nearest-neighbor Hamming matching with a ratio test.

    One-to-one by construction. May return an empty match set.
    """
    if len(feats_a) == 0 or len(feats_b) == 0:
        raise ValidationError("both feature lists must be non-empty")
    da = np.stack([f.descriptor for f in feats_a])
    db = np.stack([f.descriptor for f in feats_b])
    dist = hamming_distances(da, db)
    nn_ab = np.argmin(dist, axis=1)
    nn_ba = np.argmin(dist, axis=0)
    pairs = []
    for ia, ib in enumerate(nn_ab):
        if nn_ba[ib] != ia:
            continue
        row = dist[ia]
        d1 = row[ib]
        if len(row) > 1:
            d2 = np.partition(row, 1)[1]
            if not d1 < ratio * d2:
                continue
        pairs.append((ia, int(ib)))
    pairs = np.array(pairs, dtype=int).reshape(-1, 2)
    return PairMatches(
        image_a=image_a,
        image_b=image_b,
        pairs=pairs,
        inlier_mask=np.ones(len(pairs), dtype=bool),
    )


def _hartley_normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    T = np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1]])
    ph = np.hstack([pts, np.ones((len(pts), 1))]) @ T.T
    return ph, T


def _eight_point(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Normalized 8-point fundamental matrix (rank-2 enforced).

    Raises DegenerateConfiguration when the design system is rank
    deficient (no unique solution up to scale).
    """
    ah, Ta = _hartley_normalize(pa)
    bh, Tb = _hartley_normalize(pb)
    A = np.stack(
        [
            bh[:, 0] * ah[:, 0], bh[:, 0] * ah[:, 1], bh[:, 0],
            bh[:, 1] * ah[:, 0], bh[:, 1] * ah[:, 1], bh[:, 1],
            ah[:, 0], ah[:, 1], np.ones(len(ah)),
        ],
        axis=1,
    )
    _, sv, Vt = np.linalg.svd(A)
    if sv[7] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("fundamental-matrix system is rank deficient")
    F = Vt[-1].reshape(3, 3)
    U, D, Vt2 = np.linalg.svd(F)
    F = U @ np.diag([D[0], D[1], 0.0]) @ Vt2
    F = Tb.T @ F @ Ta
    F /= np.linalg.norm(F)
    flat = F.ravel()
    lead = flat[np.argmax(np.abs(flat))]
    if lead < 0:
        F = -F
    return F


def sampson_distance(F: np.ndarray, pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """First-order geometric distance (pixels) of matches to the epipolar
    constraint ``pb' F pa = 0``."""
    ah = np.hstack([pa, np.ones((len(pa), 1))])
    bh = np.hstack([pb, np.ones((len(pb), 1))])
    Fa = ah @ F.T
    Ftb = bh @ F
    num = np.sum(bh * Fa, axis=1) ** 2
    den = Fa[:, 0] ** 2 + Fa[:, 1] ** 2 + Ftb[:, 0] ** 2 + Ftb[:, 1] ** 2
    return np.sqrt(num / np.maximum(den, 1e-300))


def estimate_fundamental(
    pts_a: np.ndarray,
    pts_b: np.ndarray,
    image_width: int,
    threshold_frac: float = INLIER_THRESHOLD_FRAC,
    seed: int = 0,
    max_iterations: int = RANSAC_MAX_ITERATIONS,
    confidence: float = RANSAC_CONFIDENCE,
) -> tuple[np.ndarray, np.ndarray]:
    """RANSAC + normalized 8-point fundamental matrix.

    Inliers are matches with Sampson distance within ``threshold_frac`` of
    the image width (inclusive). Returns (F, inlier mask).

    Raises
    ------
    InsufficientMatches
        Fewer than 8 matches.
    DegenerateConfiguration
        No non-degenerate model explains the data.
    """
    pa = np.asarray(pts_a, dtype=float).reshape(-1, 2)
    pb = np.asarray(pts_b, dtype=float).reshape(-1, 2)
    n = len(pa)
    if n < 8 or len(pb) != n:
        raise InsufficientMatches(f"need >= 8 matches, got {n}")
    threshold = threshold_frac * image_width
    rng = np.random.default_rng(seed)
    best_mask = np.zeros(n, dtype=bool)
    best_F = None
    needed = max_iterations
    i = 0
    degenerate_samples = 0
    while i < min(needed, max_iterations):
        idx = rng.choice(n, size=8, replace=False)
        try:
            F = _eight_point(pa[idx], pb[idx])
        except DegenerateConfiguration:
            degenerate_samples += 1
            i += 1
            continue
        mask = sampson_distance(F, pa, pb) <= threshold
        if mask.sum() > best_mask.sum():
            best_mask, best_F = mask, F
            w = best_mask.sum() / n
            denom = np.log1p(-min(w**8, 1 - 1e-12))
            needed = int(np.ceil(np.log(1 - confidence) / denom)) if denom < 0 else 0
        i += 1
    if best_F is None:
        raise DegenerateConfiguration(
            f"all {degenerate_samples} sampled minimal sets were degenerate"
        )
    if best_mask.sum() >= 8:
        try:
            refit = _eight_point(pa[best_mask], pb[best_mask])
            refit_mask = sampson_distance(refit, pa, pb) <= threshold
            if refit_mask.sum() >= best_mask.sum():
                return refit, refit_mask
        except DegenerateConfiguration:
            pass
    return best_F, best_mask


def _dlt_homography(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    ah, Ta = _hartley_normalize(pa)
    bh, Tb = _hartley_normalize(pb)
    n = len(ah)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:3] = ah
    A[0::2, 6:9] = -bh[:, 0:1] * ah
    A[1::2, 3:6] = ah
    A[1::2, 6:9] = -bh[:, 1:2] * ah
    _, sv, Vt = np.linalg.svd(A)
    if sv[7] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("homography system is rank deficient")
    H = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Tb) @ H @ Ta
    if abs(np.linalg.det(H)) < 1e-12:
        raise DegenerateConfiguration("estimated homography is singular")
    return H


def estimate_homography(
    pts_a: np.ndarray,
    pts_b: np.ndarray,
    image_width: int,
    threshold_frac: float = INLIER_THRESHOLD_FRAC,
    seed: int = 0,
    max_iterations: int = RANSAC_MAX_ITERATIONS,
    confidence: float = RANSAC_CONFIDENCE,
) -> Homography:
    """RANSAC + DLT homography ``pb ~ H pa``.

    The reported ``inlier_ratio`` feeds the 80% viewpoint-grouping gate.

    Raises
    ------
    InsufficientMatches
        Fewer than 4 matches.
    """
    pa = np.asarray(pts_a, dtype=float).reshape(-1, 2)
    pb = np.asarray(pts_b, dtype=float).reshape(-1, 2)
    n = len(pa)
    if n < 4 or len(pb) != n:
        raise InsufficientMatches(f"need >= 4 matches, got {n}")
    threshold = threshold_frac * image_width
    rng = np.random.default_rng(seed)

    def transfer_error(H):
        ph = np.hstack([pa, np.ones((n, 1))]) @ H.T
        with np.errstate(divide="ignore", invalid="ignore"):
            proj = ph[:, :2] / ph[:, 2:3]
        err = np.linalg.norm(proj - pb, axis=1)
        return np.where(np.abs(ph[:, 2]) > 1e-12, err, np.inf)

    best_mask = np.zeros(n, dtype=bool)
    best_H = None
    needed = max_iterations
    i = 0
    while i < min(needed, max_iterations):
        idx = rng.choice(n, size=4, replace=False)
        try:
            H = _dlt_homography(pa[idx], pb[idx])
        except DegenerateConfiguration:
            i += 1
            continue
        mask = transfer_error(H) <= threshold
        if mask.sum() > best_mask.sum():
            best_mask, best_H = mask, H
            w = best_mask.sum() / n
            denom = np.log1p(-min(w**4, 1 - 1e-12))
            needed = int(np.ceil(np.log(1 - confidence) / denom)) if denom < 0 else 0
        i += 1
    if best_H is None:
        raise DegenerateConfiguration("no valid homography hypothesis found")
    if best_mask.sum() >= 4:
        try:
            refit = _dlt_homography(pa[best_mask], pb[best_mask])
            refit_mask = transfer_error(refit) <= threshold
            if refit_mask.sum() >= best_mask.sum():
                best_H, best_mask = refit, refit_mask
        except DegenerateConfiguration:
            pass
    return Homography(
        matrix=best_H,
        inlier_ratio=float(best_mask.sum() / n),
        inlier_mask=best_mask,
    )


@dataclass(frozen=True)
class Track:
    """One presumed 3D point: at most one feature per image."""

    track_id: int
    observations: tuple[tuple[str, int], ...]  # sorted (image id, feature index)

    def images(self) -> list[str]:
        return [img for img, _ in self.observations]

    def feature_in(self, image_id: str) -> int | None:
        for img, feat in self.observations:
            if img == image_id:
                return feat
        return None


@dataclass
class TrackGraph:
    tracks: list[Track]
    counts_per_image: dict[str, int]

    def tracks_with_image(self, image_id: str) -> list[Track]:
        return [t for t in self.tracks if t.feature_in(image_id) is not None]


def build_tracks(pair_matches: list[PairMatches]) -> TrackGraph:
    """Union-find merge of pairwise inlier matches into multi-image tracks.

    Tracks that would contain two features of one image are inconsistent
    and dropped entirely.
    """
    parent: dict[tuple[str, int], tuple[str, int]] = {}

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(a, b):
        parent.setdefault(a, a)
        parent.setdefault(b, b)
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for pm in pair_matches:
        for (ia, ib), ok in zip(pm.pairs, pm.inlier_mask):
            if ok:
                union((pm.image_a, int(ia)), (pm.image_b, int(ib)))

    groups: dict[tuple[str, int], list[tuple[str, int]]] = {}
    for node in parent:
        groups.setdefault(find(node), []).append(node)

    track_list = []
    counts: dict[str, int] = {}
    for members in sorted(groups.values(), key=lambda ms: sorted(ms)[0]):
        members = sorted(members)
        images = [img for img, _ in members]
        if len(set(images)) != len(images):
            continue  # inconsistent: two features of one image
        if len(members) < 2:
            continue
        tid = len(track_list)
        track_list.append(Track(track_id=tid, observations=tuple(members)))
        for img in images:
            counts[img] = counts.get(img, 0) + 1
    return TrackGraph(tracks=track_list, counts_per_image=counts)


def load_match_file(
    path, image_sizes: dict[str, tuple[int, int]]
) -> tuple[list[PairMatches], dict[str, np.ndarray]]:
    """Parse an injected-match file of ``imageA imageB xA yA xB yB`` rows.

    Positions are validated against ``image_sizes`` (width, height).
    Repeated identical positions within an image collapse to one feature
    index so injected matches chain into tracks. Returns the pair matches
    plus per-image (n, 2) position tables the match indices refer to.
    """
    registries: dict[str, dict[tuple[float, float], int]] = {}
    pair_lists: dict[tuple[str, str], list[tuple[int, int]]] = {}

    def feature_index(image: str, x: float, y: float) -> int:
        if image not in image_sizes:
            raise ValidationError(f"match file references unknown image {image!r}")
        w, h = image_sizes[image]
        if not (0 <= x < w and 0 <= y < h):
            raise ValidationError(f"match position ({x}, {y}) outside image {image!r}")
        reg = registries.setdefault(image, {})
        return reg.setdefault((x, y), len(reg))

    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValidationError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            img_a, img_b = parts[0], parts[1]
            try:
                xa, ya, xb, yb = (float(v) for v in parts[2:])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: non-numeric coordinate") from exc
            ia = feature_index(img_a, xa, ya)
            ib = feature_index(img_b, xb, yb)
            pair_lists.setdefault((img_a, img_b), []).append((ia, ib))

    out = []
    for (img_a, img_b), pairs in sorted(pair_lists.items()):
        arr = np.array(pairs, dtype=int).reshape(-1, 2)
        # drop duplicate rows while preserving order
        _, first = np.unique(arr, axis=0, return_index=True)
        arr = arr[np.sort(first)]
        out.append(
            PairMatches(
                image_a=img_a,
                image_b=img_b,
                pairs=arr,
                inlier_mask=np.ones(len(arr), dtype=bool),
            )
        )
    positions = {
        image: np.array(sorted(reg, key=reg.get), dtype=float).reshape(-1, 2)
        for image, reg in registries.items()
    }
    return out, positions
