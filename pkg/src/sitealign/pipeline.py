"""Incremental model-assisted registration.

One anchor image registered from user picks drives the rest: images that
match a registered anchor up to a strong homography inherit its picks and
solve PnP directly; the remaining images are ordered by how few of their
features lie on triangulable tracks (fewest over a threshold first, to
favor wide baselines while staying reliable) and registered by robust
PnP constrained with the anchor's epipolar lines. Bundle adjustment runs
between steps with anchor poses frozen. When no automatic branch applies,
the pipeline suspends with a structured assist request; answering it
registers a new anchor and resumes the loop.

Everything is deterministic given the image set, the config seed, and the
sequence of supplied assist answers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import matching
from .errors import (
    InsufficientCorrespondences,
    InsufficientMatches,
    NarrowBaseline,
    NoConsensus,
    SiteAlignError,
    SolverDiverged,
    UnknownId,
    ValidationError,
)
from .geometry import Intrinsics, Pose, project_many
from .registration import (
    HOMOGRAPHY_TRANSFERRED,
    Camera,
    Correspondence2D3D,
    ModelObservation,
    Observation,
    ScenePoint,
    constrained_bundle_adjust,
    epipolar_lines_from_anchor,
    ransac_pnp,
    solve_pnp,
    triangulate,
)
from .scene import BuildingModel

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    """Every tunable threshold, with the published defaults."""

    homography_gate: float = 0.80
    track_threshold: int = 60
    # pairs whose epipolar verification keeps fewer inliers than this, or a
    # smaller inlier fraction, are treated as unrelated: small or incoherent
    # match sets always admit some accidental fundamental matrix, which would
    # weld unrelated viewpoint clusters together
    min_pair_inliers: int = 15
    min_pair_inlier_ratio: float = 0.4
    # a robust-PnP registration needs this many supporting inliers to count
    min_registration_inliers: int = 12
    min_ray_angle_deg: float = 2.0
    inlier_frac: float = 0.01  # of image width
    ratio_test: float = 0.8
    max_features: int = 4000
    fast_threshold: float = 0.03
    ransac_iterations: int = 2000
    ransac_confidence: float = 0.999
    default_fov_deg: float = 50.0
    huber_frac: float = 0.01
    seed: int = 0
    propagate_from_all_registered: bool = False  # anchors only, per the method
    # one shared intrinsics block per identical metadata signature (images
    # shot by one physical camera); stabilizes near-planar view clusters
    share_intrinsics: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            ("homography_gate", 0.0 < self.homography_gate <= 1.0),
            ("track_threshold", self.track_threshold >= 1),
            ("min_ray_angle_deg", 0.0 <= self.min_ray_angle_deg < 90.0),
            ("inlier_frac", 0.0 < self.inlier_frac <= 0.5),
            ("ratio_test", 0.0 < self.ratio_test <= 1.0),
            ("max_features", self.max_features >= 8),
            ("fast_threshold", 0.0 < self.fast_threshold < 1.0),
            ("ransac_iterations", self.ransac_iterations >= 1),
            ("ransac_confidence", 0.0 < self.ransac_confidence < 1.0),
            ("default_fov_deg", 1.0 <= self.default_fov_deg < 180.0),
            ("huber_frac", 0.0 < self.huber_frac <= 1.0),
            ("min_pair_inliers", self.min_pair_inliers >= 8),
            ("min_pair_inlier_ratio", 0.0 <= self.min_pair_inlier_ratio <= 1.0),
            ("min_registration_inliers", self.min_registration_inliers >= 4),
        ]
        for name, ok in checks:
            if not ok:
                raise ValidationError(f"config {name}={getattr(self, name)!r} out of range")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class ImageMeta:
    width: int
    height: int
    focal_px: float | None = None
    capture_time: str | None = None  # ISO-8601

    def intrinsics(self, default_fov_deg: float) -> Intrinsics:
        if self.focal_px is not None:
            return Intrinsics(self.focal_px, 0.0, 0.0, self.width, self.height)
        return Intrinsics.from_fov(default_fov_deg, self.width, self.height)


@dataclass
class AssistRequest:
    """The pipeline's structured ask for human correspondences."""

    image_id: str
    reason: str  # disconnected-graph | registration-failure
    detail: str = ""
    suggested_model_points: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "image": self.image_id,
            "reason": self.reason,
            "detail": self.detail,
            "suggested_model_points": [[float(v) for v in p] for p in self.suggested_model_points],
        }


@dataclass
class Automatic:
    image_id: str
    track_count: int


@dataclass
class Assist:
    request: AssistRequest
    track_count: int


def choose_next(counts: dict[str, int], threshold: int):
    """The image-selection rule, isolated for table-driven testing.

    Returns ("automatic", image) for the image with the fewest counted
    track features at or above ``threshold`` (favoring wide baselines
    among reliable candidates), else ("assist", image) for the overall
    fewest (the image most likely to reconnect the view graph).
    """
    if not counts:
        raise ValidationError("no unregistered images to choose from")
    eligible = {u: c for u, c in counts.items() if c >= threshold}
    pool = eligible if eligible else counts
    image = min(pool, key=lambda u: (pool[u], u))
    return ("automatic" if eligible else "assist", image, pool[image])


class Pipeline:
    """Single-writer registration state machine over one photo collection."""

    def __init__(
        self,
        images: dict[str, "np.ndarray | None"],
        metadata: dict[str, ImageMeta],
        model: BuildingModel,
        config: PipelineConfig | None = None,
        injected: "tuple[list[matching.PairMatches], dict[str, np.ndarray]] | None" = None,
    ):
        if set(images) != set(metadata):
            raise ValidationError("images and metadata must cover the same ids")
        self.images = dict(images)
        self.metadata = dict(metadata)
        self.model = model
        self.config = config or PipelineConfig()
        self.registered: dict[str, Camera] = {}
        self.unregistered: set[str] = set(images)
        self.anchors: set[str] = set()
        self.correspondences: dict[str, list[Correspondence2D3D]] = {}
        self.scene_points: dict[int, ScenePoint] = {}
        self.events: list[dict] = []
        self.pending_assists: dict[str, AssistRequest] = {}
        self.warnings: list[str] = []
        self._positions: dict[str, np.ndarray] = {}
        self._descriptors: dict[str, "np.ndarray | None"] = {}
        self._matches: dict[tuple[str, str], matching.PairMatches] = {}
        self._track_graph: matching.TrackGraph | None = None
        self._homographies: dict[tuple[str, str], "matching.Homography | None"] = {}
        self._untriangulable: dict[int, int] = {}  # track id -> registered obs at rejection
        self._banned_obs: set[tuple[int, str]] = set()  # (track id, image) outlier links
        self._failed_this_round: set[str] = set()
        if injected is not None:
            pms, positions = injected
            for img in positions:
                if img not in self.images:
                    raise ValidationError(f"injected matches reference unknown image {img!r}")
            self._injected = pms
            for img, pos in positions.items():
                self._positions[img] = pos
                self._descriptors[img] = None
        else:
            self._injected = None

    # --- plumbing -----------------------------------------------------------

    def _event(self, op: str, **details):
        self.events.append({"step": len(self.events), "op": op, **details})

    def intrinsics_for(self, image_id: str) -> Intrinsics:
        if image_id in self.registered:
            return self.registered[image_id].intrinsics
        return self.metadata[image_id].intrinsics(self.config.default_fov_deg)

    def default_init_pose(self) -> Pose:
        """Headless fallback: identity orientation at twice the scene radius."""
        center, radius = self.model.bounding_radius()
        eye = center - np.array([0.0, 0.0, 2.0 * max(radius, 1.0)])
        return Pose(np.zeros(3), -eye)

    def ensure_features(self):
        """Detect features and match every image pair once."""
        if self._track_graph is not None:
            return
        ids = sorted(self.images)
        if self._injected is None:
            for img_id in ids:
                image = self.images[img_id]
                if image is None:
                    raise ValidationError(f"image {img_id!r} has no pixel data to detect on")
                feats = matching.detect_features(
                    image,
                    max_features=self.config.max_features,
                    threshold=self.config.fast_threshold,
                )
                self._positions[img_id] = np.array(
                    [f.position for f in feats], dtype=float
                ).reshape(-1, 2)
                self._descriptors[img_id] = (
                    np.stack([f.descriptor for f in feats])
                    if feats
                    else np.zeros((0, 32), dtype=np.uint8)
                )
                self._event("features", image=img_id, count=len(feats))
            pair_list = []
            for i, a in enumerate(ids):
                for b in ids[i + 1 :]:
                    pm = self._match_and_prune(a, b)
                    if pm is not None:
                        pair_list.append(pm)
        else:
            for img_id in ids:
                self._positions.setdefault(img_id, np.zeros((0, 2)))
                self._descriptors.setdefault(img_id, None)
            pair_list = []
            for pm in self._injected:
                pm = self._prune_pair(pm)
                self._matches[(pm.image_a, pm.image_b)] = pm
                pair_list.append(pm)
            self._event("features", injected=True, pairs=len(pair_list))
        self._track_graph = matching.build_tracks(pair_list)
        self._event(
            "tracks",
            count=len(self._track_graph.tracks),
            per_image=dict(sorted(self._track_graph.counts_per_image.items())),
        )

    def _match_and_prune(self, a: str, b: str) -> "matching.PairMatches | None":
        da, db = self._descriptors[a], self._descriptors[b]
        if da is None or db is None or len(da) == 0 or len(db) == 0:
            return None
        dist = matching.hamming_distances(da, db)
        nn_ab = np.argmin(dist, axis=1)
        nn_ba = np.argmin(dist, axis=0)
        pairs = []
        for ia, ib in enumerate(nn_ab):
            if nn_ba[ib] != ia:
                continue
            row = dist[ia]
            if len(row) > 1:
                d2 = np.partition(row, 1)[1]
                if not row[ib] < self.config.ratio_test * d2:
                    continue
            pairs.append((ia, int(ib)))
        pm = matching.PairMatches(
            image_a=a,
            image_b=b,
            pairs=np.array(pairs, dtype=int).reshape(-1, 2),
            inlier_mask=np.ones(len(pairs), dtype=bool),
        )
        pm = self._prune_pair(pm)
        self._matches[(a, b)] = pm
        return pm

    def _prune_pair(self, pm: matching.PairMatches) -> matching.PairMatches:
        """F-RANSAC pruning of a match set (kept as an inlier mask).

        Pairs that cannot be verified (too few matches) or whose verified
        support is under ``min_pair_inliers`` contribute no inliers: weak
        accidental consensus must not weld unrelated views together.
        """
        verified = False
        if len(pm.pairs) >= 8:
            pa = self._positions[pm.image_a][pm.pairs[:, 0]]
            pb = self._positions[pm.image_b][pm.pairs[:, 1]]
            width = self.metadata[pm.image_a].width

            def passes(mask):
                return (
                    mask.sum() >= self.config.min_pair_inliers
                    and mask.mean() >= self.config.min_pair_inlier_ratio
                )

            try:
                _, mask = matching.estimate_fundamental(
                    pa,
                    pb,
                    width,
                    threshold_frac=self.config.inlier_frac,
                    seed=self.config.seed,
                    max_iterations=self.config.ransac_iterations,
                    confidence=self.config.ransac_confidence,
                )
                pm.inlier_mask = mask
                verified = passes(mask)
            except (InsufficientMatches, SiteAlignError):
                verified = False
            if not verified:
                # rotation/zoom-only pairs are exactly homography-consistent,
                # which makes the fundamental matrix degenerate: verify by
                # homography instead before declaring the pair unrelated
                try:
                    H = matching.estimate_homography(
                        pa,
                        pb,
                        width,
                        threshold_frac=self.config.inlier_frac,
                        seed=self.config.seed,
                        max_iterations=self.config.ransac_iterations,
                        confidence=self.config.ransac_confidence,
                    )
                    if passes(H.inlier_mask):
                        pm.inlier_mask = H.inlier_mask
                        verified = True
                except (InsufficientMatches, SiteAlignError):
                    pass
        if not verified:
            pm.inlier_mask = np.zeros(len(pm.pairs), dtype=bool)
        self._event(
            "pair_matches",
            image_a=pm.image_a,
            image_b=pm.image_b,
            matches=int(len(pm.pairs)),
            inliers=int(pm.inlier_mask.sum()),
        )
        return pm

    def matches_between(self, a: str, b: str) -> tuple[np.ndarray, np.ndarray]:
        """Inlier match positions between two images (possibly swapped)."""
        key = (a, b) if (a, b) in self._matches else (b, a)
        if key not in self._matches:
            return np.zeros((0, 2)), np.zeros((0, 2))
        pm = self._matches[key]
        mask = pm.inlier_mask
        pa = self._positions[pm.image_a][pm.pairs[mask, 0]]
        pb = self._positions[pm.image_b][pm.pairs[mask, 1]]
        if key == (a, b):
            return pa, pb
        return pb, pa

    # --- anchor registration -------------------------------------------------

    def _solve_pnp_restarts(self, corrs, intr, init: Pose, n_restarts: int = 8):
        """PnP with deterministic perturbed restarts; returns the best pose,
        its rms, and all distinct minima (for the planar-ambiguity check)."""
        attempts = [init]
        rng = np.random.default_rng(self.config.seed + 101)
        for _ in range(n_restarts):
            attempts.append(
                Pose(
                    init.rotvec + rng.normal(scale=0.35, size=3),
                    init.t + rng.normal(scale=0.25 * float(np.linalg.norm(init.t) + 1.0), size=3),
                )
            )
        solutions = []
        for p0 in attempts:
            try:
                pose, rms = solve_pnp(corrs, intr, p0)
            except (SolverDiverged, SiteAlignError):
                continue
            solutions.append((rms, pose))
        if not solutions:
            raise SolverDiverged("PnP failed from every restart")
        solutions.sort(key=lambda s: s[0])
        best_rms, best_pose = solutions[0]
        distinct = [best_pose]
        for rms, pose in solutions[1:]:
            if rms > max(2.0 * best_rms, 1e-6 * intr.width):
                continue
            if all(
                np.linalg.norm(pose.center - q.center) > 1e-3 * max(np.linalg.norm(q.center), 1.0)
                for q in distinct
            ):
                distinct.append(pose)
        return best_pose, best_rms, distinct

    def register_anchor(
        self, image_id: str, corrs: list[Correspondence2D3D], init: Pose | None = None
    ) -> Camera:
        """Register an image from user picks and freeze it as an anchor."""
        if image_id not in self.images:
            raise UnknownId(f"unknown image {image_id!r}")
        if len(corrs) < 4:
            raise InsufficientCorrespondences(f"need >= 4 picks, got {len(corrs)}")
        intr = self.intrinsics_for(image_id)
        init = init or self.default_init_pose()
        pose, rms, distinct = self._solve_pnp_restarts(corrs, intr, init)
        planar = _points_coplanar([c.model_point for c in corrs])
        warning = None
        if planar and len(distinct) > 1:
            warning = f"planar picks admit {len(distinct)} pose solutions; using lowest-error one"
            self.warnings.append(f"{image_id}: {warning}")
        cam = Camera(image_id=image_id, intrinsics=intr, pose=pose, is_anchor=True)
        self.registered[image_id] = cam
        self.unregistered.discard(image_id)
        self.anchors.add(image_id)
        self.correspondences[image_id] = list(corrs)
        self.pending_assists.pop(image_id, None)
        self._failed_this_round.discard(image_id)
        self._event(
            "anchor_registered",
            image=image_id,
            corrs=len(corrs),
            rms=rms,
            planar_warning=warning,
        )
        return cam

    # --- homography propagation ----------------------------------------------

    def propagate_by_homography(self) -> list[Camera]:
        """Register every unregistered image that matches a registered
        source image up to a strong homography, by warping the source's
        2D correspondences across."""
        self.ensure_features()
        newly: list[Camera] = []
        changed = True
        while changed:
            changed = False
            sources = sorted(
                self.registered if self.config.propagate_from_all_registered else self.anchors
            )
            for u in sorted(self.unregistered):
                best = None
                for src in sources:
                    if not self.correspondences.get(src):
                        continue
                    H = self._homography_between(src, u)
                    if H is None:
                        continue
                    if not matching.passes_homography_gate(
                        H.inlier_ratio, self.config.homography_gate
                    ):
                        continue
                    if best is None or H.inlier_ratio > best[1].inlier_ratio:
                        best = (src, H)
                if best is None:
                    continue
                src, H = best
                cam = self._register_via_homography(u, src, H)
                if cam is not None:
                    newly.append(cam)
                    changed = True
        return newly

    def _homography_between(self, src: str, u: str) -> "matching.Homography | None":
        """Cached homography (src -> u) over the pair's inlier matches."""
        key = (src, u)
        if key in self._homographies:
            return self._homographies[key]
        pa, pb = self.matches_between(src, u)
        H = None
        if len(pa) >= 8:
            try:
                H = matching.estimate_homography(
                    pa,
                    pb,
                    self.metadata[src].width,
                    threshold_frac=self.config.inlier_frac,
                    seed=self.config.seed,
                    max_iterations=self.config.ransac_iterations,
                    confidence=self.config.ransac_confidence,
                )
                self._event(
                    "homography_tested",
                    image=u,
                    source=src,
                    inlier_ratio=H.inlier_ratio,
                    passes=bool(
                        matching.passes_homography_gate(
                            H.inlier_ratio, self.config.homography_gate
                        )
                    ),
                )
            except SiteAlignError:
                H = None
        self._homographies[key] = H
        return H

    def _register_via_homography(self, u: str, src: str, H: matching.Homography) -> Camera | None:
        src_corrs = self.correspondences[src]
        pix = np.array([c.pixel for c in src_corrs])
        warped = H.apply(pix)
        meta = self.metadata[u]
        inb = (
            (warped[:, 0] >= 0)
            & (warped[:, 0] < meta.width)
            & (warped[:, 1] >= 0)
            & (warped[:, 1] < meta.height)
        )
        kept = [
            Correspondence2D3D(pixel=w, model_point=c.model_point, source=HOMOGRAPHY_TRANSFERRED)
            for w, c, ok in zip(warped, src_corrs, inb)
            if ok
        ]
        if len(kept) < 4:
            self._event(
                "homography_skipped",
                image=u,
                source=src,
                reason="fewer-than-four-in-bounds",
                in_bounds=int(inb.sum()),
            )
            return None
        intr = self.intrinsics_for(u)
        try:
            # warm start from the source camera, no random restarts: with
            # (nearly) coplanar transferred picks the mirror PnP branch can
            # edge out the true one, and only the nearby basin is trustworthy
            pose, rms = solve_pnp(kept, intr, self.registered[src].pose)
            if len(kept) > 4:
                # picks off the homography's plane transfer wrong for wide
                # baselines; keep the consensus subset when one exists
                try:
                    pose_r, mask = ransac_pnp(
                        [(c.model_point, c.pixel) for c in kept],
                        intr,
                        pose,
                        threshold_frac=self.config.inlier_frac,
                        max_iterations=200,
                        seed=self.config.seed,
                    )
                    if 4 <= int(mask.sum()) < len(kept):
                        kept = [c for c, ok in zip(kept, mask) if ok]
                        pose, rms = solve_pnp(kept, intr, pose_r)
                except SiteAlignError:
                    pass
        except SiteAlignError as exc:
            self._event("homography_skipped", image=u, source=src, reason=str(exc))
            return None
        cam = Camera(image_id=u, intrinsics=intr, pose=pose, is_anchor=False)
        self.registered[u] = cam
        self.unregistered.discard(u)
        self.correspondences[u] = kept
        self.pending_assists.pop(u, None)
        self._failed_this_round.discard(u)
        self._event(
            "homography_registered",
            image=u,
            source=src,
            inlier_ratio=H.inlier_ratio,
            corrs=len(kept),
            rms=rms,
        )
        return cam

    # --- track-based selection and registration -------------------------------

    def _registered_obs(self, track: matching.Track) -> list[tuple[Camera, np.ndarray]]:
        obs = []
        for img, feat in track.observations:
            if img in self.registered:
                obs.append((self.registered[img], self._positions[img][feat]))
        return obs

    def candidate_counts(self) -> dict[str, int]:
        """Per unregistered image: its features on triangulable tracks
        (tracks already seen by >= 2 registered images)."""
        self.ensure_features()
        counts = {u: 0 for u in self.unregistered}
        for track in self._track_graph.tracks:
            reg = sum(1 for img, _ in track.observations if img in self.registered)
            if reg < 2:
                continue
            for img, _ in track.observations:
                if img in counts:
                    counts[img] += 1
        return counts

    def select_next_image(self):
        """Fewest matched track features over the threshold; otherwise an
        assist request on the overall fewest (to reconnect the graph)."""
        counts = self.candidate_counts()
        candidates = {u: c for u, c in counts.items() if u not in self.pending_assists}
        kind, image, count = choose_next(candidates, self.config.track_threshold)
        self._event("next_selected", image=image, mode=kind, track_count=count)
        if kind == "automatic":
            return Automatic(image_id=image, track_count=count)
        request = self._make_assist(image, "disconnected-graph", f"{count} matched track features")
        return Assist(request=request, track_count=count)

    def _make_assist(self, image_id: str, reason: str, detail: str) -> AssistRequest:
        suggested = []
        for a in sorted(self.anchors):
            suggested.extend(c.model_point for c in self.correspondences.get(a, []))
        request = AssistRequest(
            image_id=image_id, reason=reason, detail=detail, suggested_model_points=suggested
        )
        self.pending_assists[image_id] = request
        self._event("assist_requested", image=image_id, reason=reason, detail=detail)
        return request

    def _triangulate_for(self, image_id: str) -> list[tuple[int, np.ndarray]]:
        """Triangulate tracks that include ``image_id`` and >= 2 registered
        views. Returns (track id, pixel in image) pairs for the usable ones."""
        out = []
        for track in self._track_graph.tracks:
            feat = track.feature_in(image_id)
            if feat is None:
                continue
            if track.track_id not in self.scene_points:
                obs_count = sum(1 for img, _ in track.observations if img in self.registered)
                if obs_count < 2 or self._untriangulable.get(track.track_id, 0) >= obs_count:
                    continue
                sp = self._try_triangulate(track)
                if sp is None:
                    self._untriangulable[track.track_id] = obs_count
                    continue
                self.scene_points[track.track_id] = sp
            out.append((track.track_id, self._positions[image_id][feat]))
        return out

    def _best_anchor_for(self, image_id: str) -> str | None:
        best = None
        for a in sorted(self.anchors):
            pa, _ = self.matches_between(a, image_id)
            if len(pa) >= 8 and (best is None or len(pa) > best[1]):
                best = (a, len(pa))
        return best[0] if best else None

    def _init_pose_for(self, image_id: str) -> Pose:
        """Warm start: the registered camera sharing the most inlier matches."""
        best = None
        for r in sorted(self.registered):
            pa, _ = self.matches_between(r, image_id)
            if best is None or len(pa) > best[1]:
                best = (r, len(pa))
        return self.registered[best[0]].pose if best else self.default_init_pose()

    def register_by_tracks(self, image_id: str) -> Camera:
        """Robust PnP on the image's triangulated track correspondences,
        constrained by epipolar lines from the best-matched anchor."""
        tri = self._triangulate_for(image_id)
        corrs = [(self.scene_points[tid].position, px) for tid, px in tri]
        if len(corrs) < 4:
            raise InsufficientCorrespondences(
                f"only {len(corrs)} triangulated correspondences for {image_id!r}"
            )
        intr = self.intrinsics_for(image_id)
        epi = []
        anchor_id = self._best_anchor_for(image_id)
        if anchor_id is not None:
            pa, pb = self.matches_between(anchor_id, image_id)
            try:
                epi = epipolar_lines_from_anchor(
                    self.registered[anchor_id],
                    self.correspondences[anchor_id],
                    pa,
                    pb,
                    intr.width,
                    seed=self.config.seed,
                )
            except SiteAlignError:
                epi = []
        pose, inliers = ransac_pnp(
            corrs,
            intr,
            self._init_pose_for(image_id),
            epi=epi,
            threshold_frac=self.config.inlier_frac,
            max_iterations=self.config.ransac_iterations,
            confidence=self.config.ransac_confidence,
            seed=self.config.seed,
        )
        if int(inliers.sum()) < self.config.min_registration_inliers:
            raise NoConsensus(
                f"only {int(inliers.sum())} PnP inliers of {len(corrs)} for {image_id!r} "
                f"(need {self.config.min_registration_inliers})"
            )
        cam = Camera(image_id=image_id, intrinsics=intr, pose=pose, is_anchor=False)
        self.registered[image_id] = cam
        self.unregistered.discard(image_id)
        self.pending_assists.pop(image_id, None)
        self._failed_this_round.discard(image_id)
        self._event(
            "track_registered",
            image=image_id,
            corrs=len(corrs),
            inliers=int(inliers.sum()),
            epipolar_constraints=len(epi),
        )
        return cam

    # --- bundle adjustment -----------------------------------------------------

    def _try_triangulate(self, track: matching.Track) -> "ScenePoint | None":
        """Triangulate a track and vet it by reprojection; retries with the
        worst observation dropped (a single bad link contaminates a track)."""
        entries = [
            (img, self.registered[img], self._positions[img][feat])
            for img, feat in track.observations
            if img in self.registered and (track.track_id, img) not in self._banned_obs
        ]
        if len(entries) < 2:
            return None
        threshold = self.config.inlier_frac * entries[0][1].intrinsics.width
        while len(entries) >= 2:
            try:
                sp = triangulate(
                    [(cam, px) for _, cam, px in entries],
                    track_id=track.track_id,
                    min_angle_deg=self.config.min_ray_angle_deg,
                )
            except (NarrowBaseline, SiteAlignError):
                return None
            errs = []
            for _, cam, px in entries:
                proj, ok = project_many(sp.position[None, :], cam.pose, cam.intrinsics)
                errs.append(float(np.linalg.norm(proj[0] - px)) if ok[0] else np.inf)
            worst = int(np.argmax(errs))
            if errs[worst] <= threshold:
                return sp
            if len(entries) <= 2:
                return None
            self._banned_obs.add((track.track_id, entries[worst][0]))
            entries.pop(worst)
        return None

    def _triangulate_mature_tracks(self):
        """Triangulate every not-yet-triangulated track with >= 2 registered
        observations; keeps bundle adjustment fed as registration grows."""
        if self._track_graph is None:
            return
        for track in self._track_graph.tracks:
            if track.track_id in self.scene_points:
                continue
            obs_count = sum(1 for img, _ in track.observations if img in self.registered)
            if obs_count < 2 or self._untriangulable.get(track.track_id, 0) >= obs_count:
                continue
            sp = self._try_triangulate(track)
            if sp is not None:
                self.scene_points[track.track_id] = sp
            else:
                # narrow or contaminated now; retry once more views register
                self._untriangulable[track.track_id] = obs_count

    def bundle_adjust(self) -> float | None:
        """Constrained bundle adjustment over all registered cameras, their
        model correspondences, and the triangulated points. After a round,
        observations whose residual exceeds the inlier threshold are banned
        (bad track links) and the adjustment re-runs once without them."""
        self._retest_banned_obs()
        self._triangulate_mature_tracks()
        rms = None
        for round_idx in range(3):
            ids = sorted(self.registered)
            cam_index = {img: i for i, img in enumerate(ids)}
            cameras = [self.registered[i] for i in ids]
            point_ids = sorted(self.scene_points)
            pt_index = {tid: j for j, tid in enumerate(point_ids)}
            points = [self.scene_points[t] for t in point_ids]
            observations = []
            obs_keys = []
            if self._track_graph is not None:
                for track in self._track_graph.tracks:
                    if track.track_id not in pt_index:
                        continue
                    for img, feat in track.observations:
                        if img in cam_index and (track.track_id, img) not in self._banned_obs:
                            observations.append(
                                Observation(
                                    cam_index[img],
                                    pt_index[track.track_id],
                                    self._positions[img][feat],
                                )
                            )
                            obs_keys.append((track.track_id, img))
            model_obs = [
                ModelObservation(cam_index[img], c.model_point, c.pixel)
                for img in ids
                for c in self.correspondences.get(img, [])
            ]
            groups = None
            if self.config.share_intrinsics:
                keys = {}
                groups = []
                for i in ids:
                    meta = self.metadata[i]
                    key = (meta.width, meta.height, meta.focal_px)
                    groups.append(keys.setdefault(key, len(keys)))
            new_cams, new_points, rms = constrained_bundle_adjust(
                cameras,
                points,
                observations,
                model_obs,
                prior_intrinsics=[
                    (
                        self.metadata[i].intrinsics(self.config.default_fov_deg).focal,
                        0.0,
                        0.0,
                    )
                    for i in ids
                ],
                intrinsics_groups=groups,
            )
            if rms is None:
                self._event("bundle_adjust", skipped=True)
                return None
            for img, cam in zip(ids, new_cams):
                self.registered[img] = cam
            for tid, pt in zip(point_ids, new_points):
                self.scene_points[tid] = pt
            banned = self._filter_observations(observations, obs_keys)
            self._event(
                "bundle_adjust",
                cameras=len(new_cams),
                points=len(new_points),
                observations=len(observations),
                model_observations=len(model_obs),
                rms=rms,
                banned=banned,
            )
            if banned == 0:
                break
        return rms

    def _retest_banned_obs(self):
        """Un-ban observations that fit the current state again (a camera
        that started badly and later improved gets its links back)."""
        if not self._banned_obs or self._track_graph is None:
            return
        tracks_by_id = {t.track_id: t for t in self._track_graph.tracks}
        for tid, img in sorted(self._banned_obs):
            if tid not in self.scene_points or img not in self.registered:
                continue
            track = tracks_by_id.get(tid)
            feat = track.feature_in(img) if track else None
            if feat is None:
                continue
            cam = self.registered[img]
            proj, ok = project_many(
                self.scene_points[tid].position[None, :], cam.pose, cam.intrinsics
            )
            if ok[0] and np.linalg.norm(proj[0] - self._positions[img][feat]) <= (
                self.config.inlier_frac * cam.intrinsics.width
            ):
                self._banned_obs.discard((tid, img))

    def _filter_observations(self, observations, obs_keys) -> int:
        """Ban post-BA outlier observations; prune points left under-observed."""
        banned = 0
        support: dict[int, int] = {}
        for ob, (tid, img) in zip(observations, obs_keys):
            cam = self.registered[img]
            pt = self.scene_points[tid]
            proj, ok = project_many(pt.position[None, :], cam.pose, cam.intrinsics)
            err = np.linalg.norm(proj[0] - ob.pixel) if ok[0] else np.inf
            if err > self.config.inlier_frac * cam.intrinsics.width:
                self._banned_obs.add((tid, img))
                banned += 1
            else:
                support[tid] = support.get(tid, 0) + 1
        tracks_by_id = {t.track_id: t for t in self._track_graph.tracks}
        for tid in list(self.scene_points):
            if support.get(tid, 0) < 2:
                del self.scene_points[tid]
                self._untriangulable[tid] = sum(
                    1 for img, _ in tracks_by_id[tid].observations if img in self.registered
                )
        return banned

    # --- the full loop -----------------------------------------------------------

    def run(self, assist_answers: dict[str, list[Correspondence2D3D]] | None = None):
        """Drive registration until every image is registered or every
        remaining image has an unanswered assist request. Returns self.

        ``assist_answers`` maps image ids to pick lists consumed when the
        pipeline would otherwise suspend on that image.
        """
        if not self.anchors:
            raise ValidationError("register an anchor before running the pipeline")
        answers = dict(assist_answers or {})
        self.ensure_features()
        self._failed_this_round = set()
        while True:
            # standing assists with supplied answers resolve first (resume)
            for image_id in sorted(set(self.pending_assists) & set(answers)):
                self.register_anchor(image_id, answers.pop(image_id))
            self.propagate_by_homography()
            self.bundle_adjust()
            remaining = self.unregistered - set(self.pending_assists)
            if not remaining:
                break
            selection = self.select_next_image()
            if isinstance(selection, Automatic):
                u = selection.image_id
                try:
                    self.register_by_tracks(u)
                except SiteAlignError as exc:
                    if isinstance(exc, (NoConsensus, InsufficientCorrespondences, SolverDiverged)):
                        request = self._make_assist(u, "registration-failure", str(exc))
                        if u in answers:
                            self.register_anchor(u, answers.pop(u))
                        else:
                            continue  # standing assist; try other images
                    else:
                        raise
            else:
                u = selection.request.image_id
                if u in answers:
                    self.register_anchor(u, answers.pop(u))
                else:
                    continue  # suspended on this image; others may still proceed
            self.bundle_adjust()
        self._event(
            "run_finished",
            registered=len(self.registered),
            pending_assists=sorted(self.pending_assists),
        )
        return self

    def register_new_photo(
        self,
        image_id: str,
        image: np.ndarray,
        meta: ImageMeta,
        assist_answer: list[Correspondence2D3D] | None = None,
    ) -> "Camera | AssistRequest":
        """Register one photo added after a pipeline run, without touching
        existing cameras or points (no global refresh)."""
        if image_id in self.images:
            raise ValidationError(f"image id {image_id!r} already present")
        self.ensure_features()
        self.images[image_id] = image
        self.metadata[image_id] = meta
        self.unregistered.add(image_id)
        feats = matching.detect_features(
            image, max_features=self.config.max_features, threshold=self.config.fast_threshold
        )
        self._positions[image_id] = np.array([f.position for f in feats]).reshape(-1, 2)
        self._descriptors[image_id] = (
            np.stack([f.descriptor for f in feats]) if feats else np.zeros((0, 32), np.uint8)
        )
        self._event("features", image=image_id, count=len(feats))
        pair_list = []
        for other in sorted(self.images):
            if other == image_id or self._descriptors.get(other) is None:
                continue
            a, b = sorted([other, image_id])
            pm = self._match_and_prune(a, b)
            if pm is not None:
                pair_list.append(pm)
        self._track_graph = matching.build_tracks(list(self._matches.values()))
        self._event("tracks", count=len(self._track_graph.tracks))

        newly = self.propagate_by_homography()
        if any(c.image_id == image_id for c in newly):
            return self.registered[image_id]
        counts = self.candidate_counts()
        if counts.get(image_id, 0) >= self.config.track_threshold:
            try:
                return self.register_by_tracks(image_id)
            except SiteAlignError as exc:
                request = self._make_assist(image_id, "registration-failure", str(exc))
        else:
            request = self._make_assist(
                image_id,
                "disconnected-graph",
                f"{counts.get(image_id, 0)} matched track features",
            )
        if assist_answer is not None:
            return self.register_anchor(image_id, assist_answer)
        return request

    # --- introspection ------------------------------------------------------------

    def state_summary(self) -> dict:
        return {
            "registered": sorted(self.registered),
            "unregistered": sorted(self.unregistered),
            "anchors": sorted(self.anchors),
            "pending_assists": {k: v.to_dict() for k, v in sorted(self.pending_assists.items())},
            "scene_points": len(self.scene_points),
            "events": len(self.events),
        }


def _points_coplanar(points, tol: float = 1e-6) -> bool:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) <= 3:
        return True
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    return sv[2] <= tol * max(sv[0], 1e-12)
