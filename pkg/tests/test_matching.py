"""Detector, matcher, two-view geometry, and track tests."""

import numpy as np
import pytest

from sitealign.errors import (
    DegenerateConfiguration,
    ImageTooSmall,
    InsufficientMatches,
    ValidationError,
)
from sitealign.geometry import Intrinsics, Pose, project_many
from sitealign.matching import (
    Feature,
    Homography,
    PairMatches,
    build_tracks,
    detect_features,
    estimate_fundamental,
    estimate_homography,
    hamming_distances,
    load_match_file,
    match_pair,
    passes_homography_gate,
    sampson_distance,
)
from sitealign.registration import Camera
from sitealign.synthetic import render_view

INTR = Intrinsics.from_fov(50.0, 640, 480)


class TestDetect:
    def test_uniform_image_empty(self):
        assert detect_features(np.full((64, 64), 0.5)) == []

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            detect_features(np.zeros((16, 64)))

    def test_square_corners_found(self):
        img = np.zeros((96, 96))
        img[30:60, 30:60] = 1.0
        feats = detect_features(img, threshold=0.1)
        found = np.array([f.position for f in feats])
        for corner in [(30, 30), (59, 30), (30, 59), (59, 59)]:
            d = np.linalg.norm(found - np.array(corner), axis=1).min()
            assert d <= 2.0, f"corner {corner} missed (nearest {d:.1f} px)"

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(80, 100))
        a = detect_features(img)
        b = detect_features(img)
        assert len(a) == len(b) > 0
        for f, g in zip(a, b):
            assert (f.position == g.position).all()
            assert (f.descriptor == g.descriptor).all()
            assert f.response == g.response


def _grid_features(rng, n=40):
    """Distinct synthetic features with well-separated descriptors."""
    feats = []
    for i in range(n):
        desc = rng.integers(0, 256, size=32, dtype=np.uint8)
        feats.append(Feature(position=(10.0 * i % 300, 10.0 * (i // 30)), descriptor=desc,
                             response=float(n - i)))
    return feats


class TestMatchPair:
    def test_self_match(self):
        rng = np.random.default_rng(1)
        feats = _grid_features(rng)
        pm = match_pair(feats, feats)
        assert len(pm.pairs) == len(feats)
        assert (pm.pairs[:, 0] == pm.pairs[:, 1]).all()

    def test_heavy_bit_flips_kill_matches(self):
        rng = np.random.default_rng(2)
        feats = _grid_features(rng, n=60)
        flipped = []
        for f in feats:
            bits = np.unpackbits(f.descriptor)
            idx = rng.choice(256, size=102, replace=False)  # 40% flipped
            bits[idx] ^= 1
            flipped.append(Feature(f.position, np.packbits(bits), f.response))
        pm = match_pair(feats, flipped)
        # a 40% flip is close to the random-descriptor distance: almost
        # nothing should survive the ratio test
        assert len(pm.pairs) < 0.1 * len(feats)

    def test_disjoint_random_descriptors(self):
        rng = np.random.default_rng(3)
        a = _grid_features(rng, n=80)
        b = _grid_features(rng, n=80)
        pm = match_pair(a, b)
        assert len(pm.pairs) < 0.05 * 80

    def test_empty_raises(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValidationError):
            match_pair([], _grid_features(rng))

    def test_hamming_exact(self):
        rng = np.random.default_rng(5)
        a = rng.integers(0, 256, size=(30, 32), dtype=np.uint8)
        b = rng.integers(0, 256, size=(25, 32), dtype=np.uint8)
        fast = hamming_distances(a, b)
        slow = np.array(
            [[np.unpackbits(x ^ y).sum() for y in b] for x in a], dtype=float
        )
        assert (fast == slow).all()


def synthetic_two_view(rng, n=60, pose_b=None):
    pose_a = Pose.look_at([6, 0, 1.5], [0, 0, 0.5])
    pose_b = pose_b or Pose.look_at([4.5, 3.5, 1.0], [0, 0, 0.5])
    pts = rng.uniform(-1.8, 1.8, size=(n, 3))
    pa, ok_a = project_many(pts, pose_a, INTR)
    pb, ok_b = project_many(pts, pose_b, INTR)
    keep = ok_a & ok_b
    return pa[keep], pb[keep]


class TestFundamental:
    def test_noiseless_all_inliers(self):
        rng = np.random.default_rng(6)
        pa, pb = synthetic_two_view(rng)
        F, mask = estimate_fundamental(pa, pb, INTR.width, seed=0)
        assert mask.all()
        assert sampson_distance(F, pa, pb).max() < 1e-6

    def test_pure_translation_epipole_at_infinity(self):
        rng = np.random.default_rng(7)
        pts = rng.uniform(-2, 2, size=(50, 3)) + np.array([0, 0, 8.0])
        pa, _ = project_many(pts, Pose.identity(), INTR)
        pb, _ = project_many(pts, Pose(np.zeros(3), np.array([-0.8, 0.0, 0.0])), INTR)
        F, _ = estimate_fundamental(pa, pb, INTR.width, seed=0)
        _, _, Vt = np.linalg.svd(F)
        e = Vt[-1]
        e = e / np.abs(e).max()
        assert abs(e[2]) < 1e-9  # at infinity
        assert abs(e[1]) < 1e-6  # along the x translation

    def test_seven_matches_insufficient(self):
        rng = np.random.default_rng(8)
        pa, pb = synthetic_two_view(rng, n=7)
        with pytest.raises(InsufficientMatches):
            estimate_fundamental(pa[:7], pb[:7], INTR.width)

    def test_degenerate_configuration(self):
        # all correspondences on one epipolar plane: identical points along
        # a line in both images
        t = np.linspace(0, 1, 20)
        pa = np.stack([100 + 300 * t, 200 + 100 * t], axis=1)
        pb = np.stack([120 + 280 * t, 190 + 110 * t], axis=1)
        with pytest.raises(DegenerateConfiguration):
            estimate_fundamental(pa, pb, INTR.width, seed=0)

    def test_inliers_within_threshold_despite_outliers(self):
        rng = np.random.default_rng(9)
        pa, pb = synthetic_two_view(rng, n=80)
        n_out = 25
        pb_noisy = pb.copy()
        idx = rng.choice(len(pb), size=n_out, replace=False)
        pb_noisy[idx] += rng.uniform(30, 120, size=(n_out, 2))
        F, mask = estimate_fundamental(pa, pb_noisy, INTR.width, seed=0)
        assert sampson_distance(F, pa[mask], pb_noisy[mask]).max() <= 0.01 * INTR.width
        good = np.setdiff1d(np.arange(len(pa)), idx)
        assert mask[good].mean() > 0.95

    def test_rank_two_enforced(self):
        rng = np.random.default_rng(10)
        pa, pb = synthetic_two_view(rng)
        F, _ = estimate_fundamental(pa, pb, INTR.width, seed=0)
        assert np.linalg.svd(F, compute_uv=False)[2] < 1e-12

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(11)
        pa, pb = synthetic_two_view(rng)
        F1, m1 = estimate_fundamental(pa, pb, INTR.width, seed=5)
        F2, m2 = estimate_fundamental(pa, pb, INTR.width, seed=5)
        assert (F1 == F2).all() and (m1 == m2).all()


class TestHomographyEstimation:
    def test_identity_matches(self):
        rng = np.random.default_rng(12)
        pts = rng.uniform([0, 0], [640, 480], size=(40, 2))
        H = estimate_homography(pts, pts, INTR.width, seed=0)
        assert H.inlier_ratio == 1.0
        assert np.allclose(H.matrix, np.eye(3), atol=1e-9)

    def test_gate_predicate_table(self):
        assert not passes_homography_gate(0.79)
        assert passes_homography_gate(0.80)
        assert passes_homography_gate(0.81)

    def test_pure_rotation_renders_pass_gate(self, demo_site):
        """Two renders from the same center, ~10 degrees apart, must be
        homography-consistent at ratio > 0.95."""
        cam = demo_site.camera(demo_site.anchor_id)
        center = cam.pose.center
        look1 = np.array([0.0, -2.5, 2.4])
        look2 = look1 + np.array([2.2, 0, 0.6])  # ~10 deg away
        a = Camera("a", cam.intrinsics, Pose.look_at(center, look1))
        b = Camera("b", cam.intrinsics, Pose.look_at(center, look2))
        img_a = render_view(demo_site.render_model, a, demo_site.view_date, supersample=2)
        img_b = render_view(demo_site.render_model, b, demo_site.view_date, supersample=2)
        fa = detect_features(img_a, max_features=2000, threshold=0.025)
        fb = detect_features(img_b, max_features=2000, threshold=0.025)
        pm = match_pair(fa, fb)
        pa = np.array([fa[i].position for i in pm.pairs[:, 0]])
        pb = np.array([fb[j].position for j in pm.pairs[:, 1]])
        H = estimate_homography(pa, pb, cam.intrinsics.width, seed=0)
        assert H.inlier_ratio > 0.95

    def test_wide_baseline_fails_gate(self, demo_site, demo_renders):
        """Non-planar scene with a baseline ~20% of scene depth must fall
        under the 0.80 gate."""
        ids = sorted(demo_renders)
        a, b = ids[3], ids[6]  # arc views far apart
        fa = detect_features(demo_renders[a], max_features=2000, threshold=0.025)
        fb = detect_features(demo_renders[b], max_features=2000, threshold=0.025)
        pm = match_pair(fa, fb)
        pa = np.array([fa[i].position for i in pm.pairs[:, 0]])
        pb = np.array([fb[j].position for j in pm.pairs[:, 1]])
        H = estimate_homography(pa, pb, 512, seed=0)
        assert H.inlier_ratio < 0.80

    def test_three_matches_insufficient(self):
        with pytest.raises(InsufficientMatches):
            estimate_homography(np.zeros((3, 2)), np.zeros((3, 2)), 640)

    def test_singular_matrix_rejected(self):
        with pytest.raises(DegenerateConfiguration):
            Homography(np.zeros((3, 3)), 1.0)


class TestTracks:
    def _pm(self, a, b, pairs):
        arr = np.array(pairs, dtype=int).reshape(-1, 2)
        return PairMatches(a, b, arr, np.ones(len(arr), dtype=bool))

    def test_chain_merges(self):
        tg = build_tracks([self._pm("a", "b", [(0, 1)]), self._pm("b", "c", [(1, 4)])])
        assert len(tg.tracks) == 1
        assert tg.tracks[0].observations == (("a", 0), ("b", 1), ("c", 4))

    def test_conflicting_track_dropped(self):
        # a:0 and a:1 both chain into the same track -> inconsistent
        tg = build_tracks(
            [
                self._pm("a", "b", [(0, 0)]),
                self._pm("b", "c", [(0, 0)]),
                self._pm("a", "c", [(1, 0)]),  # merges a:1 into the same chain
            ]
        )
        images = [t.images() for t in tg.tracks]
        assert all(len(set(imgs)) == len(imgs) for imgs in images)
        assert len(tg.tracks) == 0

    def test_partition_property(self):
        rng = np.random.default_rng(13)
        pms = []
        for a, b in [("a", "b"), ("b", "c"), ("a", "c"), ("c", "d")]:
            perm = rng.permutation(30)
            pairs = [(i, int(perm[i])) for i in range(20)]
            pms.append(self._pm(a, b, pairs))
        tg = build_tracks(pms)
        seen = set()
        for t in tg.tracks:
            for node in t.observations:
                assert node not in seen
                seen.add(node)

    def test_track_count_bounded_by_corners(self, demo_site, demo_renders):
        ids = sorted(demo_renders)[:3]
        feats = {
            i: detect_features(demo_renders[i], max_features=800, threshold=0.03) for i in ids
        }
        pms = []
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                pms.append(match_pair(feats[ids[i]], feats[ids[j]], ids[i], ids[j]))
        tg = build_tracks(pms)
        assert len(tg.tracks) <= min(len(feats[i]) for i in ids) * 3


class TestMatchFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "matches.txt"
        path.write_text(
            "imgA imgB 10.0 20.0 30.0 40.0\n"
            "imgA imgB 11.0 21.0 31.0 41.0\n"
            "imgB imgC 30.0 40.0 50.0 60.0\n"
        )
        sizes = {"imgA": (640, 480), "imgB": (640, 480), "imgC": (640, 480)}
        pms, positions = load_match_file(path, sizes)
        assert {(p.image_a, p.image_b) for p in pms} == {("imgA", "imgB"), ("imgB", "imgC")}
        # (30, 40) in imgB is the same feature in both pair sets
        tg = build_tracks(pms)
        spans = sorted(len(t.observations) for t in tg.tracks)
        assert spans == [2, 3]

    def test_bounds_validated(self, tmp_path):
        path = tmp_path / "matches.txt"
        path.write_text("imgA imgB 10000.0 20.0 30.0 40.0\n")
        with pytest.raises(ValidationError):
            load_match_file(path, {"imgA": (640, 480), "imgB": (640, 480)})

    def test_unknown_image(self, tmp_path):
        path = tmp_path / "matches.txt"
        path.write_text("imgX imgB 10.0 20.0 30.0 40.0\n")
        with pytest.raises(ValidationError):
            load_match_file(path, {"imgB": (640, 480)})
