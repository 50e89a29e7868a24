import math

import numpy as np
import pytest

from evpr.errors import DimensionMismatch, MissingDepth, MissingKeypoints
from evpr.features import DepthMap, KeypointSet
from evpr.rerank import (
    MatchSet,
    combine_scores,
    nnr_match,
    ransac_homography,
    rerank_depth,
    rerank_keypoints,
    resize_depth,
    ssim,
)
from evpr.retrieval import Shortlist


def keypoints(points, descriptors=None, rng=None, dim=16):
    points = np.asarray(points, dtype=np.float32)
    if descriptors is None:
        descriptors = rng.standard_normal((len(points), dim)).astype(np.float32)
    return KeypointSet(points=points, descriptors=np.asarray(descriptors, np.float32))


class TestNnrMatch:
    def test_exact_match_accepted(self):
        q = np.array([[1.0, 0.0]], dtype=np.float32)
        r = np.array([[1.0, 0.0], [0.0, 5.0]], dtype=np.float32)
        matches = nnr_match(q, r)
        assert len(matches) == 1
        assert tuple(matches.pairs[0]) == (0, 0)
        assert matches.distances[0] == 0.0

    def test_equidistant_pair_rejected(self):
        q = np.array([[0.0, 0.0]], dtype=np.float32)
        r = np.array([[1.0, 0.0], [-1.0, 0.0]], dtype=np.float32)
        assert len(nnr_match(q, r)) == 0

    def test_single_reference_accepted_unconditionally(self):
        q = np.array([[0.0, 0.0], [5.0, 5.0]], dtype=np.float32)
        r = np.array([[100.0, 100.0]], dtype=np.float32)
        matches = nnr_match(q, r)
        assert len(matches) == 2
        assert list(matches.pairs[:, 1]) == [0, 0]

    def test_empty_sides(self):
        empty = np.empty((0, 8), dtype=np.float32)
        some = np.ones((3, 8), dtype=np.float32)
        assert len(nnr_match(empty, some)) == 0
        assert len(nnr_match(some, empty)) == 0

    def test_matches_exhaustive_oracle(self, rng):
        q = rng.standard_normal((100, 16)).astype(np.float32)
        r = rng.standard_normal((200, 16)).astype(np.float32)
        matches = nnr_match(q, r, ratio=0.8)
        got = {(int(a), int(b)) for a, b in matches.pairs}

        expected = set()
        for i in range(100):
            dists = sorted((math.dist(q[i].astype(np.float64), r[j].astype(np.float64)), j)
                           for j in range(200))
            (d1, j1), (d2, _) = dists[0], dists[1]
            if d2 > 0 and d1 / d2 < 0.8:
                expected.add((i, j1))
        assert got == expected

    def test_each_query_appears_at_most_once(self, rng):
        q = rng.standard_normal((50, 8)).astype(np.float32)
        r = rng.standard_normal((60, 8)).astype(np.float32)
        matches = nnr_match(q, r)
        assert len(set(matches.pairs[:, 0])) == len(matches)


def planted_scene(rng, n_inliers=40, n_outliers=20, translation=(10.0, -5.0)):
    """Correspondences under a translation plus uniform-random outliers."""
    q_pts = rng.uniform(20, 300, size=(n_inliers + n_outliers, 2))
    r_pts = q_pts + np.asarray(translation)
    r_pts[n_inliers:] = rng.uniform(20, 300, size=(n_outliers, 2))
    pairs = np.stack([np.arange(len(q_pts))] * 2, axis=1).astype(np.int64)
    matches = MatchSet(pairs=pairs, distances=np.zeros(len(q_pts)))
    dim = 4
    query_kp = KeypointSet(points=q_pts.astype(np.float32),
                           descriptors=np.zeros((len(q_pts), dim), np.float32))
    ref_kp = KeypointSet(points=r_pts.astype(np.float32),
                         descriptors=np.zeros((len(r_pts), dim), np.float32))
    return matches, query_kp, ref_kp


class TestRansac:
    def test_identity_transform_recovered(self, rng):
        pts = rng.uniform(0, 300, size=(20, 2))
        pairs = np.stack([np.arange(20)] * 2, axis=1).astype(np.int64)
        matches = MatchSet(pairs=pairs, distances=np.zeros(20))
        kp = KeypointSet(points=pts.astype(np.float32),
                         descriptors=np.zeros((20, 4), np.float32))
        inliers = ransac_homography(matches, kp, kp, seed=0)
        assert inliers.count == 20
        assert np.linalg.norm(inliers.homography.matrix - np.eye(3)) < 1e-6

    def test_fewer_than_four_matches(self):
        pairs = np.stack([np.arange(3)] * 2, axis=1).astype(np.int64)
        matches = MatchSet(pairs=pairs, distances=np.zeros(3))
        kp = KeypointSet(points=np.random.rand(3, 2).astype(np.float32),
                         descriptors=np.zeros((3, 4), np.float32))
        inliers = ransac_homography(matches, kp, kp)
        assert inliers.count == 0
        assert np.array_equal(inliers.homography.matrix, np.eye(3))

    def test_planted_translation_recovered(self, rng):
        matches, query_kp, ref_kp = planted_scene(rng)
        inliers = ransac_homography(matches, query_kp, ref_kp,
                                    epsilon=5.0, iterations=1000, seed=42)
        found = set(map(tuple, inliers.pairs))
        planted = {(i, i) for i in range(40)}
        assert len(found & planted) >= 38
        assert len(found - planted) <= 2
        h = inliers.homography.matrix
        assert abs(h[0, 2] - 10.0) < 0.5
        assert abs(h[1, 2] + 5.0) < 0.5

    def test_deterministic_for_fixed_seed(self, rng):
        matches, query_kp, ref_kp = planted_scene(rng, n_inliers=25, n_outliers=25)
        a = ransac_homography(matches, query_kp, ref_kp, seed=7)
        b = ransac_homography(matches, query_kp, ref_kp, seed=7)
        assert np.array_equal(a.pairs, b.pairs)
        assert np.array_equal(a.homography.matrix, b.homography.matrix)

    def test_inlier_errors_below_epsilon(self, rng):
        matches, query_kp, ref_kp = planted_scene(rng)
        inliers = ransac_homography(matches, query_kp, ref_kp, epsilon=5.0, seed=3)
        h = inliers.homography.matrix
        for qi, ri in inliers.pairs:
            p = h @ np.array([*query_kp.points[qi], 1.0])
            err = np.hypot(p[0] / p[2] - ref_kp.points[ri][0],
                           p[1] / p[2] - ref_kp.points[ri][1])
            assert err < 5.0

    def test_degenerate_identical_points(self):
        pts = np.zeros((6, 2), dtype=np.float32)
        pairs = np.stack([np.arange(6)] * 2, axis=1).astype(np.int64)
        matches = MatchSet(pairs=pairs, distances=np.zeros(6))
        kp = KeypointSet(points=pts, descriptors=np.zeros((6, 4), np.float32))
        inliers = ransac_homography(matches, kp, kp)
        assert inliers.count == 0


class TestCombineScores:
    def test_zero_inliers(self):
        assert combine_scores(0.7, 0) == pytest.approx(0.7)

    def test_linear_form(self):
        assert combine_scores(0.7, 10, alpha=0.05) == pytest.approx(1.2)

    def test_negative_alpha_rejected(self):
        with pytest.raises(ValueError):
            combine_scores(0.5, 1, alpha=-0.1)


def store_with_translated_candidate(rng, n_candidates=5, winner=4, n_dots=45):
    """Keypoint store where only ``winner`` shares the query's texture."""
    q_pts = rng.uniform(10, 80, size=(n_dots, 2)).astype(np.float32)
    q_desc = rng.standard_normal((n_dots, 16)).astype(np.float32)
    q_desc /= np.linalg.norm(q_desc, axis=1, keepdims=True)
    query_kp = KeypointSet(points=q_pts, descriptors=q_desc)
    store = {}
    for cand in range(n_candidates):
        if cand == winner:
            store[cand] = KeypointSet(points=q_pts + np.array([3.0, 2.0], np.float32),
                                      descriptors=q_desc)
        else:
            desc = rng.standard_normal((n_dots, 16)).astype(np.float32)
            desc /= np.linalg.norm(desc, axis=1, keepdims=True)
            store[cand] = KeypointSet(
                points=rng.uniform(10, 80, size=(n_dots, 2)).astype(np.float32),
                descriptors=desc)
    return query_kp, store


class TestRerankKeypoints:
    def test_zero_inliers_keeps_cosine_order(self, rng):
        query_kp = KeypointSet.empty(16)
        store = {i: KeypointSet.empty(16) for i in range(4)}
        shortlist = Shortlist(0, [(2, 0.9), (0, 0.8), (3, 0.7), (1, 0.6)])
        result = rerank_keypoints(shortlist, query_kp, store)
        assert result.ids() == [2, 0, 3, 1]
        assert all(c.inliers == 0 for c in result.candidates)

    def test_inlier_rich_candidate_overtakes(self, rng):
        query_kp, store = store_with_translated_candidate(rng)
        # winner is ranked last by cosine with deficit 0.4 < alpha * expected inliers
        shortlist = Shortlist(0, [(0, 0.9), (1, 0.85), (2, 0.8), (3, 0.75), (4, 0.5)])
        result = rerank_keypoints(shortlist, query_kp, store, alpha=0.05, seed=1)
        assert result.ids()[0] == 4
        assert result.candidates[0].inliers >= 40
        assert set(result.ids()) == {0, 1, 2, 3, 4}

    def test_singleton_shortlist_unchanged(self, rng):
        query_kp, store = store_with_translated_candidate(rng, n_candidates=1, winner=0)
        shortlist = Shortlist(3, [(0, 0.4)])
        result = rerank_keypoints(shortlist, query_kp, store)
        assert result.ids() == [0]
        assert result.query_id == 3

    def test_missing_keypoints_raises(self, rng):
        query_kp = KeypointSet.empty(16)
        shortlist = Shortlist(0, [(0, 0.5), (9, 0.4)])
        with pytest.raises(MissingKeypoints) as err:
            rerank_keypoints(shortlist, query_kp, {0: KeypointSet.empty(16)})
        assert err.value.ref_id == 9

    def test_alpha_zero_preserves_cosine_order(self, rng):
        query_kp, store = store_with_translated_candidate(rng)
        shortlist = Shortlist(0, [(0, 0.9), (1, 0.85), (2, 0.8), (3, 0.75), (4, 0.5)])
        result = rerank_keypoints(shortlist, query_kp, store, alpha=0.0, seed=1)
        assert result.ids() == [0, 1, 2, 3, 4]

    def test_equal_cosine_more_inliers_never_ranks_lower(self, rng):
        query_kp, store = store_with_translated_candidate(rng, n_candidates=3, winner=1)
        shortlist = Shortlist(0, [(0, 0.5), (1, 0.5), (2, 0.5)])
        result = rerank_keypoints(shortlist, query_kp, store, seed=2)
        assert result.ids()[0] == 1


class TestResizeDepth:
    def test_constant_stays_constant(self):
        out = resize_depth(DepthMap(np.full((13, 9), 3.5, dtype=np.float32)))
        assert out.data.shape == (28, 28)
        assert np.all(out.data == np.float32(3.5))

    def test_identity_resize_bit_identical(self, rng):
        src = rng.uniform(0, 4, size=(28, 28)).astype(np.float32)
        out = resize_depth(DepthMap(src))
        assert out.data.tobytes() == src.tobytes()

    def test_planar_ramp_preserved(self):
        rows, cols = np.mgrid[0:56, 0:56].astype(np.float64)
        src = 0.5 * rows + 0.25 * cols + 1.0
        out = resize_depth(DepthMap(src.astype(np.float32))).data.astype(np.float64)
        # corner-aligned bilinear reproduces an affine ramp exactly
        expected_00 = src[0, 0]
        expected_end = src[55, 55]
        assert abs(out[0, 0] - expected_00) < 1e-4
        assert abs(out[27, 27] - expected_end) < 1e-4
        col_gradient = np.diff(out, axis=1)
        assert np.allclose(col_gradient, col_gradient[0, 0], atol=1e-4)


def naive_ssim(a, b, window=7, sigma=1.5):
    """Scalar sliding-window SSIM, independent of the vectorized path."""
    h, w = a.shape
    span = max(a.max(), b.max()) - min(a.min(), b.min())
    if span == 0:
        span = 1.0
    c1 = (0.01 * span) ** 2
    c2 = (0.03 * span) ** 2
    kern = [[math.exp(-((i - 3) ** 2 + (j - 3) ** 2) / (2 * sigma * sigma))
             for j in range(window)] for i in range(window)]
    total = sum(sum(row) for row in kern)
    kern = [[v / total for v in row] for row in kern]
    values = []
    for top in range(h - window + 1):
        for left in range(w - window + 1):
            mx = my = mxx = myy = mxy = 0.0
            for i in range(window):
                for j in range(window):
                    va = float(a[top + i, left + j])
                    vb = float(b[top + i, left + j])
                    k = kern[i][j]
                    mx += k * va
                    my += k * vb
                    mxx += k * va * va
                    myy += k * vb * vb
                    mxy += k * va * vb
            vx = mxx - mx * mx
            vy = myy - my * my
            cov = mxy - mx * my
            values.append(((2 * mx * my + c1) * (2 * cov + c2))
                          / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(values) / len(values)


class TestSsim:
    def test_self_similarity_is_one(self, rng):
        a = rng.uniform(0, 3, size=(28, 28))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)

    def test_symmetry(self, rng):
        a = rng.uniform(0, 3, size=(28, 28))
        b = rng.uniform(0, 3, size=(28, 28))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12

    def test_matches_naive_windowed_oracle(self, rng):
        for _ in range(5):
            a = rng.uniform(0, 2, size=(28, 28))
            b = rng.uniform(0, 2, size=(28, 28))
            assert ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-9)

    def test_constant_equal_maps(self):
        a = np.full((28, 28), 2.0)
        assert ssim(a, a.copy()) == pytest.approx(1.0, abs=1e-12)

    def test_score_in_range(self, rng):
        for _ in range(20):
            a = rng.uniform(0, 5, size=(28, 28))
            b = rng.uniform(0, 5, size=(28, 28))
            assert -1.0 - 1e-9 <= ssim(a, b) <= 1.0 + 1e-9

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionMismatch):
            ssim(np.zeros((28, 28)), np.zeros((28, 27)))


class TestRerankDepth:
    def reranked(self, ids_scores):
        from evpr.rerank import RerankCandidate, RerankedShortlist
        candidates = [RerankCandidate(ref_id=i, cosine=c, s_prime=c, inliers=0)
                      for i, c in ids_scores]
        return RerankedShortlist(query_id=0, candidates=candidates, stage="keypoint")

    def test_identical_depth_ranks_first(self, rng):
        query_depth = DepthMap(rng.uniform(0, 2, size=(20, 20)).astype(np.float32))
        store = {i: DepthMap(rng.uniform(0, 2, size=(20, 20)).astype(np.float32))
                 for i in range(4)}
        store[2] = DepthMap(query_depth.data.copy())
        result = rerank_depth(self.reranked([(0, 0.9), (1, 0.8), (2, 0.7), (3, 0.6)]),
                              query_depth, store)
        assert result.ids()[0] == 2
        assert result.candidates[0].ssim == pytest.approx(1.0, abs=1e-9)
        assert result.stage == "depth"

    def test_all_identical_depth_keeps_keypoint_order(self, rng):
        shared = DepthMap(rng.uniform(0, 2, size=(20, 20)).astype(np.float32))
        store = {i: shared for i in range(4)}
        result = rerank_depth(self.reranked([(3, 0.9), (1, 0.8), (0, 0.7), (2, 0.6)]),
                              shared, store)
        assert result.ids() == [3, 1, 0, 2]

    def test_order_matches_oracle_sort(self, rng):
        query_depth = DepthMap(rng.uniform(0, 2, size=(24, 24)).astype(np.float32))
        store = {i: DepthMap(rng.uniform(0, 2, size=(24, 24)).astype(np.float32))
                 for i in range(5)}
        reranked = self.reranked([(i, 0.9 - 0.1 * i) for i in range(5)])
        result = rerank_depth(reranked, query_depth, store)
        from evpr.rerank import resize_depth as rd
        oracle_scores = {i: naive_ssim(rd(query_depth).data.astype(np.float64),
                                       rd(store[i]).data.astype(np.float64))
                         for i in range(5)}
        oracle_order = sorted(range(5), key=lambda i: (-oracle_scores[i], i))
        assert result.ids() == oracle_order
        for cand in result.candidates:
            assert cand.ssim == pytest.approx(oracle_scores[cand.ref_id], abs=1e-9)

    def test_candidate_set_preserved(self, rng):
        query_depth = DepthMap(rng.uniform(0, 2, size=(16, 16)).astype(np.float32))
        store = {i: DepthMap(rng.uniform(0, 2, size=(16, 16)).astype(np.float32))
                 for i in range(6)}
        reranked = self.reranked([(i, 0.5) for i in range(6)])
        result = rerank_depth(reranked, query_depth, store, k_depth=3)
        assert set(result.ids()) == set(range(6))
        assert [c.ref_id for c in result.candidates[3:]] == [3, 4, 5]  # tail untouched
        assert all(c.ssim is None for c in result.candidates[3:])

    def test_missing_depth_raises(self, rng):
        query_depth = DepthMap(rng.uniform(0, 2, size=(16, 16)).astype(np.float32))
        with pytest.raises(MissingDepth):
            rerank_depth(self.reranked([(0, 0.5)]), query_depth, {})

    def test_requires_keypoint_stage(self, rng):
        query_depth = DepthMap(rng.uniform(0, 2, size=(16, 16)).astype(np.float32))
        result = rerank_depth(self.reranked([(0, 0.5)]), query_depth,
                              {0: query_depth})
        with pytest.raises(ValueError):
            rerank_depth(result, query_depth, {0: query_depth})
