"""Shortlist refinement: keypoint geometry and depth similarity.

Stage 2 matches local descriptors with a nearest-neighbour ratio test,
verifies them with a RANSAC homography (normalized DLT on 4-point
samples, reprojection threshold in pixels), and re-scores candidates as
cosine + alpha * inlier_count. Stage 3 compares depth maps resized to
28x28 with SSIM and sorts by it. Both stages permute the candidate set,
never substitute it, and are deterministic for a fixed seed: the RANSAC
RNG is derived from (seed, query_id, ref_id) so scheduling cannot change
results.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from math import comb

import numpy as np

from .errors import DimensionMismatch, MissingDepth, MissingKeypoints
from .features import DepthMap, KeypointSet

DEFAULT_NNR_RATIO = 0.8
DEFAULT_RANSAC_EPSILON = 5.0
DEFAULT_RANSAC_ITERATIONS = 1000
DEFAULT_ALPHA = 0.05
DEFAULT_EARLY_EXIT_RATIO = 0.9
DEPTH_RESIZE = (28, 28)
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5

STAGE_KEYPOINT = "keypoint"
STAGE_DEPTH = "depth"


@dataclass(frozen=True)
class MatchSet:
    """Tentative correspondences: pairs[i] = (query_idx, ref_idx), plus the
    accepted descriptor distance per pair. Each query index appears once."""

    pairs: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return len(self.pairs)

    @classmethod
    def empty(cls) -> "MatchSet":
        return cls(pairs=np.empty((0, 2), dtype=np.int64),
                   distances=np.empty(0, dtype=np.float64))


@dataclass(frozen=True)
class Homography:
    """3x3 projective transform, scaled so H[2,2] = 1 when nonzero."""

    matrix: np.ndarray

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))


@dataclass(frozen=True)
class InlierSet:
    """Geometrically verified subset of a MatchSet under ``homography``."""

    pairs: np.ndarray
    homography: Homography

    @property
    def count(self) -> int:
        return len(self.pairs)

    @classmethod
    def empty(cls) -> "InlierSet":
        return cls(pairs=np.empty((0, 2), dtype=np.int64),
                   homography=Homography.identity())


@dataclass(frozen=True)
class RerankCandidate:
    ref_id: int
    cosine: float
    s_prime: float
    inliers: int
    ssim: float | None = None


@dataclass(frozen=True)
class RerankedShortlist:
    query_id: int
    candidates: list[RerankCandidate]
    stage: str

    def ids(self) -> list[int]:
        return [c.ref_id for c in self.candidates]


def nnr_match(query_desc: np.ndarray, ref_desc: np.ndarray,
              ratio: float = DEFAULT_NNR_RATIO) -> MatchSet:
    """Nearest-neighbour ratio matching of descriptor rows.

    A query descriptor matches its nearest reference when the distance
    ratio to the second-nearest is strictly below ``ratio``; with exactly
    one reference descriptor every query is accepted unconditionally.
    """
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    q = np.asarray(query_desc, dtype=np.float64)
    r = np.asarray(ref_desc, dtype=np.float64)
    if len(q) == 0 or len(r) == 0:
        return MatchSet.empty()
    if q.shape[1] != r.shape[1]:
        raise DimensionMismatch(
            f"descriptor dims differ: {q.shape[1]} vs {r.shape[1]}")

    d2 = np.maximum(
        (q * q).sum(1)[:, None] + (r * r).sum(1)[None, :] - 2.0 * (q @ r.T), 0.0)
    rows = np.arange(len(q))
    if len(r) == 1:
        best = np.zeros(len(q), dtype=np.int64)
        accept = np.ones(len(q), dtype=bool)
        d_best = d2[:, 0]
    else:
        two = np.argpartition(d2, 1, axis=1)[:, :2]
        da, db = d2[rows, two[:, 0]], d2[rows, two[:, 1]]
        swap = da > db
        best = np.where(swap, two[:, 1], two[:, 0])
        d_best = np.where(swap, db, da)
        d_second = np.where(swap, da, db)
        # squared form of d1/d2 < ratio; a tie (d1 == d2) is rejected
        accept = d_best < (ratio * ratio) * d_second
    pairs = np.stack([rows[accept], best[accept]], axis=1).astype(np.int64)
    return MatchSet(pairs=pairs, distances=np.sqrt(d_best[accept]))


def _hartley(pts: np.ndarray):
    """Similarity transform taking points to zero centroid, mean norm sqrt(2)."""
    centroid = pts.mean(axis=0)
    spread = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if spread < 1e-12:
        return None, None
    s = np.sqrt(2.0) / spread
    T = np.array([[s, 0.0, -s * centroid[0]],
                  [0.0, s, -s * centroid[1]],
                  [0.0, 0.0, 1.0]])
    return (pts - centroid) * s, T


def _dlt(qp: np.ndarray, rp: np.ndarray) -> np.ndarray | None:
    """Normalized DLT homography from >= 4 correspondences, or None."""
    qn, tq = _hartley(qp)
    rn, tr = _hartley(rp)
    if qn is None or rn is None:
        return None
    n = len(qn)
    a = np.zeros((2 * n, 9))
    x, y = qn[:, 0], qn[:, 1]
    u, v = rn[:, 0], rn[:, 1]
    a[0::2, 0] = -x
    a[0::2, 1] = -y
    a[0::2, 2] = -1.0
    a[0::2, 6] = u * x
    a[0::2, 7] = u * y
    a[0::2, 8] = u
    a[1::2, 3] = -x
    a[1::2, 4] = -y
    a[1::2, 5] = -1.0
    a[1::2, 6] = v * x
    a[1::2, 7] = v * y
    a[1::2, 8] = v
    try:
        _, _, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError:
        return None
    h = vt[-1].reshape(3, 3)
    matrix = np.linalg.inv(tr) @ h @ tq
    if abs(matrix[2, 2]) < 1e-12:
        return None
    matrix = matrix / matrix[2, 2]
    if abs(np.linalg.det(matrix)) < 1e-12:
        return None
    return matrix


@lru_cache(maxsize=64)
def _all_quads(m: int) -> np.ndarray:
    """All 4-subsets of range(m), cached; used when enumeration is cheaper
    than random sampling."""
    quads = np.array(list(combinations(range(m), 4)), dtype=np.int64)
    quads.setflags(write=False)
    return quads


def _distinct_samples(rng: np.random.Generator, m: int, n: int) -> np.ndarray:
    """n rows of 4 distinct indices in [0, m); redraws duplicate rows."""
    idx = rng.integers(0, m, size=(n, 4))
    for _ in range(128):
        bad = np.zeros(len(idx), dtype=bool)
        for i, j in combinations(range(4), 2):
            bad |= idx[:, i] == idx[:, j]
        if not bad.any():
            break
        idx[bad] = rng.integers(0, m, size=(int(bad.sum()), 4))
    return idx


def _solve_h4(q4: np.ndarray, r4: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched minimal homography through 4 point pairs.

    q4, r4: (n, 4, 2) sample coordinates. Uses the projective-basis
    construction: each quad defines the homography B taking the canonical
    basis to it ([p1 p2 p3] (a,b,c)^T = p4 by Cramer's rule, B the scaled
    columns), and the model is B_ref @ adj(B_query). Closed form via
    cross/triple products, no per-matrix linear algebra dispatch; equals
    the minimal DLT solution up to scale. Returns (n, 3, 3) models plus a
    validity mask; degenerate samples (any three points collinear) are
    marked invalid.
    """
    n = len(q4)
    pts = np.concatenate([q4, r4], axis=0)
    h = np.concatenate([pts, np.ones((2 * n, 4, 1), dtype=pts.dtype)], axis=2)
    p1, p2, p3, p4 = h[:, 0], h[:, 1], h[:, 2], h[:, 3]
    c23 = np.cross(p2, p3)
    c43 = np.cross(p4, p3)
    c12 = np.cross(p1, p2)
    d = np.einsum("ij,ij->i", p1, c23)
    a = np.einsum("ij,ij->i", p4, c23)
    b = np.einsum("ij,ij->i", p1, c43)
    c = np.einsum("ij,ij->i", p4, c12)
    scale = np.abs(d)
    valid = ((scale > 1e-12) & (np.abs(a) > 1e-12 * scale)
             & (np.abs(b) > 1e-12 * scale) & (np.abs(c) > 1e-12 * scale))
    ok = valid[:n] & valid[n:]

    basis_r = np.empty((n, 3, 3), dtype=h.dtype)
    basis_r[:, :, 0] = a[n:, None] * p1[n:]
    basis_r[:, :, 1] = b[n:, None] * p2[n:]
    basis_r[:, :, 2] = c[n:, None] * p3[n:]
    # adjugate of the query basis: rows are scaled column cross products
    c31q = np.cross(p3[:n], p1[:n])
    adj_q = np.empty((n, 3, 3), dtype=h.dtype)
    adj_q[:, 0, :] = (b[:n] * c[:n])[:, None] * c23[:n]
    adj_q[:, 1, :] = (c[:n] * a[:n])[:, None] * c31q
    adj_q[:, 2, :] = (a[:n] * b[:n])[:, None] * c12[:n]
    return basis_r @ adj_q, ok


def ransac_homography(matches: MatchSet, query_kp: KeypointSet, ref_kp: KeypointSet,
                      epsilon: float = DEFAULT_RANSAC_EPSILON,
                      iterations: int = DEFAULT_RANSAC_ITERATIONS,
                      seed=0,
                      early_exit_ratio: float = DEFAULT_EARLY_EXIT_RATIO) -> InlierSet:
    """RANSAC homography fit over tentative matches.

    Samples 4 matches per iteration (all distinct 4-subsets are enumerated
    instead when there are at most ``iterations`` of them), solves a
    minimal DLT, and counts pairs whose reprojection error is below
    ``epsilon`` pixels. Iterations run in vectorized chunks; the search
    stops early once the best inlier ratio exceeds ``early_exit_ratio``.
    The best model is refit by least squares on its inliers, keeping the
    refit only when it does not lose inliers. Fewer than 4 matches yield
    an empty inlier set with the identity homography.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    m = len(matches)
    if m < 4:
        return InlierSet.empty()
    qp = query_kp.points[matches.pairs[:, 0]].astype(np.float64)
    rp = ref_kp.points[matches.pairs[:, 1]].astype(np.float64)

    exhaustive = comb(m, 4) <= iterations
    if exhaustive:
        samples = _all_quads(m)
    else:
        rng = np.random.default_rng(seed)
        samples = _distinct_samples(rng, m, iterations)

    # minimal models are solved in pixel space (the closed form needs no
    # conditioning in float64); the final refit uses a normalized DLT
    qh = np.concatenate([qp, np.ones((m, 1))], axis=1).T
    rx, ry = rp[:, 0], rp[:, 1]
    eps2 = float(epsilon) ** 2
    best_count = 0
    best_mask: np.ndarray | None = None
    best_model: np.ndarray | None = None
    # random search checks early exit after a small first chunk, then
    # finishes in one batch; exhaustive enumeration runs in one batch
    edges = [0, len(samples)] if exhaustive else [0, min(128, len(samples)), len(samples)]
    for start, stop in zip(edges[:-1], edges[1:]):
        if start == stop:
            continue
        sel = samples[start:stop]
        models, ok = _solve_h4(qp[sel], rp[sel])
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            proj = models @ qh
            w = proj[:, 2, :]
            ex = proj[:, 0, :] / w - rx
            ey = proj[:, 1, :] / w - ry
            err2 = ex * ex + ey * ey
            masks = err2 < eps2
        masks &= np.isfinite(err2)
        counts = np.where(ok, masks.sum(axis=1), 0)
        top = int(np.argmax(counts))
        if counts[top] > best_count:
            best_count = int(counts[top])
            best_mask = masks[top].copy()
            best_model = models[top].copy()
        if best_count > early_exit_ratio * m:
            break

    if best_mask is None or best_count < 4:
        return InlierSet.empty()

    homography, mask = best_model, best_mask
    qh = np.concatenate([qp, np.ones((m, 1))], axis=1)
    refit = _dlt(qp[best_mask], rp[best_mask])
    if refit is not None:
        proj = qh @ refit.T
        with np.errstate(invalid="ignore", divide="ignore"):
            ex = proj[:, 0] / proj[:, 2] - rp[:, 0]
            ey = proj[:, 1] / proj[:, 2] - rp[:, 1]
        err2 = ex * ex + ey * ey
        refit_mask = (err2 < float(epsilon) ** 2) & np.isfinite(err2)
        if int(refit_mask.sum()) >= best_count:
            homography, mask = refit, refit_mask
    if abs(homography[2, 2]) > 1e-12:
        homography = homography / homography[2, 2]
    if abs(np.linalg.det(homography)) < 1e-12:
        return InlierSet.empty()
    return InlierSet(pairs=matches.pairs[mask].copy(),
                     homography=Homography(homography))


def combine_scores(cosine: float, inlier_count: int, alpha: float = DEFAULT_ALPHA) -> float:
    """Fused retrieval score: cosine similarity plus alpha per inlier."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return float(cosine) + alpha * int(inlier_count)


def derive_candidate_seed(seed: int, query_id: int, ref_id: int) -> np.random.SeedSequence:
    """Stable per-(query, reference) RNG seed; immune to scheduling order."""
    return np.random.SeedSequence([int(seed), int(query_id), int(ref_id)])


def _lookup(store, ref_id: int):
    get = getattr(store, "get", None)
    if get is not None:
        return get(ref_id)
    try:
        return store[ref_id]
    except (KeyError, IndexError):
        return None


def rerank_keypoints(shortlist, query_kp: KeypointSet, ref_kp_store, *,
                     ratio: float = DEFAULT_NNR_RATIO,
                     epsilon: float = DEFAULT_RANSAC_EPSILON,
                     iterations: int = DEFAULT_RANSAC_ITERATIONS,
                     alpha: float = DEFAULT_ALPHA,
                     seed: int = 0,
                     executor=None) -> RerankedShortlist:
    """Re-rank a shortlist by cosine + alpha * RANSAC inliers.

    ``ref_kp_store`` maps reference frame ids to KeypointSets (a dict or
    any object with ``get``). Ties keep the original shortlist order. The
    candidate id set is preserved, only the order changes.
    """
    def score_one(rank0: int, ref_id: int, cosine: float):
        ref_kp = _lookup(ref_kp_store, ref_id)
        if ref_kp is None:
            raise MissingKeypoints(ref_id)
        matches = nnr_match(query_kp.descriptors, ref_kp.descriptors, ratio)
        inliers = ransac_homography(
            matches, query_kp, ref_kp, epsilon=epsilon, iterations=iterations,
            seed=derive_candidate_seed(seed, shortlist.query_id, ref_id))
        return RerankCandidate(ref_id=ref_id, cosine=float(cosine),
                               s_prime=combine_scores(cosine, inliers.count, alpha),
                               inliers=inliers.count)

    jobs = [(rank0, ref_id, cosine)
            for rank0, (ref_id, cosine) in enumerate(shortlist.candidates)]
    if executor is not None:
        scored = list(executor.map(lambda args: score_one(*args), jobs))
    else:
        scored = [score_one(*args) for args in jobs]
    order = sorted(range(len(scored)), key=lambda i: (-scored[i].s_prime, i))
    return RerankedShortlist(query_id=shortlist.query_id,
                             candidates=[scored[i] for i in order],
                             stage=STAGE_KEYPOINT)


def resize_depth(depth, target: tuple[int, int] = DEPTH_RESIZE) -> DepthMap:
    """Bilinear resize with corner alignment; constant maps stay constant
    and same-size input is returned bit-identically."""
    src = np.asarray(depth.data if isinstance(depth, DepthMap) else depth,
                     dtype=np.float32)
    if src.ndim != 2 or src.size == 0:
        raise DimensionMismatch(f"depth map must be 2-d and non-empty, got {src.shape}")
    h_in, w_in = src.shape
    h_out, w_out = target
    if (h_in, w_in) == (h_out, w_out):
        return DepthMap(src.copy())
    grid = src.astype(np.float64)
    ys = (np.arange(h_out) * (h_in - 1) / (h_out - 1)) if h_out > 1 else np.zeros(1)
    xs = (np.arange(w_out) * (w_in - 1) / (w_out - 1)) if w_out > 1 else np.zeros(1)
    y0 = np.minimum(ys.astype(np.int64), h_in - 1)
    x0 = np.minimum(xs.astype(np.int64), w_in - 1)
    y1 = np.minimum(y0 + 1, h_in - 1)
    x1 = np.minimum(x0 + 1, w_in - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    out = ((1 - fy) * (1 - fx) * grid[np.ix_(y0, x0)]
           + (1 - fy) * fx * grid[np.ix_(y0, x1)]
           + fy * (1 - fx) * grid[np.ix_(y1, x0)]
           + fy * fx * grid[np.ix_(y1, x1)])
    return DepthMap(out.astype(np.float32))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Structural similarity between two equal-size maps.

    Gaussian-weighted local statistics over fully interior windows;
    C1 = (0.01 L)^2 and C2 = (0.03 L)^2 with L the dynamic range across
    both inputs together (L = 1 when both are the same constant). Returns
    the mean of the local SSIM map; symmetric in its arguments.
    """
    x = np.asarray(a.data if isinstance(a, DepthMap) else a, dtype=np.float64)
    y = np.asarray(b.data if isinstance(b, DepthMap) else b, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionMismatch(f"ssim inputs differ: {x.shape} vs {y.shape}")
    if x.ndim != 2 or min(x.shape) < window:
        raise DimensionMismatch(f"ssim needs 2-d maps of at least {window}x{window}")
    span = max(x.max(), y.max()) - min(x.min(), y.min())
    if span == 0.0:
        span = 1.0
    c1 = (0.01 * span) ** 2
    c2 = (0.03 * span) ** 2

    kernel = _gaussian_kernel(window, sigma)
    wx = np.lib.stride_tricks.sliding_window_view(x, (window, window))
    wy = np.lib.stride_tricks.sliding_window_view(y, (window, window))
    axes = ([2, 3], [0, 1])
    mu_x = np.tensordot(wx, kernel, axes=axes)
    mu_y = np.tensordot(wy, kernel, axes=axes)
    var_x = np.tensordot(wx * wx, kernel, axes=axes) - mu_x * mu_x
    var_y = np.tensordot(wy * wy, kernel, axes=axes) - mu_y * mu_y
    cov = np.tensordot(wx * wy, kernel, axes=axes) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


def rerank_depth(reranked: RerankedShortlist, query_depth, ref_depth_store, *,
                 k_depth: int | None = None) -> RerankedShortlist:
    """Re-rank a keypoint-stage shortlist by depth-map SSIM.

    The top ``k_depth`` candidates (all by default) are scored by SSIM on
    28x28-resized maps and sorted descending; ties and the remaining tail
    keep keypoint-stage order. The candidate id set is preserved.
    """
    if reranked.stage != STAGE_KEYPOINT:
        raise ValueError(f"depth re-ranking expects a keypoint-stage shortlist, "
                         f"got {reranked.stage!r}")
    head_n = len(reranked.candidates) if k_depth is None \
        else min(k_depth, len(reranked.candidates))
    query28 = resize_depth(query_depth)

    scored: list[RerankCandidate] = []
    for cand in reranked.candidates[:head_n]:
        ref_depth = _lookup(ref_depth_store, cand.ref_id)
        if ref_depth is None:
            raise MissingDepth(cand.ref_id)
        value = ssim(query28, resize_depth(ref_depth))
        scored.append(RerankCandidate(ref_id=cand.ref_id, cosine=cand.cosine,
                                      s_prime=cand.s_prime, inliers=cand.inliers,
                                      ssim=value))
    order = sorted(range(head_n), key=lambda i: (-scored[i].ssim, i))
    candidates = [scored[i] for i in order] + list(reranked.candidates[head_n:])
    return RerankedShortlist(query_id=reranked.query_id,
                             candidates=candidates, stage=STAGE_DEPTH)
