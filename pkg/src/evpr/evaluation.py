"""Recall@K evaluation, per-query timing, and matrix export.

Positions are planar meters; a query is a true positive at K when any of
its top-K candidates lies within the distance tolerance of the query
position. GTP counts queries that have at least one in-tolerance
reference at all; queries without any are excluded from the recall
denominator and flagged in the report.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from statistics import mean, median

import numpy as np

from .errors import IoFailure, MissingPosition
from .tensorio import write_tensor

log = logging.getLogger(__name__)

DEFAULT_TOLERANCE_M = 70.0
INDOOR_TOLERANCE_M = 3.0
DEFAULT_KS = (1, 5, 10)
DEFAULT_WARMUP_QUERIES = 5

EARTH_RADIUS_M = 6_378_137.0

STAGES = ("representation", "embedding", "retrieval", "rerank")


@dataclass(frozen=True)
class GroundTruth:
    """Per-frame planar positions for both traverses plus the tolerance."""

    ref_positions: np.ndarray
    query_positions: np.ndarray
    tolerance_m: float

    def __post_init__(self):
        if self.tolerance_m <= 0:
            raise ValueError("tolerance must be positive")

    def ref_position(self, frame_id: int) -> np.ndarray:
        if not 0 <= frame_id < len(self.ref_positions):
            raise MissingPosition(frame_id, side="reference")
        return self.ref_positions[frame_id]

    def query_position(self, frame_id: int) -> np.ndarray:
        if not 0 <= frame_id < len(self.query_positions):
            raise MissingPosition(frame_id, side="query")
        return self.query_positions[frame_id]


@dataclass
class RecallReport:
    per_k: dict[int, float]
    tp_counts: dict[int, int]
    gtp: int
    total_queries: int
    undefined: bool = False
    config_fingerprint: str = ""

    def to_dict(self) -> dict:
        return {
            "recall_at_k": {str(k): v for k, v in sorted(self.per_k.items())},
            "true_positives": {str(k): v for k, v in sorted(self.tp_counts.items())},
            "ground_truth_positives": self.gtp,
            "total_queries": self.total_queries,
            "undefined": self.undefined,
            "config_fingerprint": self.config_fingerprint,
        }


@dataclass
class QueryTiming:
    query_id: int
    total_s: float
    stages: dict[str, float] = field(default_factory=dict)

    @property
    def hz(self) -> float:
        return 1.0 / self.total_s if self.total_s > 0 else math.inf


@dataclass
class TimingReport:
    per_query: list[QueryTiming]
    warmup: int = DEFAULT_WARMUP_QUERIES

    def measured(self) -> list[QueryTiming]:
        return self.per_query[self.warmup:]

    def summary(self) -> dict:
        rows = self.measured()
        if not rows:
            return {"queries": 0, "warmup_excluded": min(self.warmup, len(self.per_query))}
        rates = [q.hz for q in rows]
        totals = [q.total_s for q in rows]
        out = {
            "queries": len(rows),
            "warmup_excluded": min(self.warmup, len(self.per_query)),
            "mean_hz": mean(rates),
            "median_hz": median(rates),
            "mean_latency_s": mean(totals),
            "median_latency_s": median(totals),
        }
        for stage in STAGES:
            values = [q.stages.get(stage, 0.0) for q in rows]
            out[f"median_{stage}_s"] = median(values)
        return out

    def to_dict(self) -> dict:
        return {
            "summary": self.summary(),
            "per_query": [
                {"query_id": q.query_id, "total_s": q.total_s, "hz": q.hz,
                 "stages": dict(q.stages)}
                for q in self.per_query
            ],
        }


def recall_at_k(rankings, ground_truth: GroundTruth, ks=DEFAULT_KS) -> RecallReport:
    """Compute Recall@K over ranked candidate lists.

    ``rankings`` is an iterable of (query_id, [ref_id, ...]) with
    candidates in rank order. A query scores at K when any of its first K
    candidates is within tolerance of the query position; the denominator
    is the number of queries with at least one in-tolerance reference.
    """
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("ks must be positive integers")
    rankings = list(rankings)
    tol2 = float(ground_truth.tolerance_m) ** 2
    refs = np.asarray(ground_truth.ref_positions, dtype=np.float64)

    gtp = 0
    tp = {k: 0 for k in ks}
    for query_id, candidates in rankings:
        qpos = np.asarray(ground_truth.query_position(int(query_id)), dtype=np.float64)
        candidates = [int(c) for c in candidates]
        for ref_id in candidates:
            ground_truth.ref_position(ref_id)
        if len(refs) == 0:
            continue
        d2_all = ((refs - qpos) ** 2).sum(axis=1)
        if not (d2_all <= tol2).any():
            continue  # no possible positive: excluded from the denominator
        gtp += 1
        d2_cand = ((refs[candidates] - qpos) ** 2).sum(axis=1) if candidates else \
            np.empty(0)
        for k in ks:
            if (d2_cand[:k] <= tol2).any():
                tp[k] += 1

    undefined = gtp == 0
    if undefined:
        log.warning("recall undefined: no query has an in-tolerance reference")
    per_k = {k: (tp[k] / gtp if gtp else 0.0) for k in ks}
    return RecallReport(per_k=per_k, tp_counts=tp, gtp=gtp,
                        total_queries=len(rankings), undefined=undefined)


def measure_runtime(pipeline, query_windows, warmup: int = DEFAULT_WARMUP_QUERIES,
                    query_ids=None) -> TimingReport:
    """Time ``pipeline.run_query(window)`` per query on a monotonic clock.

    The pipeline must be fully initialized (database loaded) beforehand;
    each call spans windowing output through final ranking. The first
    ``warmup`` queries are recorded but excluded from summary statistics.
    """
    timings: list[QueryTiming] = []
    for i, window in enumerate(query_windows):
        qid = query_ids[i] if query_ids is not None else getattr(window, "index", i)
        start = time.perf_counter()
        _, stage_times = pipeline.run_query(window)
        total = time.perf_counter() - start
        timings.append(QueryTiming(query_id=int(qid), total_s=total,
                                   stages=dict(stage_times)))
    return TimingReport(per_query=timings, warmup=warmup)


def export_distance_matrix(similarity, path: str, fmt: str = "csv") -> None:
    """Write the distance matrix 1 - similarity as CSV or a tensor dump."""
    data = similarity.data if hasattr(similarity, "data") else np.asarray(similarity)
    dist = 1.0 - data.astype(np.float64)
    try:
        if fmt == "csv":
            with open(path, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                for row in dist:
                    writer.writerow([f"{v:.9g}" for v in row])
        elif fmt == "dump":
            write_tensor(path, dist.astype(np.float32))
        else:
            raise ValueError(f"unknown export format {fmt!r}")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from None


def load_positions_csv(path: str) -> np.ndarray:
    """Load ``frame_id,x_m,y_m[,timestamp_us]`` rows into a dense array.

    A single non-numeric header line is skipped. Frame ids must cover
    0..N-1 exactly (one position per frame).
    """
    entries: dict[int, tuple[float, float]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(csv.reader(fh), start=1):
            if not raw or (len(raw) == 1 and not raw[0].strip()):
                continue
            if raw[0].strip().startswith("#"):
                continue
            try:
                frame_id = int(raw[0])
            except ValueError:
                if line_no == 1:
                    continue  # header
                raise IoFailure(f"{path}:{line_no}: bad frame id {raw[0]!r}") from None
            if len(raw) < 3:
                raise IoFailure(f"{path}:{line_no}: expected frame_id,x_m,y_m")
            try:
                entries[frame_id] = (float(raw[1]), float(raw[2]))
            except ValueError:
                raise IoFailure(f"{path}:{line_no}: bad coordinate") from None
    if not entries:
        return np.empty((0, 2), dtype=np.float64)
    n = max(entries) + 1
    missing = [i for i in range(n) if i not in entries]
    if missing:
        raise MissingPosition(missing[0])
    out = np.empty((n, 2), dtype=np.float64)
    for frame_id, (x, y) in entries.items():
        out[frame_id] = (x, y)
    return out


def load_ground_truth(ref_csv: str, query_csv: str,
                      tolerance_m: float = DEFAULT_TOLERANCE_M) -> GroundTruth:
    return GroundTruth(ref_positions=load_positions_csv(ref_csv),
                       query_positions=load_positions_csv(query_csv),
                       tolerance_m=tolerance_m)


def latlon_to_enu(lat_deg, lon_deg, origin_lat_deg: float,
                  origin_lon_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Project geographic coordinates to local east/north meters.

    Equirectangular approximation around the origin; adequate for the
    sub-100 km extents of place-recognition traverses.
    """
    lat = np.radians(np.asarray(lat_deg, dtype=np.float64))
    lon = np.radians(np.asarray(lon_deg, dtype=np.float64))
    lat0 = math.radians(origin_lat_deg)
    lon0 = math.radians(origin_lon_deg)
    east = (lon - lon0) * math.cos(lat0) * EARTH_RADIUS_M
    north = (lat - lat0) * EARTH_RADIUS_M
    return east, north


def write_recall_json(report: RecallReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
