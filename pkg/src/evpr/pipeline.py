"""Pipeline configuration, database build, and query orchestration.

A reference database is a directory holding the descriptor matrix file,
optional keypoint/depth archives, and a JSON manifest whose frame count
must equal the rows of every artifact. Queries check the manifest's
pooling gamma and provider fingerprints before any window is processed.

Three modes control how far each query runs: ``global`` stops at the
cosine shortlist, ``keypoint`` adds homography re-ranking, and
``keypoint+depth`` appends depth-SSIM re-ranking. Re-ranking permutes
the shortlist, so every mode sees the same candidate id set per query.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from threading import Lock

import numpy as np

from .errors import ConfigError, ManifestMismatch, MissingArtifact, ZeroVector
from .event_io import EventStream, EventWindow, WindowingPolicy, load_stream, window_stream
from .features import (
    KIND_DEPTH,
    KIND_KEYPOINTS,
    DepthMap,
    FeatureArchive,
    ProviderSpec,
    detect_keypoints,
    embed_global,
    estimate_depth,
    gem_pool,
    l2_normalize,
    load_feature_archive,
    make_provider,
    provider_fingerprint,
    write_feature_archive,
)
from .representations import (
    DEFAULT_MCTS_TAUS_US,
    DEFAULT_RECENCY_EPSILON_US,
    build_histogram,
    build_mcts,
    build_tencode,
)
from .retrieval import (
    DescriptorMatrix,
    Shortlist,
    build_similarity,
    load_descriptor_db,
    save_descriptor_db,
    top_k,
)
from .rerank import (
    STAGE_DEPTH,
    STAGE_KEYPOINT,
    RerankedShortlist,
    rerank_depth,
    rerank_keypoints,
)

log = logging.getLogger(__name__)

MODE_GLOBAL = "global"
MODE_KEYPOINT = "keypoint"
MODE_KEYPOINT_DEPTH = "keypoint+depth"
MODES = (MODE_GLOBAL, MODE_KEYPOINT, MODE_KEYPOINT_DEPTH)

MANIFEST_NAME = "manifest.json"
DESCRIPTORS_NAME = "descriptors.evpd"
KEYPOINTS_NAME = "keypoints.evpa"
DEPTH_NAME = "depth.evpa"


@dataclass
class PipelineConfig:
    """Every tunable of the engine, with the standard defaults."""

    geometry_width: int = 346
    geometry_height: int = 260
    window_mode: str = "time"            # "time" or "count"
    window_dt_us: int = 50_000
    window_count: int = 10_000
    window_stride: int | None = None
    query_window_dt_us: int | None = None
    query_window_count: int | None = None
    mcts_taus_us: tuple[float, ...] = DEFAULT_MCTS_TAUS_US
    recency_epsilon_us: float = DEFAULT_RECENCY_EPSILON_US
    tencode_background: float = 0.0
    gamma: float = 5.0
    k: int = 50
    epsilon: float = 5.0
    alpha: float = 0.05
    nnr_ratio: float = 0.8
    ransac_iterations: int = 1000
    k_depth: int | None = None
    mode: str = MODE_GLOBAL
    global_provider: str = "builtin-grid"
    keypoint_provider: str = "builtin-corner"
    depth_provider: str = "builtin-density-depth"
    seed: int = 0
    tolerance_m: float = 70.0
    threads: int = 1
    db_stride: int = 1
    text_header: bool = False
    strict_parse: bool = False

    _INT_FIELDS = {"geometry_width", "geometry_height", "window_dt_us", "window_count",
                   "k", "ransac_iterations", "seed", "threads", "db_stride"}
    _OPT_INT_FIELDS = {"window_stride", "query_window_dt_us", "query_window_count",
                       "k_depth"}
    _FLOAT_FIELDS = {"recency_epsilon_us", "tencode_background", "gamma", "epsilon",
                     "alpha", "nnr_ratio", "tolerance_m"}
    _BOOL_FIELDS = {"text_header", "strict_parse"}

    @property
    def geometry(self) -> tuple[int, int]:
        return (self.geometry_width, self.geometry_height)

    def validate(self) -> "PipelineConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.window_mode not in ("time", "count"):
            raise ConfigError(f"window_mode must be time or count, got {self.window_mode!r}")
        positive = {"geometry_width": self.geometry_width,
                    "geometry_height": self.geometry_height,
                    "window_dt_us": self.window_dt_us,
                    "window_count": self.window_count,
                    "gamma": self.gamma, "k": self.k, "epsilon": self.epsilon,
                    "nnr_ratio": self.nnr_ratio,
                    "ransac_iterations": self.ransac_iterations,
                    "recency_epsilon_us": self.recency_epsilon_us,
                    "tolerance_m": self.tolerance_m, "threads": self.threads,
                    "db_stride": self.db_stride}
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if self.gamma < 1:
            raise ConfigError(f"gamma must be >= 1, got {self.gamma}")
        if self.k_depth is not None and not 1 <= self.k_depth <= self.k:
            raise ConfigError(f"k_depth must be in [1, k], got {self.k_depth}")
        if not self.mcts_taus_us or any(t <= 0 for t in self.mcts_taus_us):
            raise ConfigError("mcts_taus_us must be positive")
        if self.mode == MODE_KEYPOINT_DEPTH and not self.depth_provider:
            raise ConfigError("keypoint+depth mode requires a depth provider")
        if self.mode != MODE_GLOBAL and not self.keypoint_provider:
            raise ConfigError("keypoint re-ranking requires a keypoint provider")
        return self

    def reference_policy(self) -> WindowingPolicy:
        length = self.window_dt_us if self.window_mode == "time" else self.window_count
        return WindowingPolicy(mode=self.window_mode, length=length,
                               stride=self.window_stride)

    def query_policy(self) -> WindowingPolicy:
        if self.window_mode == "time":
            length = self.query_window_dt_us or self.window_dt_us
        else:
            length = self.query_window_count or self.window_count
        return WindowingPolicy(mode=self.window_mode, length=length,
                               stride=self.window_stride)

    def set_option(self, key: str, raw: str) -> None:
        """Apply one ``key=value`` option with string-to-field coercion."""
        if key not in {f.name for f in fields(self)} or key.startswith("_"):
            raise ConfigError(f"unknown config key {key!r}")
        raw = raw.strip()
        try:
            if key in self._INT_FIELDS:
                value = int(raw)
            elif key in self._OPT_INT_FIELDS:
                value = None if raw.lower() in ("", "none") else int(raw)
            elif key in self._FLOAT_FIELDS:
                value = float(raw)
            elif key in self._BOOL_FIELDS:
                if raw.lower() not in ("true", "false", "0", "1"):
                    raise ValueError(raw)
                value = raw.lower() in ("true", "1")
            elif key == "mcts_taus_us":
                value = tuple(float(v) for v in raw.split(",") if v.strip())
            else:
                value = raw
        except ValueError:
            raise ConfigError(f"bad value {raw!r} for config key {key!r}") from None
        setattr(self, key, value)

    @classmethod
    def from_file(cls, path: str) -> "PipelineConfig":
        """Read a ``key = value`` text file (# comments allowed)."""
        config = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise ConfigError(f"{path}:{line_no}: expected key = value")
                config.set_option(key.strip(), value)
        return config

    def fingerprint(self) -> str:
        """Hex digest over every semantics-bearing field (threads excluded)."""
        skip = {"threads"}
        parts = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name in skip:
                continue
            parts.append(f"{f.name}={getattr(self, f.name)!r}")
        return hashlib.sha256("|".join(parts).encode("utf-8")).hexdigest()


def compute_descriptor(feature_map, gamma: float) -> np.ndarray:
    """GeM + L2 as float32; an all-zero map becomes an all-zero row
    (empty windows produce empty frames that rank last everywhere)."""
    pooled = gem_pool(feature_map, gamma)
    try:
        unit = l2_normalize(pooled)
    except ZeroVector:
        return pooled.vector.astype(np.float32)
    return unit.vector.astype(np.float32)


@dataclass
class ReferenceDatabase:
    """Loaded database artifacts plus the manifest that describes them."""

    root: Path
    manifest: dict
    matrix: DescriptorMatrix
    gamma: float
    global_fingerprint: bytes
    keypoint_archive: FeatureArchive | None = None
    depth_archive: FeatureArchive | None = None

    @property
    def frame_count(self) -> int:
        return self.matrix.count

    @classmethod
    def load(cls, root: str) -> "ReferenceDatabase":
        root_path = Path(root)
        manifest_path = root_path / MANIFEST_NAME
        if not manifest_path.exists():
            raise MissingArtifact(f"no manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        matrix, gamma, fingerprint = load_descriptor_db(
            str(root_path / manifest["artifacts"]["descriptors"]))
        db = cls(root=root_path, manifest=manifest, matrix=matrix, gamma=gamma,
                 global_fingerprint=fingerprint)
        if manifest["artifacts"].get("keypoints"):
            db.keypoint_archive = load_feature_archive(
                str(root_path / manifest["artifacts"]["keypoints"]))
        if manifest["artifacts"].get("depth"):
            db.depth_archive = load_feature_archive(
                str(root_path / manifest["artifacts"]["depth"]))
        db._check_counts()
        return db

    def _check_counts(self) -> None:
        declared = int(self.manifest["frame_count"])
        if declared != self.matrix.count:
            raise ManifestMismatch(
                f"manifest declares {declared} frames, descriptor file has "
                f"{self.matrix.count}")
        for name, archive, kind in (("keypoints", self.keypoint_archive, KIND_KEYPOINTS),
                                    ("depth", self.depth_archive, KIND_DEPTH)):
            if archive is not None and len(archive.frame_ids(kind)) != declared:
                raise ManifestMismatch(
                    f"{name} archive holds {len(archive.frame_ids(kind))} frames, "
                    f"manifest declares {declared}")


class _ArchiveKeypointStore:
    def __init__(self, archive: FeatureArchive):
        self.archive = archive

    def get(self, ref_id: int):
        if (ref_id, KIND_KEYPOINTS) not in self.archive:
            return None
        return self.archive.keypoints(ref_id)


class _ArchiveDepthStore:
    def __init__(self, archive: FeatureArchive):
        self.archive = archive

    def get(self, ref_id: int):
        if (ref_id, KIND_DEPTH) not in self.archive:
            return None
        return DepthMap(self.archive.depth(ref_id))


class _SerializedProvider:
    """Wraps a single-threaded provider behind a lock."""

    def __init__(self, provider):
        self._provider = provider
        self._lock = Lock()
        self.single_threaded = True

    def canonical(self) -> str:
        return self._provider.canonical()

    def embed(self, rep, frame_id=None):
        with self._lock:
            return self._provider.embed(rep, frame_id=frame_id)

    def detect(self, rep, frame_id=None):
        with self._lock:
            return self._provider.detect(rep, frame_id=frame_id)

    def estimate(self, rep, frame_id=None):
        with self._lock:
            return self._provider.estimate(rep, frame_id=frame_id)


def _provider_for(spec_text: str):
    provider = make_provider(ProviderSpec.parse(spec_text))
    if getattr(provider, "single_threaded", False):
        provider = _SerializedProvider(provider)
    return provider


def build_database(events_path: str, config: PipelineConfig, out_dir: str,
                   stream: EventStream | None = None) -> ReferenceDatabase:
    """Build and persist a reference database from an event file.

    Windows the stream, builds per-frame representations, runs the
    configured providers, and writes descriptors plus (mode permitting)
    keypoint and depth archives. Deterministic: rebuilding with the same
    inputs and config reproduces the descriptor file byte for byte.
    """
    config.validate()
    if stream is None:
        stream = load_stream(events_path, geometry=config.geometry,
                             strict=config.strict_parse, has_header=config.text_header)
    windows = window_stream(stream, config.reference_policy())
    if config.db_stride > 1:
        windows = windows[::config.db_stride]
    if not windows:
        log.warning("empty event stream: building a database with 0 frames")

    want_kp = config.mode in (MODE_KEYPOINT, MODE_KEYPOINT_DEPTH)
    want_depth = config.mode == MODE_KEYPOINT_DEPTH
    global_provider = _provider_for(config.global_provider)
    kp_provider = _provider_for(config.keypoint_provider) if want_kp else None
    depth_provider = _provider_for(config.depth_provider) if want_depth else None

    def process(job: tuple[int, EventWindow]):
        frame_id, window = job
        histogram = build_histogram(window, config.geometry)
        fmap = embed_global(global_provider, histogram, frame_id=frame_id)
        descriptor = compute_descriptor(fmap, config.gamma)
        keypoints = depth = None
        if want_kp:
            mcts = build_mcts(window, config.geometry, config.mcts_taus_us)
            keypoints = detect_keypoints(kp_provider, mcts, frame_id=frame_id)
        if want_depth:
            tencode = build_tencode(window, config.geometry,
                                    epsilon=config.recency_epsilon_us,
                                    background=(config.tencode_background,) * 3)
            depth = estimate_depth(depth_provider, tencode, frame_id=frame_id)
        return descriptor, keypoints, depth

    jobs = list(enumerate(windows))
    if config.threads > 1 and jobs:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(process, jobs))
    else:
        results = [process(job) for job in jobs]

    dim = len(results[0][0]) if results else 0
    rows = np.zeros((len(results), dim), dtype=np.float32)
    for i, (descriptor, _, _) in enumerate(results):
        rows[i] = descriptor
    matrix = DescriptorMatrix(rows=rows, side="reference")
    fingerprint = provider_fingerprint(global_provider)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_descriptor_db(str(out / DESCRIPTORS_NAME), matrix, config.gamma, fingerprint)
    artifacts = {"descriptors": DESCRIPTORS_NAME, "keypoints": None, "depth": None}
    if want_kp:
        write_feature_archive(str(out / KEYPOINTS_NAME),
                              [(i, KIND_KEYPOINTS, kp) for i, (_, kp, _) in enumerate(results)])
        artifacts["keypoints"] = KEYPOINTS_NAME
    if want_depth:
        write_feature_archive(str(out / DEPTH_NAME),
                              [(i, KIND_DEPTH, d) for i, (_, _, d) in enumerate(results)])
        artifacts["depth"] = DEPTH_NAME

    manifest = {
        "format": "evpr-database",
        "version": 1,
        "frame_count": len(results),
        "geometry": [config.geometry_width, config.geometry_height],
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config_fingerprint": config.fingerprint(),
        "gamma": config.gamma,
        "window": {"mode": config.window_mode,
                   "length": (config.window_dt_us if config.window_mode == "time"
                              else config.window_count),
                   "stride": config.window_stride,
                   "db_stride": config.db_stride},
        "mcts_taus_us": list(config.mcts_taus_us),
        "recency_epsilon_us": config.recency_epsilon_us,
        "tencode_background": config.tencode_background,
        "global_provider": global_provider.canonical(),
        "global_fingerprint": fingerprint.hex(),
        "keypoint_provider": kp_provider.canonical() if kp_provider else None,
        "keypoint_fingerprint": provider_fingerprint(kp_provider).hex() if kp_provider else None,
        "depth_provider": depth_provider.canonical() if depth_provider else None,
        "depth_fingerprint": provider_fingerprint(depth_provider).hex() if depth_provider else None,
        "artifacts": artifacts,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    return ReferenceDatabase.load(str(out))


class QueryEngine:
    """Runs the per-window query pipeline against a loaded database.

    Compatibility (gamma, provider fingerprints, required artifacts) is
    checked here, before any query executes. ``run_query`` returns the
    final shortlist plus wall-clock stage timings.
    """

    def __init__(self, db: ReferenceDatabase, config: PipelineConfig,
                 allow_provider_mismatch: bool = False):
        config.validate()
        self.db = db
        self.config = config
        self.geometry = (int(db.manifest["geometry"][0]), int(db.manifest["geometry"][1]))

        self.global_provider = _provider_for(config.global_provider)
        self._check_compat(allow_provider_mismatch)

        self.kp_provider = None
        self.depth_provider = None
        self.kp_store = None
        self.depth_store = None
        if config.mode in (MODE_KEYPOINT, MODE_KEYPOINT_DEPTH):
            if db.keypoint_archive is None:
                raise MissingArtifact(
                    "database holds no keypoint archive; rebuild with mode=keypoint")
            self.kp_provider = _provider_for(config.keypoint_provider)
            self.kp_store = _ArchiveKeypointStore(db.keypoint_archive)
        if config.mode == MODE_KEYPOINT_DEPTH:
            if db.depth_archive is None:
                raise MissingArtifact(
                    "database holds no depth archive; rebuild with mode=keypoint+depth")
            self.depth_provider = _provider_for(config.depth_provider)
            self.depth_store = _ArchiveDepthStore(db.depth_archive)

    def _check_compat(self, allow_mismatch: bool) -> None:
        problems = []
        if abs(float(self.db.manifest["gamma"]) - self.config.gamma) > 1e-9:
            problems.append(f"gamma: database {self.db.manifest['gamma']}, "
                            f"config {self.config.gamma}")
        mine = provider_fingerprint(self.global_provider).hex()
        theirs = self.db.manifest["global_fingerprint"]
        if mine != theirs:
            problems.append("global provider fingerprint differs "
                            f"({self.db.manifest['global_provider']} vs "
                            f"{self.global_provider.canonical()})")
        if problems and not allow_mismatch:
            raise ManifestMismatch("; ".join(problems))
        if problems:
            log.warning("provider mismatch overridden: %s", "; ".join(problems))

    def run_query(self, window: EventWindow, query_id: int | None = None):
        """Process one query window; returns (result, stage seconds)."""
        config = self.config
        qid = window.index if query_id is None else query_id
        stages: dict[str, float] = {}

        t0 = time.perf_counter()
        histogram = build_histogram(window, self.geometry)
        mcts = tencode = None
        if self.kp_provider is not None:
            mcts = build_mcts(window, self.geometry, config.mcts_taus_us)
        if self.depth_provider is not None:
            tencode = build_tencode(window, self.geometry,
                                    epsilon=config.recency_epsilon_us,
                                    background=(config.tencode_background,) * 3)
        stages["representation"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        fmap = embed_global(self.global_provider, histogram, frame_id=qid)
        descriptor = compute_descriptor(fmap, config.gamma)
        query_kp = query_depth = None
        if self.kp_provider is not None:
            query_kp = detect_keypoints(self.kp_provider, mcts, frame_id=qid)
        if self.depth_provider is not None:
            query_depth = estimate_depth(self.depth_provider, tencode, frame_id=qid)
        stages["embedding"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        queries = DescriptorMatrix(rows=descriptor[None, :], side="query")
        similarity = build_similarity(self.db.matrix, queries)
        shortlist = top_k(similarity, 0, config.k)
        shortlist = Shortlist(query_id=int(qid), candidates=shortlist.candidates)
        stages["retrieval"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        result: Shortlist | RerankedShortlist = shortlist
        if self.kp_provider is not None:
            result = rerank_keypoints(shortlist, query_kp, self.kp_store,
                                      ratio=config.nnr_ratio, epsilon=config.epsilon,
                                      iterations=config.ransac_iterations,
                                      alpha=config.alpha, seed=config.seed)
            if self.depth_provider is not None:
                result = rerank_depth(result, query_depth, self.depth_store,
                                      k_depth=config.k_depth)
        stages["rerank"] = time.perf_counter() - t0
        return result, stages


def result_to_dict(result, window: EventWindow) -> dict:
    """JSON-lines record for one query result."""
    candidates = []
    if isinstance(result, RerankedShortlist):
        for rank, cand in enumerate(result.candidates, start=1):
            entry = {"ref_id": cand.ref_id, "cosine": float(cand.cosine),
                     "s_prime": float(cand.s_prime), "rank": rank}
            if result.stage == STAGE_DEPTH and cand.ssim is not None:
                entry["ssim"] = float(cand.ssim)
            candidates.append(entry)
    else:
        for rank, (ref_id, score) in enumerate(result.candidates, start=1):
            candidates.append({"ref_id": int(ref_id), "cosine": float(score),
                               "rank": rank})
    return {"query_id": int(result.query_id), "window_t_min": int(window.t_min),
            "candidates": candidates}


def trace_lines(result) -> list[dict]:
    """Per-candidate re-rank trace records (empty for global-only results)."""
    if not isinstance(result, RerankedShortlist):
        return []
    lines = []
    for rank, cand in enumerate(result.candidates, start=1):
        lines.append({"query_id": int(result.query_id), "ref_id": cand.ref_id,
                      "cosine": float(cand.cosine), "inliers": cand.inliers,
                      "s_prime": float(cand.s_prime),
                      "ssim": None if cand.ssim is None else float(cand.ssim),
                      "final_rank": rank})
    return lines


def run_query_stream(db: ReferenceDatabase, config: PipelineConfig, events_path: str,
                     out_path: str, trace_path: str | None = None,
                     allow_provider_mismatch: bool = False,
                     stream: EventStream | None = None,
                     online: bool = False) -> int:
    """Query every window of an event file and write JSON-lines results.

    Batch mode parallelizes across windows with ``config.threads``; online
    mode keeps a single query in flight. Output order and content are
    independent of the thread count.
    """
    engine = QueryEngine(db, config, allow_provider_mismatch=allow_provider_mismatch)
    if stream is None:
        stream = load_stream(events_path, geometry=engine.geometry,
                             strict=config.strict_parse, has_header=config.text_header)
    windows = window_stream(stream, config.query_policy())

    if config.threads > 1 and not online and windows:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            outcomes = list(pool.map(lambda w: engine.run_query(w), windows))
    else:
        outcomes = [engine.run_query(w) for w in windows]

    trace_fh = open(trace_path, "w", encoding="utf-8") if trace_path else None
    try:
        with open(out_path, "w", encoding="utf-8") as fh:
            for window, (result, _) in zip(windows, outcomes):
                fh.write(json.dumps(result_to_dict(result, window), sort_keys=True) + "\n")
                if trace_fh is not None:
                    for line in trace_lines(result):
                        trace_fh.write(json.dumps(line, sort_keys=True) + "\n")
    finally:
        if trace_fh is not None:
            trace_fh.close()
    return len(windows)


def load_rankings(results_path: str) -> list[tuple[int, list[int]]]:
    """Read a results JSON-lines file into (query_id, ranked ids) tuples."""
    rankings = []
    with open(results_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            candidates = sorted(record["candidates"], key=lambda c: c["rank"])
            rankings.append((int(record["query_id"]),
                             [int(c["ref_id"]) for c in candidates]))
    return rankings
