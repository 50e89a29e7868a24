"""Feature providers, GeM pooling, and the feature archive format.

Providers turn frame representations into global feature maps, keypoint
sets, or depth maps. Built-in providers are cheap, deterministic, and
dependency-free; the archive provider replays tensors exported from real
models; the subprocess provider pipes tensors through an external command.
All providers are deterministic: identical input gives bit-identical
output.

Archive format (magic ``EVPA``): version u16 LE, entry count u64 LE, then
an index table of (frame id u64 LE, offset u64 LE, kind u8) records, then
payloads. Kind 0 = global feature map, 1 = keypoints, 2 = depth map; map
and depth payloads use the tensor dump encoding, keypoint payloads are
count u32 LE, (u f32, v f32, score f32) x count, D u32 LE, then packed
f32 descriptors.
"""

from __future__ import annotations

import hashlib
import shlex
import struct
import subprocess
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter

from .errors import (
    BadArchiveHeader,
    ConfigError,
    MissingFrameId,
    NonFiniteInput,
    ProviderFailure,
    ShapeMismatch,
    TruncatedRecord,
    ZeroVector,
)
from .representations import MctsTensor, PolarityHistogram, TencodeImage
from .tensorio import decode_tensor, encode_tensor

DEFAULT_GAMMA = 5.0

KIND_GLOBAL = 0
KIND_KEYPOINTS = 1
KIND_DEPTH = 2

_ARCHIVE_MAGIC = b"EVPA"
_ARCHIVE_VERSION = 1
_ARCHIVE_HEADER = struct.Struct("<4sHQ")
_INDEX_ENTRY = struct.Struct("<QQB")


@dataclass(frozen=True)
class GlobalFeatureMap:
    """Spatial activation grid (H', W', C), float32, finite."""

    data: np.ndarray


@dataclass(frozen=True)
class GlobalDescriptor:
    vector: np.ndarray
    normalized: bool = False


@dataclass(frozen=True)
class KeypointSet:
    """Detected points (N, 2) as (u, v) columns/rows, aligned descriptors
    (N, D), and optional per-point scores."""

    points: np.ndarray
    descriptors: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        if len(self.points) != len(self.descriptors):
            raise ValueError("points and descriptors must align")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls, dim: int = 0) -> "KeypointSet":
        return cls(points=np.empty((0, 2), dtype=np.float32),
                   descriptors=np.empty((0, dim), dtype=np.float32),
                   scores=np.empty(0, dtype=np.float32))


@dataclass(frozen=True)
class DepthMap:
    """Dense relative depth (H, W), float32, non-negative."""

    data: np.ndarray


@dataclass
class ProviderSpec:
    """Parsed provider selection: a kind plus string parameters.

    Spec strings look like ``builtin-grid``, ``builtin-grid:grid=7``,
    ``archive:/path/to.evpa``, ``archive:path=/p.evpa,model=vits16`` or
    ``subprocess:python runner.py``.
    """

    kind: str
    params: dict[str, str] = field(default_factory=dict)

    KINDS = ("builtin-grid", "builtin-corner", "builtin-density-depth",
             "archive", "subprocess")

    @classmethod
    def parse(cls, text: str) -> "ProviderSpec":
        kind, _, rest = text.partition(":")
        kind = kind.strip()
        if kind not in cls.KINDS:
            raise ConfigError(f"unknown provider kind {kind!r} in {text!r}")
        params: dict[str, str] = {}
        rest = rest.strip()
        if rest:
            if kind == "subprocess":
                params["command"] = rest
            elif kind == "archive" and "=" not in rest:
                params["path"] = rest
            else:
                for item in rest.split(","):
                    key, sep, value = item.partition("=")
                    if not sep:
                        raise ConfigError(f"bad provider parameter {item!r} in {text!r}")
                    params[key.strip()] = value.strip()
        return cls(kind=kind, params=params)


def _as_channels_last(rep) -> np.ndarray:
    """Normalize any representation to a float32 (H, W, C) array."""
    if isinstance(rep, PolarityHistogram):
        return rep.to_float()
    if isinstance(rep, MctsTensor):
        h, w = rep.data.shape[:2]
        return rep.data.reshape(h, w, -1).astype(np.float32, copy=False)
    if isinstance(rep, TencodeImage):
        return rep.data
    arr = np.asarray(rep, dtype=np.float32)
    if arr.ndim == 2:
        return arr[:, :, None]
    if arr.ndim == 4:
        return arr.reshape(arr.shape[0], arr.shape[1], -1)
    if arr.ndim != 3:
        raise ShapeMismatch(f"cannot interpret rank-{arr.ndim} input as a frame")
    return arr


def _corner_plane(rep) -> np.ndarray:
    if isinstance(rep, MctsTensor):
        return rep.data.max(axis=(2, 3)).astype(np.float64)
    arr = _as_channels_last(rep)
    return arr.max(axis=2).astype(np.float64)


# --- built-in providers ----------------------------------------------------

class BuiltinGridProvider:
    """Patch-grid statistics embedder.

    Partitions the frame into a grid (default 14x14) and emits, per cell
    and input channel, (mean, max, nonzero count). Cheap, deterministic,
    and shaped like a ViT-style patch grid.
    """

    single_threaded = False

    def __init__(self, grid: int = 14):
        if grid <= 0:
            raise ConfigError("grid must be positive")
        self.grid = grid

    def canonical(self) -> str:
        return f"builtin-grid|grid={self.grid}"

    def embed(self, rep, frame_id: int | None = None) -> np.ndarray:
        x = _as_channels_last(rep).astype(np.float64)
        h, w, c = x.shape
        g = self.grid
        row_edges = (np.arange(g + 1, dtype=np.int64) * h) // g
        col_edges = (np.arange(g + 1, dtype=np.int64) * w) // g
        out = np.zeros((g, g, 3 * c), dtype=np.float64)
        if h >= g and w >= g:
            areas = np.diff(row_edges)[:, None] * np.diff(col_edges)[None, :]
            sums = np.add.reduceat(np.add.reduceat(x, row_edges[:-1], axis=0),
                                   col_edges[:-1], axis=1)
            maxes = np.maximum.reduceat(np.maximum.reduceat(x, row_edges[:-1], axis=0),
                                        col_edges[:-1], axis=1)
            nnz = np.add.reduceat(np.add.reduceat((x != 0).astype(np.float64),
                                                  row_edges[:-1], axis=0),
                                  col_edges[:-1], axis=1)
            out[:, :, 0::3] = sums / areas[:, :, None]
            out[:, :, 1::3] = maxes
            out[:, :, 2::3] = nnz
        else:
            # input smaller than the grid: some cells are empty and stay zero
            for i in range(g):
                for j in range(g):
                    cell = x[row_edges[i]:row_edges[i + 1], col_edges[j]:col_edges[j + 1]]
                    if cell.size == 0:
                        continue
                    out[i, j, 0::3] = cell.mean(axis=(0, 1))
                    out[i, j, 1::3] = cell.max(axis=(0, 1))
                    out[i, j, 2::3] = np.count_nonzero(cell, axis=(0, 1))
        return out.astype(np.float32)


class BuiltinCornerProvider:
    """Structure-tensor corner detector with patch descriptors.

    Works on the max over polarity/tau channels of an MCTS tensor. Corner
    response is the smaller structure-tensor eigenvalue; candidates pass
    non-maximum suppression (radius 4 px) and a relative threshold, and
    each keypoint carries a mean-subtracted, L2-normalized 8x8 patch as
    its 64-d descriptor.
    """

    single_threaded = False

    def __init__(self, nms_radius: int = 4, max_keypoints: int = 512,
                 rel_threshold: float = 0.01, patch: int = 8, sigma: float = 1.5):
        self.nms_radius = nms_radius
        self.max_keypoints = max_keypoints
        self.rel_threshold = rel_threshold
        self.patch = patch
        self.sigma = sigma

    def canonical(self) -> str:
        return (f"builtin-corner|max_keypoints={self.max_keypoints}"
                f"|nms_radius={self.nms_radius}|patch={self.patch}"
                f"|rel_threshold={self.rel_threshold!r}|sigma={self.sigma!r}")

    def detect(self, rep, frame_id: int | None = None) -> KeypointSet:
        plane = _corner_plane(rep)
        h, w = plane.shape
        dim = self.patch * self.patch
        if plane.size == 0 or plane.max() <= 0:
            return KeypointSet.empty(dim)

        gy, gx = np.gradient(plane)
        products = np.stack([gx * gx, gy * gy, gx * gy])
        jxx, jyy, jxy = gaussian_filter(products, (0.0, self.sigma, self.sigma))
        trace = jxx + jyy
        diff = jxx - jyy
        response = 0.5 * (trace - np.sqrt(diff * diff + 4.0 * jxy * jxy))

        peak = response.max()
        if peak <= 0:
            return KeypointSet.empty(dim)
        size = 2 * self.nms_radius + 1
        is_max = response >= maximum_filter(response, size=size)
        # patch rows span [y - lo, y - lo + patch); keep y in [lo, h - patch + lo]
        lo = self.patch // 2 - 1
        keep = is_max & (response > self.rel_threshold * peak)
        keep[:lo, :] = False
        keep[max(h - self.patch + lo + 1, 0):, :] = False
        keep[:, :lo] = False
        keep[:, max(w - self.patch + lo + 1, 0):] = False
        ys, xs = np.nonzero(keep)
        if len(ys) == 0:
            return KeypointSet.empty(dim)

        scores = response[ys, xs]
        order = np.lexsort((xs, ys, -scores))[: self.max_keypoints]
        ys, xs, scores = ys[order], xs[order], scores[order]

        offsets = np.arange(self.patch) - lo
        rows = (ys[:, None] + offsets[None, :])[:, :, None]
        cols = (xs[:, None] + offsets[None, :])[:, None, :]
        descs = plane[rows, cols].reshape(len(ys), dim)
        descs -= descs.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(descs, axis=1, keepdims=True)
        np.divide(descs, norms, out=descs, where=norms > 1e-12)
        points = np.stack([xs, ys], axis=1).astype(np.float32)
        return KeypointSet(points=points,
                           descriptors=descs.astype(np.float32),
                           scores=scores.astype(np.float32))


class BuiltinDensityDepthProvider:
    """Smoothed inverse-event-density depth surrogate.

    Active pixels (where the tencode polarity channels sum to 1) are
    Gaussian-smoothed into a density field; depth is its reciprocal above
    a floor, so sparse regions read as far and dense regions as near.
    """

    single_threaded = False

    def __init__(self, sigma: float = 3.0, floor: float = 0.25):
        if sigma <= 0 or floor <= 0:
            raise ConfigError("sigma and floor must be positive")
        self.sigma = sigma
        self.floor = floor

    def canonical(self) -> str:
        return f"builtin-density-depth|floor={self.floor!r}|sigma={self.sigma!r}"

    def estimate(self, rep, frame_id: int | None = None) -> DepthMap:
        img = _as_channels_last(rep).astype(np.float64)
        if img.shape[2] >= 3:
            activity = img[:, :, 0] + img[:, :, 2]
        else:
            activity = img.sum(axis=2)
        density = gaussian_filter(activity, self.sigma)
        depth = 1.0 / (self.floor + np.maximum(density, 0.0))
        return DepthMap(depth.astype(np.float32))


# --- archive format ---------------------------------------------------------

def _encode_keypoints(kp: KeypointSet) -> bytes:
    n = len(kp)
    scores = kp.scores if kp.scores is not None else np.zeros(n, dtype=np.float32)
    rows = np.empty((n, 3), dtype="<f4")
    if n:
        rows[:, :2] = kp.points
        rows[:, 2] = scores
    dim = kp.descriptors.shape[1] if kp.descriptors.ndim == 2 else 0
    descs = np.ascontiguousarray(kp.descriptors, dtype="<f4")
    return (struct.pack("<I", n) + rows.tobytes()
            + struct.pack("<I", dim) + descs.tobytes())


def _decode_keypoints(buf: memoryview) -> KeypointSet:
    if len(buf) < 4:
        raise TruncatedRecord("keypoint payload truncated")
    n = struct.unpack_from("<I", buf, 0)[0]
    off = 4
    rows = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=off).reshape(n, 3)
    off += 12 * n
    dim = struct.unpack_from("<I", buf, off)[0]
    off += 4
    descs = np.frombuffer(buf, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
    return KeypointSet(points=rows[:, :2].copy(), descriptors=descs.copy(),
                       scores=rows[:, 2].copy())


def write_feature_archive(path: str, entries) -> None:
    """Write (frame_id, kind, payload) entries to an archive file.

    Payloads by kind: global map -> (H, W, C) array, keypoints ->
    KeypointSet, depth -> (H, W) array. One archive may mix kinds.
    """
    encoded: list[tuple[int, int, bytes]] = []
    for frame_id, kind, payload in entries:
        if kind == KIND_KEYPOINTS:
            blob = _encode_keypoints(payload)
        elif kind in (KIND_GLOBAL, KIND_DEPTH):
            data = payload.data if isinstance(payload, (DepthMap, GlobalFeatureMap)) else payload
            blob = encode_tensor(np.asarray(data))
        else:
            raise ValueError(f"unknown archive kind {kind}")
        encoded.append((int(frame_id), int(kind), blob))

    offset = _ARCHIVE_HEADER.size + _INDEX_ENTRY.size * len(encoded)
    with open(path, "wb") as fh:
        fh.write(_ARCHIVE_HEADER.pack(_ARCHIVE_MAGIC, _ARCHIVE_VERSION, len(encoded)))
        for frame_id, kind, blob in encoded:
            fh.write(_INDEX_ENTRY.pack(frame_id, offset, kind))
            offset += len(blob)
        for _, _, blob in encoded:
            fh.write(blob)


class FeatureArchive:
    """Random-access reader for the archive format.

    The index is loaded eagerly; payloads decode lazily per lookup, so
    concurrent read-only use is safe.
    """

    def __init__(self, path: str):
        self.path = path
        with open(path, "rb") as fh:
            self._data = fh.read()
        if self._data[:4] != _ARCHIVE_MAGIC:
            raise BadArchiveHeader(f"{path}: bad archive magic")
        if len(self._data) < _ARCHIVE_HEADER.size:
            raise BadArchiveHeader(f"{path}: truncated archive header")
        _, version, count = _ARCHIVE_HEADER.unpack_from(self._data)
        if version != _ARCHIVE_VERSION:
            raise BadArchiveHeader(f"{path}: unsupported archive version {version}")
        index_end = _ARCHIVE_HEADER.size + _INDEX_ENTRY.size * count
        if len(self._data) < index_end:
            raise BadArchiveHeader(f"{path}: truncated index table")
        self._index: dict[tuple[int, int], int] = {}
        self._order: list[tuple[int, int]] = []
        for i in range(count):
            fid, offset, kind = _INDEX_ENTRY.unpack_from(
                self._data, _ARCHIVE_HEADER.size + i * _INDEX_ENTRY.size)
            self._index[(fid, kind)] = offset
            self._order.append((fid, kind))

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self._index

    def frame_ids(self, kind: int) -> list[int]:
        return sorted(fid for fid, k in self._index if k == kind)

    def _payload(self, frame_id: int, kind: int) -> memoryview:
        try:
            offset = self._index[(frame_id, kind)]
        except KeyError:
            raise MissingFrameId(frame_id, kind=str(kind)) from None
        return memoryview(self._data)[offset:]

    def global_map(self, frame_id: int) -> np.ndarray:
        tensor, _ = decode_tensor(self._payload(frame_id, KIND_GLOBAL))
        return tensor[:, :, :, 0]

    def keypoints(self, frame_id: int) -> KeypointSet:
        return _decode_keypoints(self._payload(frame_id, KIND_KEYPOINTS))

    def depth(self, frame_id: int) -> np.ndarray:
        tensor, _ = decode_tensor(self._payload(frame_id, KIND_DEPTH))
        return tensor[:, :, 0, 0]


def load_feature_archive(path: str) -> FeatureArchive:
    return FeatureArchive(path)


class ArchiveProvider:
    """Replays stored tensors by frame id; covers all three provider roles."""

    single_threaded = False

    def __init__(self, path: str, model: str = ""):
        self.archive = FeatureArchive(path)
        self.model = model

    def canonical(self) -> str:
        return f"archive|model={self.model}"

    def _require_id(self, frame_id):
        if frame_id is None:
            raise ProviderFailure("archive provider needs a frame id")
        return int(frame_id)

    def embed(self, rep, frame_id: int | None = None) -> np.ndarray:
        return self.archive.global_map(self._require_id(frame_id))

    def detect(self, rep, frame_id: int | None = None) -> KeypointSet:
        return self.archive.keypoints(self._require_id(frame_id))

    def estimate(self, rep, frame_id: int | None = None) -> DepthMap:
        return DepthMap(self.archive.depth(self._require_id(frame_id)))


class SubprocessProvider:
    """Pipes one tensor through an external command per call.

    The representation is written to the child's stdin in the tensor dump
    encoding and one tensor is read back from stdout. Global/depth roles
    expect a spatial tensor back; the keypoint role expects (N, 3 + D)
    rows of (u, v, score, descriptor...).
    """

    single_threaded = True

    def __init__(self, command: str, timeout: float = 10.0):
        if not command.strip():
            raise ConfigError("subprocess provider needs a command")
        self.command = command
        self.argv = shlex.split(command)
        self.timeout = timeout

    def canonical(self) -> str:
        return f"subprocess|command={self.command}"

    def _roundtrip(self, array: np.ndarray) -> np.ndarray:
        try:
            proc = subprocess.run(self.argv, input=encode_tensor(array),
                                  capture_output=True, timeout=self.timeout)
        except subprocess.TimeoutExpired:
            raise ProviderFailure(f"provider timed out after {self.timeout}s") from None
        except OSError as exc:
            raise ProviderFailure(f"cannot run provider command: {exc}") from None
        if proc.returncode != 0:
            tail = proc.stderr.decode("utf-8", "replace")[-500:]
            raise ProviderFailure(f"provider exited {proc.returncode}: {tail}")
        try:
            tensor, _ = decode_tensor(proc.stdout)
        except TruncatedRecord as exc:
            raise ProviderFailure(f"bad provider output: {exc}") from None
        return tensor

    def embed(self, rep, frame_id: int | None = None) -> np.ndarray:
        out = self._roundtrip(_as_channels_last(rep))
        return out[:, :, :, 0]

    def detect(self, rep, frame_id: int | None = None) -> KeypointSet:
        data = _as_channels_last(rep) if not isinstance(rep, MctsTensor) else rep.data
        out = self._roundtrip(np.asarray(data))
        rows = out[:, :, 0, 0]
        if rows.ndim != 2 or (rows.size and rows.shape[1] < 3):
            raise ProviderFailure("keypoint provider must return (N, 3 + D) rows")
        return KeypointSet(points=rows[:, :2].copy(),
                           descriptors=rows[:, 3:].copy(),
                           scores=rows[:, 2].copy())

    def estimate(self, rep, frame_id: int | None = None) -> DepthMap:
        out = self._roundtrip(_as_channels_last(rep))
        return DepthMap(out[:, :, 0, 0])


def make_provider(spec: ProviderSpec):
    """Instantiate a provider from its parsed spec."""
    p = spec.params
    try:
        if spec.kind == "builtin-grid":
            return BuiltinGridProvider(grid=int(p.get("grid", 14)))
        if spec.kind == "builtin-corner":
            return BuiltinCornerProvider(
                nms_radius=int(p.get("nms_radius", 4)),
                max_keypoints=int(p.get("max_keypoints", 512)),
                rel_threshold=float(p.get("rel_threshold", 0.01)),
                patch=int(p.get("patch", 8)),
                sigma=float(p.get("sigma", 1.5)))
        if spec.kind == "builtin-density-depth":
            return BuiltinDensityDepthProvider(
                sigma=float(p.get("sigma", 3.0)),
                floor=float(p.get("floor", 0.25)))
        if spec.kind == "archive":
            if "path" not in p:
                raise ConfigError("archive provider needs path=")
            return ArchiveProvider(p["path"], model=p.get("model", ""))
        if spec.kind == "subprocess":
            return SubprocessProvider(p.get("command", ""),
                                      timeout=float(p.get("timeout", 10.0)))
    except ValueError as exc:
        raise ConfigError(f"bad provider parameters for {spec.kind}: {exc}") from None
    raise ConfigError(f"unknown provider kind {spec.kind!r}")


def provider_fingerprint(provider) -> bytes:
    """32-byte identity hash; storage locations are excluded so the same
    model replayed from different archive files matches."""
    return hashlib.sha256(provider.canonical().encode("utf-8")).digest()


# --- pooling and normalization ----------------------------------------------

def embed_global(provider, representation, frame_id: int | None = None) -> GlobalFeatureMap:
    """Run a global provider and validate its output map."""
    data = provider.embed(representation, frame_id=frame_id)
    data = np.asarray(data)
    if data.ndim != 3 or min(data.shape) == 0:
        raise ProviderFailure(f"global provider returned shape {data.shape}")
    if not np.isfinite(data).all():
        raise ProviderFailure("global provider returned non-finite activations")
    return GlobalFeatureMap(data.astype(np.float32, copy=False))


def detect_keypoints(provider, mcts, frame_id: int | None = None) -> KeypointSet:
    return provider.detect(mcts, frame_id=frame_id)


def estimate_depth(provider, tencode, frame_id: int | None = None) -> DepthMap:
    depth = provider.estimate(tencode, frame_id=frame_id)
    data = depth.data if isinstance(depth, DepthMap) else np.asarray(depth)
    if data.ndim != 2:
        raise ProviderFailure(f"depth provider returned shape {data.shape}")
    if not np.isfinite(data).all() or (data < 0).any():
        raise ProviderFailure("depth maps must be finite and non-negative")
    return DepthMap(data.astype(np.float32, copy=False))


def gem_pool(feature_map: GlobalFeatureMap, gamma: float = DEFAULT_GAMMA) -> GlobalDescriptor:
    """Generalized-mean pool a feature map into one vector per channel.

    Computes (mean over space of x^gamma)^(1/gamma) in float64, with
    negatives clamped to zero first (fractional powers are undefined for
    them). gamma=1 is the arithmetic mean; large gamma approaches the
    per-channel max. Channel maxima are factored out so large gamma does
    not overflow.
    """
    if gamma < 1:
        raise ConfigError(f"gamma must be >= 1, got {gamma}")
    data = np.asarray(feature_map.data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteInput("feature map contains NaN/Inf")
    h, w, c = data.shape
    flat = np.maximum(data, 0.0).reshape(h * w, c)
    peak = flat.max(axis=0)
    vector = np.zeros(c, dtype=np.float64)
    live = peak > 0
    if live.any():
        ratios = flat[:, live] / peak[live]
        pooled = np.mean(ratios ** gamma, axis=0) ** (1.0 / gamma)
        vector[live] = peak[live] * pooled
    return GlobalDescriptor(vector=vector, normalized=False)


def l2_normalize(descriptor: GlobalDescriptor) -> GlobalDescriptor:
    """Return a unit-norm copy; idempotent on already-normalized input."""
    vector = np.asarray(descriptor.vector, dtype=np.float64)
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        raise ZeroVector("cannot normalize a zero descriptor")
    if descriptor.normalized and abs(norm - 1.0) < 1e-9:
        return GlobalDescriptor(vector=vector.copy(), normalized=True)
    return GlobalDescriptor(vector=vector / norm, normalized=True)
