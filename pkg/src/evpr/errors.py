"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented exit codes: 2 = configuration error, 3 = data error,
4 = provider error (1 is reserved for unexpected crashes).
"""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(EngineError):
    exit_code = 2


class DataError(EngineError):
    exit_code = 3


class ProviderError(EngineError):
    exit_code = 4


# --- event stream parsing -------------------------------------------------

class MalformedLine(DataError):
    def __init__(self, line_no: int, detail: str = ""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: malformed event record"
                         + (f" ({detail})" if detail else ""))


class CoordinateOutOfRange(DataError):
    def __init__(self, line_no: int, detail: str = ""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: coordinate outside sensor geometry"
                         + (f" ({detail})" if detail else ""))


class NonMonotoneTimestamp(DataError):
    def __init__(self, line_no: int):
        self.line_no = line_no
        super().__init__(f"line {line_no}: timestamp decreases in strict mode")


class BadMagic(DataError):
    pass


class TruncatedRecord(DataError):
    pass


class VersionUnsupported(DataError):
    pass


# --- representations ------------------------------------------------------

class NonPositiveTau(ConfigError):
    pass


# --- features / providers -------------------------------------------------

class ProviderFailure(ProviderError):
    pass


class ShapeMismatch(ProviderError):
    pass


class NonFiniteInput(DataError):
    pass


class ZeroVector(DataError):
    pass


class BadArchiveHeader(DataError):
    pass


class MissingFrameId(DataError):
    def __init__(self, frame_id: int, kind: str = ""):
        self.frame_id = frame_id
        super().__init__(f"frame id {frame_id} not present in archive"
                         + (f" (kind={kind})" if kind else ""))


# --- retrieval / rerank ---------------------------------------------------

class DimensionMismatch(DataError):
    pass


class QueryOutOfRange(DataError):
    def __init__(self, query_id: int, n_queries: int):
        self.query_id = query_id
        super().__init__(f"query id {query_id} outside [0, {n_queries})")


class MissingKeypoints(DataError):
    def __init__(self, ref_id: int):
        self.ref_id = ref_id
        super().__init__(f"no keypoints stored for reference frame {ref_id}")


class MissingDepth(DataError):
    def __init__(self, ref_id: int):
        self.ref_id = ref_id
        super().__init__(f"no depth map stored for reference frame {ref_id}")


# --- evaluation -----------------------------------------------------------

class MissingPosition(DataError):
    def __init__(self, frame_id: int, side: str = ""):
        self.frame_id = frame_id
        super().__init__(f"no ground-truth position for frame {frame_id}"
                         + (f" ({side})" if side else ""))


class IoFailure(DataError):
    pass


# --- pipeline -------------------------------------------------------------

class ManifestMismatch(ConfigError):
    pass


class MissingArtifact(ConfigError):
    pass
