"""Event-camera visual place recognition engine.

Converts raw event streams into frame representations, builds a persisted
reference descriptor database, answers queries by global-descriptor
cosine similarity, and refines shortlists with keypoint-homography and
depth-SSIM re-ranking. See the CLI (``evpr --help``) for the end-to-end
workflow.
"""

from .errors import ConfigError, DataError, EngineError, ProviderError
from .event_io import (
    EventStream,
    EventWindow,
    WindowingPolicy,
    load_stream,
    parse_binary,
    parse_text,
    window_stream,
    write_binary,
)
from .evaluation import GroundTruth, RecallReport, TimingReport, measure_runtime, recall_at_k
from .features import (
    DepthMap,
    FeatureArchive,
    GlobalDescriptor,
    GlobalFeatureMap,
    KeypointSet,
    ProviderSpec,
    detect_keypoints,
    embed_global,
    estimate_depth,
    gem_pool,
    l2_normalize,
    load_feature_archive,
    make_provider,
    write_feature_archive,
)
from .pipeline import (
    MODE_GLOBAL,
    MODE_KEYPOINT,
    MODE_KEYPOINT_DEPTH,
    PipelineConfig,
    QueryEngine,
    ReferenceDatabase,
    build_database,
    run_query_stream,
)
from .representations import (
    MctsTensor,
    PolarityHistogram,
    TencodeImage,
    build_histogram,
    build_mcts,
    build_tencode,
)
from .rerank import (
    Homography,
    InlierSet,
    MatchSet,
    RerankedShortlist,
    combine_scores,
    nnr_match,
    ransac_homography,
    rerank_depth,
    rerank_keypoints,
    resize_depth,
    ssim,
)
from .retrieval import DescriptorMatrix, Shortlist, SimilarityMatrix, build_similarity, top_k

__version__ = "0.1.0"
