"""Desk-scale control-plane simulator for disaggregated LLM serving.

Pure-Python, deterministic: chained block hashing and prefix matching,
four-tier KV caching, reuse-scored scheduling, speculative decoding via
prompt lookup, a model-loading planner, and a discrete-event cluster
simulator tying them together.
"""

__version__ = "0.1.0"

from .blocks import (
    CHAIN_SEED,
    DEFAULT_BLOCK_SIZE,
    SampledHashConfig,
    generate_hash_keys,
    sampled_hash_positions,
)
from .cache_managers import (
    MatchResult,
    RemoteCacheIndex,
    UnifiedCacheMap,
    WorkerCacheDelta,
    prefix_match,
    strict_prefix_match,
)
from .config import SimConfig, config_from_dict, default_config, load_config
from .cost import CostModel
from .metrics import MetricsReport, RequestTimeline, percentile, report
from .scheduler import (
    Assignment,
    RequestMeta,
    ScoreWeights,
    WorkerStatus,
    form_batch,
    predict_available,
    predict_prefill,
    reuse_score,
    route_decode,
    schedule_prefill,
)
from .simulator import ClusterSim, run
from .tiered_cache import CacheTier, FetchAction, TierConfig, TieredCacheStore
from .workload import PROFILES, TraceRecord, ingest_trace, synth_trace

__all__ = [
    "CHAIN_SEED",
    "DEFAULT_BLOCK_SIZE",
    "SampledHashConfig",
    "generate_hash_keys",
    "sampled_hash_positions",
    "MatchResult",
    "RemoteCacheIndex",
    "UnifiedCacheMap",
    "WorkerCacheDelta",
    "prefix_match",
    "strict_prefix_match",
    "SimConfig",
    "config_from_dict",
    "default_config",
    "load_config",
    "CostModel",
    "MetricsReport",
    "RequestTimeline",
    "percentile",
    "report",
    "Assignment",
    "RequestMeta",
    "ScoreWeights",
    "WorkerStatus",
    "form_batch",
    "predict_available",
    "predict_prefill",
    "reuse_score",
    "route_decode",
    "schedule_prefill",
    "ClusterSim",
    "run",
    "CacheTier",
    "FetchAction",
    "TierConfig",
    "TieredCacheStore",
    "PROFILES",
    "TraceRecord",
    "ingest_trace",
    "synth_trace",
]
