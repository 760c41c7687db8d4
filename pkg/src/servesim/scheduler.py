"""Master scheduling: batching window, predictive placement, reuse scoring.

Prefill placement runs local and remote cache lookups (logically
concurrent, joined before scoring), converts block matches to token
counts, estimates each candidate's queue wait from its running set, and
picks the argmax of

    alpha * local_tokens/seq_len
  + beta  * remote_tokens/seq_len
  - gamma * predicted_latency/max_latency

with ties broken by earliest availability, then lowest worker id.  Decode
placement is chat-affinity first, least-loaded fallback.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .blocks import DEFAULT_BLOCK_SIZE, BlockHashKey
from .cache_managers import (
    MATCH_SEMANTICS,
    MatchResult,
    RemoteCacheIndex,
    UnifiedCacheMap,
)
from .cost import CostModel
from .errors import BackpressureError


@dataclass
class RequestMeta:
    """What the frontend hands the master for one request."""

    request_id: str
    block_hashes: List[BlockHashKey]
    seq_len: int
    arrival_time: int
    output_budget: int
    chat_id: Optional[str] = None
    block_size: int = DEFAULT_BLOCK_SIZE

    def __post_init__(self):
        if self.seq_len < len(self.block_hashes) * self.block_size:
            raise ValueError("seq_len shorter than hashed blocks")


@dataclass
class RunningEntry:
    request_id: str
    t_start: int
    predicted_prefill: int

    def __post_init__(self):
        if self.predicted_prefill <= 0:
            raise ValueError("predicted_prefill must be positive")


@dataclass
class WorkerStatus:
    worker_id: str
    running: List[RunningEntry] = field(default_factory=list)
    waiting_count: int = 0
    gpu_mem_free: int = 0
    kv_occupancy: float = 0.0
    cache_version: int = 0

    def __post_init__(self):
        if not 0.0 <= self.kv_occupancy <= 1.0:
            raise ValueError("kv_occupancy must be in [0, 1]")


@dataclass(frozen=True)
class ScoreWeights:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("weights must be non-negative")
        if self.alpha == self.beta == self.gamma == 0:
            raise ValueError("weights must not all be zero")


@dataclass
class Assignment:
    request_id: str
    worker_id: str
    expected_start: int
    reused_blocks_local: int
    reused_blocks_remote: int
    score: float


def form_batch(
    queue: Sequence[RequestMeta],
    dp_size: int,
    group_size: int = 8,
    window_cap: int = 64,
) -> List[List[RequestMeta]]:
    """Take a window of requests in arrival order, group by similar length.

    Window size is max(dp_size, queue depth) capped by window_cap.  The
    window is sorted by sequence length (stable) and chunked, so each group
    pads to roughly one length.
    """
    if dp_size < 1:
        raise ValueError("dp_size must be >= 1")
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    if not queue:
        return []
    w = min(max(dp_size, len(queue)), window_cap)
    window = list(queue[:w])
    window.sort(key=lambda r: r.seq_len)
    return [window[i : i + group_size] for i in range(0, len(window), group_size)]


def predict_prefill(r: RequestMeta, batch_tokens: int, model: CostModel) -> int:
    """Predicted prefill duration (us) under the given batch load."""
    if r.seq_len <= 0:
        raise ValueError("seq_len must be positive")
    return model.prefill_us(r.seq_len, batch_tokens)


def predict_available(status: WorkerStatus, clock: int) -> int:
    """Earliest time the worker finishes its running prefills."""
    if not status.running:
        return clock
    return max(e.t_start + e.predicted_prefill for e in status.running)


def reuse_score(
    local_len: int,
    remote_len: int,
    total_seq_len: int,
    predicted_latency: int,
    max_latency: int,
    w: ScoreWeights,
) -> float:
    """Cache-reuse score; lengths in tokens, latencies in us."""
    if total_seq_len <= 0:
        raise ValueError("total_seq_len must be positive")
    if max_latency <= 0:
        raise ValueError("max_latency must be positive")
    if local_len > total_seq_len or remote_len > total_seq_len:
        raise ValueError("match length exceeds sequence length")
    return (
        w.alpha * (local_len / total_seq_len)
        + w.beta * (remote_len / total_seq_len)
        - w.gamma * (predicted_latency / max_latency)
    )


def match_tokens(
    hashes: Sequence[BlockHashKey],
    cache_map: UnifiedCacheMap,
    worker_id: str,
    match_blocks: int,
    block_size: int,
) -> int:
    """Token count for a block match; a terminal partial block counts its
    watermark instead of a full block."""
    if match_blocks == 0:
        return 0
    tokens = match_blocks * block_size
    meta = cache_map.worker_meta(hashes[match_blocks - 1], worker_id)
    if meta is not None and meta.watermark < block_size:
        tokens = (match_blocks - 1) * block_size + meta.watermark
    return tokens


def admitted(
    workers: Sequence[WorkerStatus],
    occupancy_watermark: float,
    queue_depth_cap: int,
) -> List[WorkerStatus]:
    return [
        s
        for s in workers
        if s.kv_occupancy < occupancy_watermark
        and len(s.running) + s.waiting_count < queue_depth_cap
    ]


def schedule_prefill(
    r: RequestMeta,
    workers: Sequence[WorkerStatus],
    cache_map: UnifiedCacheMap,
    remote_index: RemoteCacheIndex,
    weights: ScoreWeights,
    clock: int,
    model: CostModel,
    *,
    semantics: str = "global",
    occupancy_watermark: float = 0.95,
    queue_depth_cap: int = 16,
) -> Assignment:
    """Pick the prefill worker maximizing the reuse score.

    Raises BackpressureError when no worker passes admission control; the
    caller keeps the request queued.
    """
    if not workers:
        raise ValueError("no workers registered")
    candidates = admitted(workers, occupancy_watermark, queue_depth_cap)
    if not candidates:
        raise BackpressureError(r.request_id)

    if r.block_hashes:
        local = MATCH_SEMANTICS[semantics](r.block_hashes, cache_map)
        remote_blocks = remote_index.remote_lookup(r.block_hashes)
    else:
        local = MatchResult(per_worker={}, global_prefix_len=0)
        remote_blocks = 0
    remote_tokens = min(remote_blocks * r.block_size, r.seq_len)

    prefill_est = predict_prefill(r, 0, model)
    waits = {
        s.worker_id: max(predict_available(s, clock), clock) - clock for s in candidates
    }
    latencies = {w: wait + prefill_est for w, wait in waits.items()}
    max_latency = max(latencies.values())

    best: Optional[Tuple[float, int, str]] = None
    best_status: Optional[WorkerStatus] = None
    chosen_local = 0
    for s in sorted(candidates, key=lambda s: s.worker_id):
        local_blocks = local.per_worker.get(s.worker_id, 0)
        local_tokens = min(
            match_tokens(r.block_hashes, cache_map, s.worker_id, local_blocks, r.block_size),
            r.seq_len,
        )
        score = reuse_score(
            local_tokens,
            remote_tokens,
            r.seq_len,
            latencies[s.worker_id],
            max(max_latency, 1),
            weights,
        )
        key = (-score, waits[s.worker_id], s.worker_id)
        if best is None or key < best:
            best = key
            best_status = s
            chosen_local = local_blocks
    assert best_status is not None
    return Assignment(
        request_id=r.request_id,
        worker_id=best_status.worker_id,
        expected_start=clock + waits[best_status.worker_id],
        reused_blocks_local=chosen_local,
        reused_blocks_remote=max(0, remote_blocks - chosen_local),
        score=-best[0],
    )


def least_loaded(workers: Sequence[WorkerStatus]) -> WorkerStatus:
    return min(
        workers, key=lambda s: (s.kv_occupancy, len(s.running) + s.waiting_count, s.worker_id)
    )


def route_decode(
    r: RequestMeta,
    affinity: Dict[str, str],
    workers: Sequence[WorkerStatus],
    clock: int,
    *,
    occupancy_watermark: float = 0.95,
) -> Assignment:
    """Route to the chat's recorded worker when healthy, else least-loaded."""
    if not workers:
        raise ValueError("no workers registered")
    by_id = {s.worker_id: s for s in workers}
    chosen: Optional[WorkerStatus] = None
    if r.chat_id is not None:
        recorded = affinity.get(r.chat_id)
        if recorded is not None:
            status = by_id.get(recorded)
            if status is not None and status.kv_occupancy < occupancy_watermark:
                chosen = status
    if chosen is None:
        chosen = least_loaded(workers)
        if r.chat_id is not None:
            affinity[r.chat_id] = chosen.worker_id
    return Assignment(
        request_id=r.request_id,
        worker_id=chosen.worker_id,
        expected_start=clock,
        reused_blocks_local=0,
        reused_blocks_remote=0,
        score=0.0,
    )
