"""Deterministic discrete-event simulation of the disaggregated cluster.

One master owns the request queue, the unified cache map (refreshed by
50 ms key syncs), cached worker statuses (20 ms status syncs) and the
scheduling tick.  Workers own a four-tier cache store each.  Per request:
hash the prompt, match, place (reuse-scored or random), fetch cached
blocks tier-by-tier, compute the uncached suffix, then decode (optionally
speculative), with a KV transfer hop between prefill and decode pools in
disaggregated mode.

Time is integer microseconds throughout.  Event ties break by kind rank
(syncs before scheduling before execution) then by insertion sequence, so
a (trace, config, seed) triple always yields byte-identical reports.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, List, Optional, Sequence

from .blocks import generate_hash_keys
from .cache_managers import (
    RemoteCacheIndex,
    UnifiedCacheMap,
    WorkerBlockMeta,
    WorkerCacheDelta,
)
from .config import SimConfig
from .errors import BackpressureError, CacheThrashError
from .metrics import MetricsReport, RequestTimeline, report
from .rng import CounterRng
from .scheduler import (
    Assignment,
    RequestMeta,
    RunningEntry,
    WorkerStatus,
    admitted,
    form_batch,
    predict_prefill,
    route_decode,
    schedule_prefill,
)
from .spec_decode import (
    CyclicCopyModel,
    ProposeState,
    propose_ngram,
    score,
    update,
    verify,
)
from .tiered_cache import CacheTier, FetchAction, TieredCacheStore
from .workload import TraceRecord


class EventKind(IntEnum):
    # Rank doubles as the tie-break at equal timestamps: syncs land before
    # the scheduling tick, execution events before new arrivals.
    STATUS_SYNC = 0
    KEY_SYNC = 1
    SCHEDULE_TICK = 2
    PREFILL_DONE = 3
    DECODE_STEP = 4
    ARRIVAL = 5
    COMPLETE = 6


@dataclass
class WorkerSim:
    worker_id: str
    prefill_capable: bool
    decode_capable: bool
    store: TieredCacheStore
    running: List[RunningEntry] = field(default_factory=list)
    running_tokens: int = 0
    busy_until: int = 0
    # busy_us: prefill durations (serial) plus the union of periods with at
    # least one active decode stream, so utilization stays a wall-time share
    busy_us: int = 0
    busy_mark: int = 0
    active_decodes: int = 0
    last_synced: Dict[int, WorkerBlockMeta] = field(default_factory=dict)
    last_acked_version: int = 0

    def status(self) -> WorkerStatus:
        # Occupancy counts pinned bytes only: a full-but-evictable cache is
        # the steady state of an LRU tier, not load.
        return WorkerStatus(
            worker_id=self.worker_id,
            running=list(self.running),
            waiting_count=0,
            gpu_mem_free=self._gpu_free(),
            kv_occupancy=min(1.0, self.store.occupancy(CacheTier.GPU)),
            cache_version=self.store.mutation_count,
        )

    def _gpu_free(self) -> int:
        cap = self.store.capacity(CacheTier.GPU)
        if cap is None:
            return 1 << 62
        return max(0, cap - self.store.occupied_bytes(CacheTier.GPU))


@dataclass
class RequestSim:
    index: int
    record: TraceRecord
    meta: RequestMeta
    tokens: List[int]
    timeline: RequestTimeline
    remaining_output: int
    requeues: int = 0
    held_refs: Dict[str, List[int]] = field(default_factory=dict)
    decode_worker: Optional[str] = None
    decode_active: bool = False
    spec_state: Optional[ProposeState] = None
    spec_generated: List[int] = field(default_factory=list)
    spec_model: Optional[CyclicCopyModel] = None


class ClusterSim:
    def __init__(self, trace: Sequence[TraceRecord], config: SimConfig, seed: Optional[int] = None):
        self.config = config
        self.seed = config.seed if seed is None else seed
        self._base_rng = CounterRng(self.seed)
        self._route_rng = self._base_rng.derive("routing")
        self._spec_rng = self._base_rng.derive("speculative")

        topo = config.topology
        self.workers: List[WorkerSim] = []
        if topo.mode == "fusion":
            for i in range(topo.prefill_workers):
                self.workers.append(self._make_worker(f"w{i}", True, True))
        else:
            for i in range(topo.prefill_workers):
                self.workers.append(self._make_worker(f"p{i}", True, False))
            for i in range(topo.decode_workers):
                self.workers.append(self._make_worker(f"d{i}", False, True))
        self.by_id = {w.worker_id: w for w in self.workers}
        self.prefill_pool = [w for w in self.workers if w.prefill_capable]
        self.decode_pool = [w for w in self.workers if w.decode_capable]

        self.cache_map = UnifiedCacheMap()
        self.remote_index = RemoteCacheIndex()
        self.affinity: Dict[str, str] = {}
        self.cached_status: Dict[str, WorkerStatus] = {
            w.worker_id: w.status() for w in self.workers
        }

        self.queue: List[RequestSim] = []
        self.requests: List[RequestSim] = []
        self.unfinished = len(trace)
        self.clock = 0

        self._heap: list = []
        self._seq = 0
        for i, record in enumerate(sorted(trace, key=lambda r: r.arrival_us)):
            self._push(record.arrival_us, EventKind.ARRIVAL, (i, record))
        self._push(0, EventKind.STATUS_SYNC, None)
        self._push(0, EventKind.KEY_SYNC, None)
        self._push(0, EventKind.SCHEDULE_TICK, None)

    # -- plumbing -----------------------------------------------------------

    def _make_worker(self, worker_id: str, prefill: bool, decode: bool) -> WorkerSim:
        return WorkerSim(
            worker_id=worker_id,
            prefill_capable=prefill,
            decode_capable=decode,
            store=TieredCacheStore(self.config.tiers),
        )

    def _push(self, time_us: int, kind: EventKind, payload) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time_us, int(kind), self._seq, payload))

    def _block_bytes(self) -> int:
        return self.config.block_size * self.config.cost.kv_bytes_per_token

    def _tokens_for(self, index: int, record: TraceRecord) -> List[int]:
        vocab = self.config.vocab_size
        toks: List[int] = []
        if record.prefix_group is not None and record.prefix_len > 0:
            g = self._base_rng.derive(f"prefix:{record.prefix_group}")
            n = min(record.prefix_len, record.input_len)
            toks = [g.peek(i) % vocab for i in range(n)]
        u = self._base_rng.derive(f"req:{index}")
        toks += [u.peek(i) % vocab for i in range(record.input_len - len(toks))]
        return toks

    # -- main loop -----------------------------------------------------------

    def run(self) -> MetricsReport:
        while self._heap:
            time_us, kind, _, payload = heapq.heappop(self._heap)
            assert time_us >= self.clock, "event out of time order"
            self.clock = time_us
            kind = EventKind(kind)
            if kind == EventKind.ARRIVAL:
                self._on_arrival(*payload)
            elif kind == EventKind.SCHEDULE_TICK:
                self._on_tick()
            elif kind == EventKind.STATUS_SYNC:
                self._on_status_sync()
            elif kind == EventKind.KEY_SYNC:
                self._on_key_sync()
            elif kind == EventKind.PREFILL_DONE:
                self._on_prefill_done(payload)
            elif kind == EventKind.DECODE_STEP:
                self._on_decode_step(payload)
            elif kind == EventKind.COMPLETE:
                self._on_complete(payload)
        return report(
            [r.timeline for r in self.requests],
            worker_busy_us={w.worker_id: w.busy_us for w in self.workers},
        )

    def _rearm(self, kind: EventKind, period_us: int) -> None:
        if self.unfinished > 0:
            self._push(self.clock + period_us, kind, None)

    # -- event handlers -------------------------------------------------------

    def _on_arrival(self, index: int, record: TraceRecord) -> None:
        tokens = self._tokens_for(index, record)
        hashes = generate_hash_keys(tokens, self.config.block_size)
        request_id = f"r{index:06d}"
        meta = RequestMeta(
            request_id=request_id,
            block_hashes=hashes,
            seq_len=record.input_len,
            arrival_time=record.arrival_us,
            output_budget=record.output_len,
            chat_id=record.chat_id,
            block_size=self.config.block_size,
        )
        req = RequestSim(
            index=index,
            record=record,
            meta=meta,
            tokens=tokens,
            timeline=RequestTimeline(
                request_id=request_id,
                arrival=record.arrival_us,
                input_len=record.input_len,
                output_len=record.output_len,
            ),
            remaining_output=record.output_len,
        )
        self.requests.append(req)
        self.queue.append(req)

    def _on_status_sync(self) -> None:
        for w in self.workers:
            self.cached_status[w.worker_id] = w.status()
        self._rearm(EventKind.STATUS_SYNC, self.config.status_sync_us)

    def _on_key_sync(self) -> None:
        for w in self.workers:
            self._sync_worker_keys(w)
        self._rearm(EventKind.KEY_SYNC, self.config.key_sync_us)

    def _sync_worker_keys(self, w: WorkerSim) -> None:
        version = w.store.mutation_count
        if version == w.last_acked_version:
            return  # lightweight acknowledgment, nothing changed
        current = {
            h: WorkerBlockMeta(e.block_id, e.tier, e.watermark)
            for h, e in w.store.resident_hashes(CacheTier.REMOTE_CPU).items()
        }
        added = [(h, m) for h, m in current.items() if w.last_synced.get(h) != m]
        removed = [h for h in w.last_synced if h not in current]
        self.cache_map.apply_delta(
            WorkerCacheDelta(
                worker_id=w.worker_id,
                from_version=w.last_acked_version,
                to_version=version,
                added=added,
                removed=removed,
            )
        )
        w.last_synced = current
        w.last_acked_version = version

    def _on_tick(self) -> None:
        if self.queue:
            metas = [r.meta for r in self.queue]
            by_id = {r.meta.request_id: r for r in self.queue}
            batches = form_batch(
                metas,
                self.config.topology.effective_dp_size(),
                group_size=self.config.batch_group_size,
                window_cap=self.config.window_cap,
            )
            for batch in batches:
                for meta in batch:
                    self._try_dispatch(by_id[meta.request_id])
        self._rearm(EventKind.SCHEDULE_TICK, self.config.schedule_tick_us)

    def _prefill_statuses(self) -> List[WorkerStatus]:
        return [self.cached_status[w.worker_id] for w in self.prefill_pool]

    def _decode_statuses(self) -> List[WorkerStatus]:
        return [self.cached_status[w.worker_id] for w in self.decode_pool]

    def _try_dispatch(self, req: RequestSim) -> None:
        statuses = self._prefill_statuses()
        try:
            if self.config.routing == "random":
                pool = admitted(
                    statuses, self.config.occupancy_watermark, self.config.queue_depth_cap
                )
                if not pool:
                    raise BackpressureError(req.meta.request_id)
                choice = pool[self._route_rng.randrange(len(pool))]
                assignment = Assignment(
                    request_id=req.meta.request_id,
                    worker_id=choice.worker_id,
                    expected_start=self.clock,
                    reused_blocks_local=0,
                    reused_blocks_remote=0,
                    score=0.0,
                )
            else:
                assignment = schedule_prefill(
                    req.meta,
                    statuses,
                    self.cache_map,
                    self.remote_index,
                    self.config.weights,
                    self.clock,
                    self.config.cost,
                    semantics=self.config.match_semantics,
                    occupancy_watermark=self.config.occupancy_watermark,
                    queue_depth_cap=self.config.queue_depth_cap,
                )
            self._dispatch_prefill(req, self.by_id[assignment.worker_id], assignment)
        except (BackpressureError, CacheThrashError) as exc:
            req.requeues += 1
            if req.requeues > self.config.max_requeues:
                raise CacheThrashError(
                    CacheTier.GPU, self.config.cost.kv_bytes(req.meta.seq_len)
                ) from exc
            return
        self.queue.remove(req)

    def _dispatch_prefill(self, req: RequestSim, worker: WorkerSim, assignment: Assignment) -> None:
        store = worker.store
        start = max(self.clock, worker.busy_until)
        block_bytes = self._block_bytes()
        acquired: List[int] = []
        hit_local = 0
        hit_remote = 0
        fetch_latency = 0
        # Blocks the master credited from the distributed store; a worker
        # only reaches for 3FS when the scheduling decision matched there.
        remote_credit = assignment.reused_blocks_local + assignment.reused_blocks_remote
        try:
            for i, h in enumerate(req.meta.block_hashes):
                tier_before = store.lookup(h)
                if tier_before is None:
                    if (
                        self.config.persist_remote
                        and i < remote_credit
                        and h in self.remote_index
                    ):
                        store.insert(
                            h, CacheTier.DIST_STORE, block_bytes, self.config.block_size, start
                        )
                        tier_before = CacheTier.DIST_STORE
                    else:
                        break
                plan = store.fetch_to_gpu(h, start)
                fetch_latency += plan.latency_us
                if plan.hit_tier == CacheTier.DIST_STORE and not store.config.single_pass_promotion:
                    plan = store.fetch_to_gpu(h, start)
                    fetch_latency += plan.latency_us
                acquired.append(h)
                if tier_before == CacheTier.DIST_STORE:
                    hit_remote += 1
                else:
                    hit_local += 1
            for h in req.meta.block_hashes[hit_local + hit_remote :]:
                if store.lookup(h) is None:
                    store.insert(h, CacheTier.GPU, block_bytes, self.config.block_size, start)
                    store.acquire(h, CacheTier.GPU, start)
                else:
                    # Resident beyond an evicted hole: the recomputed KV
                    # overwrites identical bytes, so reuse the entry but
                    # still count the tokens as computed (the scheduler only
                    # credits the contiguous prefix).
                    store.fetch_to_gpu(h, start)
                acquired.append(h)
                if self.config.persist_remote and h not in self.remote_index:
                    self.remote_index.persist(h, f"3fs/{worker.worker_id}/{h:016x}")
        except CacheThrashError:
            if acquired:
                store.release_and_update(acquired, start)
            raise

        hit_tokens = (hit_local + hit_remote) * self.config.block_size
        compute_tokens = req.meta.seq_len - hit_tokens
        duration = fetch_latency + self.config.cost.prefill_us(
            compute_tokens, worker.running_tokens
        )
        duration = max(1, duration)

        req.held_refs[worker.worker_id] = acquired
        tl = req.timeline
        tl.scheduled = self.clock
        tl.prefill_start = start
        tl.prefill_worker = worker.worker_id
        tl.blocks_total = len(req.meta.block_hashes)
        tl.blocks_hit_local = hit_local
        tl.blocks_hit_remote = hit_remote
        tl.reused_tokens_local = hit_local * self.config.block_size
        tl.reused_tokens_remote = hit_remote * self.config.block_size
        tl.computed_tokens = compute_tokens

        worker.running.append(RunningEntry(req.meta.request_id, start, duration))
        worker.running_tokens += req.meta.seq_len
        worker.busy_until = start + duration
        worker.busy_us += duration
        self._push(start + duration, EventKind.PREFILL_DONE, req)

        # The master saw this decision; fold it into the cached view so the
        # next tick does not dog-pile one worker between status syncs.
        est = predict_prefill(req.meta, 0, self.config.cost)
        self.cached_status[worker.worker_id].running.append(
            RunningEntry(req.meta.request_id, start, est)
        )
        if self.config.publish_immediately:
            self._sync_worker_keys(worker)

    def _on_prefill_done(self, req: RequestSim) -> None:
        worker = self.by_id[req.timeline.prefill_worker]
        worker.running = [e for e in worker.running if e.request_id != req.meta.request_id]
        worker.running_tokens -= req.meta.seq_len

        if req.remaining_output > 0:
            req.timeline.first_token = self.clock
            req.timeline.token_times.append(self.clock)
            req.remaining_output -= 1

        if self.config.topology.mode == "fusion":
            decode_worker = worker
            transfer_us = 0
        else:
            store_refs = req.held_refs.pop(worker.worker_id, [])
            if store_refs:
                worker.store.release_and_update(store_refs, self.clock)
            assignment = route_decode(
                req.meta,
                self.affinity,
                self._decode_statuses(),
                self.clock,
                occupancy_watermark=self.config.occupancy_watermark,
            )
            decode_worker = self.by_id[assignment.worker_id]
            rdma = self.config.tiers.transfers[FetchAction.RDMA_TRANSFER]
            transfer_us = rdma.latency_us(self.config.cost.kv_bytes(req.meta.seq_len))
            self._migrate_kv(req, decode_worker)
        req.decode_worker = decode_worker.worker_id
        req.timeline.decode_worker = decode_worker.worker_id

        if req.remaining_output <= 0:
            self._push(self.clock, EventKind.COMPLETE, req)
            return
        if self.config.speculative.enabled:
            req.spec_state = ProposeState(
                k=self.config.speculative.k,
                ngram_n=self.config.speculative.ngram_n,
                skip_initial=self.config.speculative.skip_initial,
            )
            req.spec_model = CyclicCopyModel(req.tokens, self.config.vocab_size)
            req.spec_generated = []
        if decode_worker.active_decodes == 0:
            decode_worker.busy_mark = self.clock
        decode_worker.active_decodes += 1
        req.decode_active = True
        dur = self._decode_dur(decode_worker)
        self._push(self.clock + transfer_us + dur, EventKind.DECODE_STEP, req)

    def _migrate_kv(self, req: RequestSim, decode_worker: WorkerSim) -> None:
        store = decode_worker.store
        block_bytes = self._block_bytes()
        acquired: List[int] = []
        for h in req.meta.block_hashes:
            if store.lookup(h) is None:
                store.insert(h, CacheTier.GPU, block_bytes, self.config.block_size, self.clock)
                store.acquire(h, CacheTier.GPU, self.clock)
            else:
                store.fetch_to_gpu(h, self.clock)
            acquired.append(h)
        if acquired:
            req.held_refs[decode_worker.worker_id] = acquired

    def _decode_dur(self, worker: WorkerSim) -> int:
        if self.config.speculative.enabled:
            return self.config.cost.spec_iteration_us(worker.active_decodes)
        return self.config.cost.decode_step_us(worker.active_decodes)

    def _on_decode_step(self, req: RequestSim) -> None:
        worker = self.by_id[req.decode_worker]
        if self.config.speculative.enabled:
            emitted = self._spec_iteration(req)
        else:
            emitted = 1
        emitted = min(emitted, req.remaining_output)
        req.timeline.token_times.extend([self.clock] * emitted)
        req.remaining_output -= emitted
        if req.remaining_output > 0:
            dur = self._decode_dur(worker)
            self._push(self.clock + dur, EventKind.DECODE_STEP, req)
        else:
            self._push(self.clock, EventKind.COMPLETE, req)

    def _spec_iteration(self, req: RequestSim) -> int:
        draft, state = propose_ngram(req.tokens, req.spec_generated, req.spec_state)
        dists = score(req.tokens + req.spec_generated, draft.candidates, req.spec_model)
        outcome = verify(
            draft,
            dists,
            self.config.speculative.mode,
            self._spec_rng,
        )
        stream, state = update(req.tokens + req.spec_generated, outcome, state)
        req.spec_generated = stream[len(req.tokens) :]
        req.spec_state = state
        return len(outcome.emitted)

    def _on_complete(self, req: RequestSim) -> None:
        worker = self.by_id[req.decode_worker]
        if req.decode_active:
            worker.active_decodes -= 1
            req.decode_active = False
            if worker.active_decodes == 0:
                worker.busy_us += self.clock - worker.busy_mark
        refs = req.held_refs.pop(worker.worker_id, [])
        if refs:
            worker.store.release_and_update(refs, self.clock)
        # Fusion holds the prefill refs until here; drop any leftovers.
        for wid, refs in list(req.held_refs.items()):
            self.by_id[wid].store.release_and_update(refs, self.clock)
            del req.held_refs[wid]
        req.timeline.completion = self.clock
        self.unfinished -= 1


def run(trace: Sequence[TraceRecord], config: SimConfig, seed: Optional[int] = None) -> MetricsReport:
    """Run the cluster simulation to completion and aggregate metrics."""
    return ClusterSim(trace, config, seed).run()
