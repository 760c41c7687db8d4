"""Four-tier hierarchical KV block cache with LRU eviction.

Tier order by access cost: GPU < local CPU < remote CPU < distributed
store.  Fetching promotes a block tier-by-tier toward the GPU, leaving a
copy at each tier it passes through (fill-on-promote); demotion happens
only through eviction.  Full blocks are reference-counted and shareable;
partially-filled blocks (watermark below block size) are exclusive.

Eviction is LRU over unreferenced entries, ties broken by ascending block
id for deterministic replay.  A lazy heap per tier keeps eviction
O(log n): every transition to the unreferenced state (and every recency
touch while unreferenced) pushes a candidate tuple, and stale tuples are
discarded when popped.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

from .blocks import DEFAULT_BLOCK_SIZE, BlockHashKey
from .cost import Rational, as_fraction, us_round_half_up
from .errors import CacheThrashError


class CacheTier(IntEnum):
    GPU = 0
    LOCAL_CPU = 1
    REMOTE_CPU = 2
    DIST_STORE = 3


class FetchAction(Enum):
    UPDATE_REF = "update_ref"
    LOAD_TO_GPU = "load_to_gpu"
    RDMA_TRANSFER = "rdma_transfer"
    LOAD_FROM_3FS = "load_from_3fs"


# Promotion step arriving at each tier (the step that fills it from below).
_STEP_INTO: Dict[CacheTier, FetchAction] = {
    CacheTier.GPU: FetchAction.LOAD_TO_GPU,
    CacheTier.LOCAL_CPU: FetchAction.RDMA_TRANSFER,
    CacheTier.REMOTE_CPU: FetchAction.LOAD_FROM_3FS,
}


@dataclass(frozen=True)
class TransferCost:
    """Affine latency model for one promotion step: fixed + size/bandwidth."""

    fixed_us: int = 0
    bytes_per_sec: Rational = 10 * 2**30

    def __post_init__(self):
        if self.fixed_us < 0:
            raise ValueError("fixed_us must be >= 0")
        if as_fraction(self.bytes_per_sec) <= 0:
            raise ValueError("bandwidth must be positive")

    def latency_us(self, size_bytes: int) -> int:
        bw = as_fraction(self.bytes_per_sec)
        return us_round_half_up(Fraction(self.fixed_us) + Fraction(size_bytes * 1_000_000) / bw)


@dataclass
class TierConfig:
    """Capacities and step latencies for the tier hierarchy.

    A capacity of None means unbounded (the default for the distributed
    store, which is treated as durable).  `single_pass_promotion` off makes
    a distributed-store hit stop at the remote-CPU tier, requiring a second
    fetch to reach the GPU.  `writeback_on_evict` demotes GPU evictions to
    local CPU when they fit without further eviction.
    """

    capacities: Dict[CacheTier, Optional[int]] = field(
        default_factory=lambda: {
            CacheTier.GPU: 64 * 2**20,
            CacheTier.LOCAL_CPU: 256 * 2**20,
            CacheTier.REMOTE_CPU: 1024 * 2**20,
            CacheTier.DIST_STORE: None,
        }
    )
    transfers: Dict[FetchAction, TransferCost] = field(
        default_factory=lambda: {
            FetchAction.LOAD_TO_GPU: TransferCost(fixed_us=50, bytes_per_sec=20 * 2**30),
            FetchAction.RDMA_TRANSFER: TransferCost(fixed_us=500, bytes_per_sec=5 * 2**30),
            FetchAction.LOAD_FROM_3FS: TransferCost(fixed_us=2_000, bytes_per_sec=1 * 2**30),
        }
    )
    single_pass_promotion: bool = True
    writeback_on_evict: bool = False
    block_size: int = DEFAULT_BLOCK_SIZE

    def __post_init__(self):
        for tier, cap in self.capacities.items():
            if cap is not None and cap <= 0:
                raise ValueError(f"{tier.name} capacity must be positive")


@dataclass
class CacheBlockEntry:
    """Residency record for one block at one tier."""

    hash: BlockHashKey
    block_id: int
    tier: CacheTier
    size_bytes: int
    watermark: int
    ref_count: int = 0
    last_access: int = 0


@dataclass
class FetchPlan:
    actions: List[FetchAction]
    latency_us: int
    hit_tier: Optional[CacheTier]

    @property
    def miss(self) -> bool:
        return self.hit_tier is None


class TieredCacheStore:
    """Single-writer store over the four tiers; resolves fetches by walking
    the hierarchy from the cheapest tier down."""

    def __init__(self, config: Optional[TierConfig] = None):
        self.config = config or TierConfig()
        self._entries: Dict[BlockHashKey, Dict[CacheTier, CacheBlockEntry]] = {}
        self._occupied: Dict[CacheTier, int] = {t: 0 for t in CacheTier}
        self._referenced: Dict[CacheTier, int] = {t: 0 for t in CacheTier}
        self._heaps: Dict[CacheTier, List[Tuple[int, int, BlockHashKey]]] = {
            t: [] for t in CacheTier
        }
        self._next_block_id = 0
        # Bumped on every residency change; serves as the worker cache version.
        self.mutation_count = 0

    # -- introspection ----------------------------------------------------

    def occupied_bytes(self, tier: CacheTier) -> int:
        return self._occupied[tier]

    def referenced_bytes(self, tier: CacheTier) -> int:
        """Bytes pinned by running requests; the rest of the tier is
        reclaimable cache, not load."""
        return self._referenced[tier]

    def capacity(self, tier: CacheTier) -> Optional[int]:
        return self.config.capacities.get(tier)

    def occupancy(self, tier: CacheTier) -> float:
        """Pinned fraction of the tier (the admission-control load signal)."""
        cap = self.capacity(tier)
        if cap is None:
            return 0.0
        return self._referenced[tier] / cap

    def entry(self, hash_key: BlockHashKey, tier: CacheTier) -> Optional[CacheBlockEntry]:
        return self._entries.get(hash_key, {}).get(tier)

    def resident_tiers(self, hash_key: BlockHashKey) -> List[CacheTier]:
        return sorted(self._entries.get(hash_key, {}).keys())

    def resident_hashes(self, max_tier: CacheTier = CacheTier.DIST_STORE):
        """Hashes resident at any tier <= max_tier, with their best entry."""
        out: Dict[BlockHashKey, CacheBlockEntry] = {}
        for h, by_tier in self._entries.items():
            best = min((t for t in by_tier if t <= max_tier), default=None)
            if best is not None:
                out[h] = by_tier[best]
        return out

    def lookup(self, hash_key: BlockHashKey) -> Optional[CacheTier]:
        """Highest (cheapest) tier holding the block, or None on miss."""
        by_tier = self._entries.get(hash_key)
        if not by_tier:
            return None
        return min(by_tier)

    # -- mutation ----------------------------------------------------------

    def insert(
        self,
        hash_key: BlockHashKey,
        tier: CacheTier,
        size_bytes: int,
        watermark: int,
        clock: int,
    ) -> int:
        """Create an unreferenced entry, evicting within the tier if needed."""
        if size_bytes <= 0:
            raise ValueError("size_bytes must be positive")
        if not 0 <= watermark <= self.config.block_size:
            raise ValueError("watermark out of range")
        if self.entry(hash_key, tier) is not None:
            raise ValueError("duplicate insert")
        cap = self.capacity(tier)
        if cap is not None:
            shortfall = self._occupied[tier] + size_bytes - cap
            if shortfall > 0:
                self.evict(tier, shortfall)
        entry = CacheBlockEntry(
            hash=hash_key,
            block_id=self._next_block_id,
            tier=tier,
            size_bytes=size_bytes,
            watermark=watermark,
            ref_count=0,
            last_access=clock,
        )
        self._next_block_id += 1
        self._entries.setdefault(hash_key, {})[tier] = entry
        self._occupied[tier] += size_bytes
        self.mutation_count += 1
        heapq.heappush(self._heaps[tier], (entry.last_access, entry.block_id, hash_key))
        return entry.block_id

    def evict(self, tier: CacheTier, bytes_needed: int) -> List[BlockHashKey]:
        """Drop unreferenced entries, oldest first, until bytes_needed freed.

        Partial progress stands on failure; the error carries the remainder.
        """
        if bytes_needed <= 0:
            raise ValueError("bytes_needed must be positive")
        freed = 0
        evicted: List[BlockHashKey] = []
        heap = self._heaps[tier]
        while freed < bytes_needed:
            while heap:
                last_access, block_id, h = heap[0]
                entry = self.entry(h, tier)
                if (
                    entry is not None
                    and entry.ref_count == 0
                    and entry.last_access == last_access
                    and entry.block_id == block_id
                ):
                    break
                heapq.heappop(heap)  # stale
            if not heap:
                raise CacheThrashError(tier, bytes_needed - freed)
            _, _, victim = heapq.heappop(heap)
            freed += self._drop(victim, tier)
            evicted.append(victim)
        return evicted

    def _drop(self, hash_key: BlockHashKey, tier: CacheTier) -> int:
        entry = self._entries[hash_key].pop(tier)
        if not self._entries[hash_key]:
            del self._entries[hash_key]
        self._occupied[tier] -= entry.size_bytes
        self.mutation_count += 1
        if (
            tier == CacheTier.GPU
            and self.config.writeback_on_evict
            and self.entry(hash_key, CacheTier.LOCAL_CPU) is None
        ):
            # Best-effort demotion: only when it fits without cascading.
            cap = self.capacity(CacheTier.LOCAL_CPU)
            if cap is None or self._occupied[CacheTier.LOCAL_CPU] + entry.size_bytes <= cap:
                self.insert(
                    hash_key,
                    CacheTier.LOCAL_CPU,
                    entry.size_bytes,
                    entry.watermark,
                    entry.last_access,
                )
        return entry.size_bytes

    def fetch_to_gpu(self, hash_key: BlockHashKey, clock: int) -> FetchPlan:
        """Resolve a block for use on the GPU, promoting as needed.

        GPU hit: reference bumped, zero latency.  Lower-tier hit: copies are
        filled tier-by-tier up to the GPU (latency summed per step) and the
        GPU copy is referenced.  Total miss: empty plan, caller recomputes.
        """
        hit = self.lookup(hash_key)
        if hit is None:
            return FetchPlan(actions=[], latency_us=0, hit_tier=None)
        if hit == CacheTier.GPU:
            entry = self.entry(hash_key, CacheTier.GPU)
            self._acquire(entry)
            self._touch(entry, clock)
            return FetchPlan(actions=[FetchAction.UPDATE_REF], latency_us=0, hit_tier=hit)

        source = self.entry(hash_key, hit)
        if source.ref_count > 0 and self._is_partial(source):
            raise ValueError("partial block is exclusive")
        self._touch(source, clock)
        stop_tier = CacheTier.GPU
        if hit == CacheTier.DIST_STORE and not self.config.single_pass_promotion:
            stop_tier = CacheTier.REMOTE_CPU
        actions: List[FetchAction] = []
        latency = 0
        tier = hit
        while tier > stop_tier:
            dest = CacheTier(tier - 1)
            step = _STEP_INTO[dest]
            actions.append(step)
            latency += self.config.transfers[step].latency_us(source.size_bytes)
            if self.entry(hash_key, dest) is None:
                self.insert(hash_key, dest, source.size_bytes, source.watermark, clock)
            else:
                self._touch(self.entry(hash_key, dest), clock)
            tier = dest
        if stop_tier == CacheTier.GPU:
            gpu_entry = self.entry(hash_key, CacheTier.GPU)
            self._acquire(gpu_entry)
            self._touch(gpu_entry, clock)
        return FetchPlan(actions=actions, latency_us=latency, hit_tier=hit)

    def acquire(self, hash_key: BlockHashKey, tier: CacheTier, clock: int) -> None:
        """Reference an already-resident entry (used after insert)."""
        entry = self.entry(hash_key, tier)
        if entry is None:
            raise KeyError(f"no entry for {hash_key:#x} at {tier.name}")
        self._acquire(entry)
        self._touch(entry, clock)

    def release_and_update(self, hashes, clock: int) -> None:
        """Drop one reference per hash and refresh recency on all copies."""
        for h in hashes:
            by_tier = self._entries.get(h, {})
            holder = None
            for tier in sorted(by_tier):
                if by_tier[tier].ref_count > 0:
                    holder = by_tier[tier]
                    break
            if holder is None:
                raise ValueError("double release")
            holder.ref_count -= 1
            if holder.ref_count == 0:
                self._referenced[holder.tier] -= holder.size_bytes
            for entry in by_tier.values():
                self._touch(entry, clock)

    def set_watermark(self, hash_key: BlockHashKey, tier: CacheTier, watermark: int) -> None:
        """Extend a partial block; watermark may only grow."""
        entry = self.entry(hash_key, tier)
        if entry is None:
            raise KeyError(f"no entry for {hash_key:#x} at {tier.name}")
        if not entry.watermark <= watermark <= self.config.block_size:
            raise ValueError("watermark may only grow, up to block_size")
        entry.watermark = watermark

    # -- internals ---------------------------------------------------------

    def _is_partial(self, entry: CacheBlockEntry) -> bool:
        return entry.watermark < self.config.block_size

    def _acquire(self, entry: CacheBlockEntry) -> None:
        if self._is_partial(entry) and entry.ref_count >= 1:
            raise ValueError("partial block is exclusive")
        if entry.ref_count == 0:
            self._referenced[entry.tier] += entry.size_bytes
        entry.ref_count += 1

    def _touch(self, entry: CacheBlockEntry, clock: int) -> None:
        entry.last_access = clock
        if entry.ref_count == 0:
            heapq.heappush(
                self._heaps[entry.tier], (entry.last_access, entry.block_id, entry.hash)
            )
