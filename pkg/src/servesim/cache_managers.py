"""Master-side cache metadata.

UnifiedCacheMap merges every worker's published block keys into one hash
map so cluster-wide prefix matching is a single pass over the request's
keys, independent of worker count.  Workers feed it version-numbered
deltas; a version gap forces a full resync.

Two match semantics ship:

* ``prefix_match`` credits each worker with the running global prefix
  length at every key it holds, even across its own gaps (a worker can be
  credited with blocks it cannot serve locally).
* ``strict_prefix_match`` credits each worker with its own longest
  contiguous prefix only.

RemoteCacheIndex is the persistent key -> file path map used for the
distributed-storage tier, with a line-based snapshot format suitable for
diffing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .blocks import BlockHashKey, format_key, parse_key
from .errors import ResyncRequiredError, TraceFormatError
from .tiered_cache import CacheTier


@dataclass(frozen=True)
class WorkerBlockMeta:
    """What a worker reports about one cached block."""

    block_id: int
    tier: CacheTier
    watermark: int


@dataclass
class WorkerCacheDelta:
    """Version-chained diff of one worker's published keys."""

    worker_id: str
    from_version: int
    to_version: int
    added: List[Tuple[BlockHashKey, WorkerBlockMeta]] = field(default_factory=list)
    removed: List[BlockHashKey] = field(default_factory=list)

    def __post_init__(self):
        if self.to_version <= self.from_version:
            raise ValueError("to_version must exceed from_version")
        added_keys = {h for h, _ in self.added}
        if added_keys & set(self.removed):
            raise ValueError("added and removed overlap")


@dataclass
class MatchResult:
    per_worker: Dict[str, int]
    global_prefix_len: int


class UnifiedCacheMap:
    """hash -> {worker -> block metadata}, with per-worker versions."""

    def __init__(self):
        self._map: Dict[BlockHashKey, Dict[str, WorkerBlockMeta]] = {}
        self._versions: Dict[str, int] = {}
        # Membership probes made by the matching functions (for work-bound tests).
        self.probe_count = 0

    def __len__(self) -> int:
        return len(self._map)

    def worker_version(self, worker_id: str) -> int:
        return self._versions.get(worker_id, 0)

    def workers(self) -> List[str]:
        """Every worker that has ever synced, sorted."""
        return sorted(self._versions)

    def holders(self, hash_key: BlockHashKey) -> Optional[Dict[str, WorkerBlockMeta]]:
        return self._map.get(hash_key)

    def worker_meta(self, hash_key: BlockHashKey, worker_id: str) -> Optional[WorkerBlockMeta]:
        return self._map.get(hash_key, {}).get(worker_id)

    def _probe(self, hash_key: BlockHashKey) -> Optional[Dict[str, WorkerBlockMeta]]:
        self.probe_count += 1
        return self._map.get(hash_key)

    def apply_delta(self, delta: WorkerCacheDelta) -> None:
        """Apply a worker delta; rejects deltas that do not chain."""
        have = self.worker_version(delta.worker_id)
        if delta.from_version != have:
            raise ResyncRequiredError(delta.worker_id, have, delta.from_version)
        for h in delta.removed:
            holders = self._map.get(h)
            if holders is not None:
                holders.pop(delta.worker_id, None)
                if not holders:
                    del self._map[h]
        for h, meta in delta.added:
            self._map.setdefault(h, {})[delta.worker_id] = meta
        self._versions[delta.worker_id] = delta.to_version

    def apply_snapshot(
        self,
        worker_id: str,
        version: int,
        entries: Dict[BlockHashKey, WorkerBlockMeta],
    ) -> None:
        """Full resync: replace every entry for the worker."""
        stale = [h for h, holders in self._map.items() if worker_id in holders]
        for h in stale:
            holders = self._map[h]
            del holders[worker_id]
            if not holders:
                del self._map[h]
        for h, meta in entries.items():
            self._map.setdefault(h, {})[worker_id] = meta
        self._versions[worker_id] = version

    def entries_for_worker(self, worker_id: str) -> Dict[BlockHashKey, WorkerBlockMeta]:
        return {
            h: holders[worker_id] for h, holders in self._map.items() if worker_id in holders
        }


def prefix_match(hashes: Sequence[BlockHashKey], cache_map: UnifiedCacheMap) -> MatchResult:
    """Single-pass match crediting holders with the running global length.

    Walks the keys in order, increments the global length while the key is
    present anywhere, records max(length) per holding worker and stops at
    the first absent key.  Probe count equals min(global_len + 1, len(H)).
    """
    if len(hashes) == 0:
        raise ValueError("empty hash list")
    lengths: Dict[str, int] = {}
    global_len = 0
    for h in hashes:
        holders = cache_map._probe(h)
        if holders is None:
            break
        global_len += 1
        for worker_id in holders:
            lengths[worker_id] = max(lengths.get(worker_id, 0), global_len)
    return MatchResult(per_worker=lengths, global_prefix_len=global_len)


def strict_prefix_match(hashes: Sequence[BlockHashKey], cache_map: UnifiedCacheMap) -> MatchResult:
    """Per-worker longest contiguous prefix; a gap ends that worker's run."""
    if len(hashes) == 0:
        raise ValueError("empty hash list")
    lengths: Dict[str, int] = {}
    alive: Dict[str, bool] = {}
    for i, h in enumerate(hashes):
        holders = cache_map._probe(h)
        if holders is None:
            break
        if i == 0:
            alive = {w: True for w in holders}
        else:
            alive = {w: True for w in alive if w in holders}
        if not alive:
            break
        for w in alive:
            lengths[w] = i + 1
    best = max(lengths.values(), default=0)
    return MatchResult(per_worker=lengths, global_prefix_len=best)


MATCH_SEMANTICS = {
    "global": prefix_match,
    "strict": strict_prefix_match,
}


class RemoteCacheIndex:
    """Persistent cache key -> file path map for the distributed store."""

    def __init__(self):
        self._paths: Dict[BlockHashKey, str] = {}

    def __len__(self) -> int:
        return len(self._paths)

    def __contains__(self, hash_key: BlockHashKey) -> bool:
        return hash_key in self._paths

    def path(self, hash_key: BlockHashKey) -> Optional[str]:
        return self._paths.get(hash_key)

    def persist(self, hash_key: BlockHashKey, path: str) -> None:
        if not path:
            raise ValueError("path must be non-empty")
        existing = self._paths.get(hash_key)
        if existing is not None and existing != path:
            raise ValueError("path conflict")
        self._paths[hash_key] = path

    def remote_lookup(self, hashes: Sequence[BlockHashKey]) -> int:
        """Longest contiguous prefix of the keys present in the index."""
        if len(hashes) == 0:
            raise ValueError("empty hash list")
        n = 0
        for h in hashes:
            if h not in self._paths:
                break
            n += 1
        return n

    def snapshot(self) -> bytes:
        """Line-delimited `hex-hash <TAB> path`, sorted by hash, UTF-8."""
        lines = [f"{format_key(h)}\t{p}" for h, p in sorted(self._paths.items())]
        return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")

    @classmethod
    def restore(cls, data: bytes) -> "RemoteCacheIndex":
        idx = cls()
        for line_no, raw in enumerate(data.decode("utf-8").splitlines(), start=1):
            if not raw.strip():
                continue
            parts = raw.split("\t")
            if len(parts) != 2:
                raise TraceFormatError(line_no, "expected `hash<TAB>path`")
            try:
                h = parse_key(parts[0])
            except ValueError as exc:
                raise TraceFormatError(line_no, str(exc)) from exc
            idx.persist(h, parts[1])
        return idx


def remote_lookup(hashes: Sequence[BlockHashKey], index: RemoteCacheIndex) -> int:
    return index.remote_lookup(hashes)


def remote_persist(hash_key: BlockHashKey, path: str, index: RemoteCacheIndex) -> None:
    index.persist(hash_key, path)


def remote_snapshot(index: RemoteCacheIndex) -> bytes:
    return index.snapshot()


def load_map_snapshot(lines: Iterable[str]) -> UnifiedCacheMap:
    """Build a UnifiedCacheMap from fixture lines.

    Format per line: `hex-hash<TAB>worker[<TAB>block_id[<TAB>tier[<TAB>watermark]]]`;
    blank lines ignored.  Used by the CLI match harness.
    """
    cache_map = UnifiedCacheMap()
    block_id = 0
    versions: Dict[str, int] = {}
    for line_no, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text:
            continue
        parts = text.split("\t")
        if len(parts) < 2:
            raise TraceFormatError(line_no, "expected `hash<TAB>worker`")
        try:
            h = parse_key(parts[0])
        except ValueError as exc:
            raise TraceFormatError(line_no, str(exc)) from exc
        worker = parts[1]
        try:
            bid = int(parts[2]) if len(parts) > 2 else block_id
            tier = CacheTier[parts[3].upper()] if len(parts) > 3 else CacheTier.GPU
            watermark = int(parts[4]) if len(parts) > 4 else 64
        except (ValueError, KeyError) as exc:
            raise TraceFormatError(line_no, f"bad field: {exc}") from exc
        block_id += 1
        version = versions.get(worker, 0) + 1
        versions[worker] = version
        cache_map.apply_delta(
            WorkerCacheDelta(
                worker_id=worker,
                from_version=version - 1,
                to_version=version,
                added=[(h, WorkerBlockMeta(block_id=bid, tier=tier, watermark=watermark))],
            )
        )
    return cache_map
