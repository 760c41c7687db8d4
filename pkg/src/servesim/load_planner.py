"""File-order-driven model-loading planner.

Shared mode assigns each checkpoint file to exactly one rank (LPT balance
by bytes), reads per rank in manifest order for sequential access, and
broadcasts each file to the other ranks over a single exclusive broadcast
channel.  With overlap enabled a rank reads its next file while its
previous one broadcasts.  Pinned-buffer allocation costs a fixed overhead
per 2 GiB granule: once per rank with shared-buffer reuse, once per file
without.

Baseline mode is structure-driven loading: every rank reads every file,
paying a non-sequential access penalty, and broadcasts nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Dict, List, Tuple

from .cost import Rational, as_fraction, us_round_half_up
from .errors import TraceFormatError

GIB = 2**30
ALLOC_GRANULE_BYTES = 2 * GIB


@dataclass(frozen=True)
class ManifestFile:
    name: str
    size_bytes: int
    tensors: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.size_bytes <= 0:
            raise ValueError(f"file {self.name}: size must be positive")


@dataclass
class FileManifest:
    files: List[ManifestFile]

    def __post_init__(self):
        if not self.files:
            raise ValueError("empty manifest")
        seen = set()
        for f in self.files:
            for t in f.tensors:
                if t in seen:
                    raise ValueError(f"tensor {t} appears in more than one file")
                seen.add(t)

    @property
    def total_bytes(self) -> int:
        return sum(f.size_bytes for f in self.files)

    def to_text(self) -> str:
        lines = ["manifest v1"]
        for f in self.files:
            lines.append(f"{f.name}\t{f.size_bytes}\t{','.join(f.tensors)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FileManifest":
        lines = text.splitlines()
        if not lines or lines[0].strip() != "manifest v1":
            raise TraceFormatError(1, "expected `manifest v1` header")
        files = []
        for line_no, raw in enumerate(lines[1:], start=2):
            if not raw.strip():
                continue
            parts = raw.split("\t")
            if len(parts) < 2:
                raise TraceFormatError(line_no, "expected `name<TAB>size[<TAB>tensors]`")
            try:
                size = int(parts[1])
            except ValueError as exc:
                raise TraceFormatError(line_no, f"bad size: {parts[1]!r}") from exc
            tensors = tuple(t for t in parts[2].split(",") if t) if len(parts) > 2 else ()
            try:
                files.append(ManifestFile(parts[0], size, tensors))
            except ValueError as exc:
                raise TraceFormatError(line_no, str(exc)) from exc
        return cls(files)


@dataclass(frozen=True)
class IoParams:
    read_bytes_per_sec: Rational = 2 * GIB
    broadcast_bytes_per_sec: Rational = 20 * GIB
    pinned_alloc_overhead_us: int = 600_000  # per 2 GiB granule
    shm_reuse: bool = True
    overlap: bool = True
    baseline_nonseq_penalty: Rational = 1.5
    broadcast_multiplier: Rational = 1.0

    def __post_init__(self):
        if as_fraction(self.read_bytes_per_sec) <= 0:
            raise ValueError("read bandwidth must be positive")
        if as_fraction(self.broadcast_bytes_per_sec) <= 0:
            raise ValueError("broadcast bandwidth must be positive")


class LoadAction(Enum):
    READ = "read"
    BROADCAST = "broadcast"
    ALLOC_PINNED = "alloc_pinned"


@dataclass(frozen=True)
class TimelineEntry:
    rank: int
    start_us: int
    end_us: int
    action: LoadAction
    file: str


@dataclass
class LoadSchedule:
    mode: str
    assignments: Dict[int, List[str]]
    timeline: List[TimelineEntry] = field(default_factory=list)
    makespan_us: int = 0

    def to_text(self) -> str:
        lines = [f"loadplan v1 mode={self.mode} makespan_us={self.makespan_us}"]
        for e in sorted(self.timeline, key=lambda e: (e.rank, e.start_us, e.action.value)):
            lines.append(f"{e.rank}\t{e.action.value}\t{e.file}\t{e.start_us}\t{e.end_us}")
        return "\n".join(lines) + "\n"


def _granules(size_bytes: int) -> int:
    return -(-size_bytes // ALLOC_GRANULE_BYTES)


def _read_us(size_bytes: int, p: IoParams) -> int:
    return us_round_half_up(Fraction(size_bytes * 1_000_000) / as_fraction(p.read_bytes_per_sec))


def _bcast_us(size_bytes: int, p: IoParams) -> int:
    per_byte = as_fraction(p.broadcast_multiplier) / as_fraction(p.broadcast_bytes_per_sec)
    return us_round_half_up(Fraction(size_bytes * 1_000_000) * per_byte)


def assign_files(manifest: FileManifest, world_size: int) -> Dict[int, List[str]]:
    """Longest-processing-time greedy balance of file bytes across ranks."""
    if world_size < 1:
        raise ValueError("world_size must be >= 1")
    loads = [0] * world_size
    assignment: Dict[int, List[str]] = {r: [] for r in range(world_size)}
    for f in sorted(manifest.files, key=lambda f: (-f.size_bytes, f.name)):
        rank = min(range(world_size), key=lambda r: (loads[r], r))
        loads[rank] += f.size_bytes
        assignment[rank].append(f.name)
    return assignment


def plan_timeline(
    assignment: Dict[int, List[str]],
    manifest: FileManifest,
    p: IoParams,
    world_size: int,
) -> LoadSchedule:
    """Shared-mode schedule: single-reader files, pipelined global broadcast."""
    by_name = {f.name: f for f in manifest.files}
    rank_of = {name: r for r, names in assignment.items() for name in names}
    missing = [f.name for f in manifest.files if f.name not in rank_of]
    if missing:
        raise ValueError(f"assignment misses files: {missing}")

    timeline: List[TimelineEntry] = []
    io_free = {r: 0 for r in range(world_size)}

    if p.shm_reuse:
        for r in range(world_size):
            names = list(assignment.get(r, ()))
            if not names:
                continue
            granules = max(_granules(by_name[n].size_bytes) for n in names)
            end = granules * p.pinned_alloc_overhead_us
            timeline.append(TimelineEntry(r, 0, end, LoadAction.ALLOC_PINNED, "*"))
            io_free[r] = end

    bcast_free = 0
    for f in manifest.files:  # manifest order: sequential reads, in-order pipeline
        r = rank_of[f.name]
        t = io_free[r]
        if not p.shm_reuse:
            alloc_end = t + _granules(f.size_bytes) * p.pinned_alloc_overhead_us
            timeline.append(TimelineEntry(r, t, alloc_end, LoadAction.ALLOC_PINNED, f.name))
            t = alloc_end
        read_end = t + _read_us(f.size_bytes, p)
        timeline.append(TimelineEntry(r, t, read_end, LoadAction.READ, f.name))
        # Every file is broadcast, world_size 1 included: the transfer stage
        # feeds device placement and is what the next read overlaps with.
        bcast_start = max(read_end, bcast_free)
        bcast_end = bcast_start + _bcast_us(f.size_bytes, p)
        timeline.append(TimelineEntry(r, bcast_start, bcast_end, LoadAction.BROADCAST, f.name))
        bcast_free = bcast_end
        io_free[r] = read_end if p.overlap else bcast_end

    makespan = max((e.end_us for e in timeline), default=0)
    return LoadSchedule(
        mode="shared", assignments=assignment, timeline=timeline, makespan_us=makespan
    )


def baseline_timeline(manifest: FileManifest, p: IoParams, world_size: int) -> LoadSchedule:
    """Structure-driven baseline: every rank reads every file, no broadcast."""
    if world_size < 1:
        raise ValueError("world_size must be >= 1")
    penalty = as_fraction(p.baseline_nonseq_penalty)
    timeline: List[TimelineEntry] = []
    makespan = 0
    for r in range(world_size):
        t = 0
        if p.shm_reuse:
            granules = max(_granules(f.size_bytes) for f in manifest.files)
            end = granules * p.pinned_alloc_overhead_us
            timeline.append(TimelineEntry(r, 0, end, LoadAction.ALLOC_PINNED, "*"))
            t = end
        for f in manifest.files:
            if not p.shm_reuse:
                alloc_end = t + _granules(f.size_bytes) * p.pinned_alloc_overhead_us
                timeline.append(TimelineEntry(r, t, alloc_end, LoadAction.ALLOC_PINNED, f.name))
                t = alloc_end
            read_us = us_round_half_up(
                Fraction(f.size_bytes * 1_000_000) * penalty / as_fraction(p.read_bytes_per_sec)
            )
            timeline.append(TimelineEntry(r, t, t + read_us, LoadAction.READ, f.name))
            t += read_us
        makespan = max(makespan, t)
    assignment = {r: [f.name for f in manifest.files] for r in range(world_size)}
    return LoadSchedule(
        mode="baseline", assignments=assignment, timeline=timeline, makespan_us=makespan
    )


@dataclass(frozen=True)
class StrategyReport:
    fileorder_makespan_us: int
    baseline_makespan_us: int
    speedup: float


def compare_strategies(
    manifest: FileManifest, p: IoParams, world_size: int
) -> StrategyReport:
    shared = plan_timeline(assign_files(manifest, world_size), manifest, p, world_size)
    baseline = baseline_timeline(manifest, p, world_size)
    speedup = (
        baseline.makespan_us / shared.makespan_us if shared.makespan_us else float("inf")
    )
    return StrategyReport(
        fileorder_makespan_us=shared.makespan_us,
        baseline_makespan_us=baseline.makespan_us,
        speedup=speedup,
    )
