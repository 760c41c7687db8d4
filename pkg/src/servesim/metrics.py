"""Request timelines and aggregated metrics.

The report distinguishes end-to-end latency (arrival to completion) from
the decode-only span (first token to completion); both are published with
mean and P95 because "inference latency" is read either way in practice.
Percentiles use the nearest-rank method.  Serialization is canonical JSON
(sorted keys) so equal runs produce byte-identical reports.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

REPORT_FORMAT = "report v1"


@dataclass
class RequestTimeline:
    request_id: str
    arrival: int
    input_len: int
    output_len: int
    scheduled: Optional[int] = None
    prefill_start: Optional[int] = None
    first_token: Optional[int] = None
    token_times: List[int] = field(default_factory=list)
    completion: Optional[int] = None
    reused_tokens_local: int = 0
    reused_tokens_remote: int = 0
    computed_tokens: int = 0
    blocks_total: int = 0
    blocks_hit_local: int = 0
    blocks_hit_remote: int = 0
    prefill_worker: Optional[str] = None
    decode_worker: Optional[str] = None

    @property
    def ttft(self) -> Optional[int]:
        if self.first_token is None:
            return None
        return self.first_token - self.arrival

    def check_complete(self) -> None:
        if self.completion is None or self.scheduled is None:
            raise ValueError(f"incomplete timeline: {self.request_id}")
        stamps = [self.arrival, self.scheduled]
        if self.prefill_start is not None:
            stamps.append(self.prefill_start)
        if self.first_token is not None:
            stamps.append(self.first_token)
        stamps.extend(self.token_times)
        stamps.append(self.completion)
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            raise ValueError(f"non-monotone timeline: {self.request_id}")
        if len(self.token_times) != self.output_len:
            raise ValueError(
                f"timeline {self.request_id}: emitted {len(self.token_times)} "
                f"of {self.output_len} tokens"
            )
        reused = self.reused_tokens_local + self.reused_tokens_remote
        if reused + self.computed_tokens != self.input_len:
            raise ValueError(
                f"timeline {self.request_id}: reused {reused} + computed "
                f"{self.computed_tokens} != input {self.input_len}"
            )

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "arrival": self.arrival,
            "input_len": self.input_len,
            "output_len": self.output_len,
            "scheduled": self.scheduled,
            "prefill_start": self.prefill_start,
            "first_token": self.first_token,
            "token_times": self.token_times,
            "completion": self.completion,
            "reused_tokens_local": self.reused_tokens_local,
            "reused_tokens_remote": self.reused_tokens_remote,
            "computed_tokens": self.computed_tokens,
            "blocks_total": self.blocks_total,
            "blocks_hit_local": self.blocks_hit_local,
            "blocks_hit_remote": self.blocks_hit_remote,
            "prefill_worker": self.prefill_worker,
            "decode_worker": self.decode_worker,
        }


def percentile(samples: Sequence, p: float):
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample."""
    if len(samples) == 0:
        raise ValueError("empty samples")
    if not 0 < p <= 100:
        raise ValueError("p must be in (0, 100]")
    rank = math.ceil(p / 100 * len(samples))
    return sorted(samples)[rank - 1]


@dataclass
class MetricsReport:
    n_requests: int
    ttft_mean_us: float
    ttft_p95_us: int
    e2e_mean_us: float
    e2e_p95_us: int
    decode_span_mean_us: float
    decode_span_p95_us: int
    tokens_per_sec: float
    cache_hit_rate_pct: float
    mean_reuse_tokens: float
    mean_reuse_tokens_local: float
    mean_reuse_tokens_remote: float
    worker_utilization: Dict[str, float]
    span_us: int
    timelines: List[RequestTimeline] = field(default_factory=list)

    def to_dict(self, include_timelines: bool = True) -> dict:
        d = {
            "format": REPORT_FORMAT,
            "n_requests": self.n_requests,
            "ttft_mean_us": self.ttft_mean_us,
            "ttft_p95_us": self.ttft_p95_us,
            "e2e_mean_us": self.e2e_mean_us,
            "e2e_p95_us": self.e2e_p95_us,
            "decode_span_mean_us": self.decode_span_mean_us,
            "decode_span_p95_us": self.decode_span_p95_us,
            "tokens_per_sec": self.tokens_per_sec,
            "cache_hit_rate_pct": self.cache_hit_rate_pct,
            "mean_reuse_tokens": self.mean_reuse_tokens,
            "mean_reuse_tokens_local": self.mean_reuse_tokens_local,
            "mean_reuse_tokens_remote": self.mean_reuse_tokens_remote,
            "worker_utilization": self.worker_utilization,
            "span_us": self.span_us,
        }
        if include_timelines:
            d["timelines"] = [t.to_dict() for t in self.timelines]
        return d

    def to_json_bytes(self, include_timelines: bool = True) -> bytes:
        return (
            json.dumps(self.to_dict(include_timelines), sort_keys=True, indent=None) + "\n"
        ).encode("utf-8")

    @classmethod
    def from_json_bytes(cls, data: bytes) -> "MetricsReport":
        d = json.loads(data.decode("utf-8"))
        if d.get("format") != REPORT_FORMAT:
            raise ValueError(f"unknown report format: {d.get('format')!r}")
        timelines = [RequestTimeline(**t) for t in d.get("timelines", [])]
        return cls(
            n_requests=d["n_requests"],
            ttft_mean_us=d["ttft_mean_us"],
            ttft_p95_us=d["ttft_p95_us"],
            e2e_mean_us=d["e2e_mean_us"],
            e2e_p95_us=d["e2e_p95_us"],
            decode_span_mean_us=d["decode_span_mean_us"],
            decode_span_p95_us=d["decode_span_p95_us"],
            tokens_per_sec=d["tokens_per_sec"],
            cache_hit_rate_pct=d["cache_hit_rate_pct"],
            mean_reuse_tokens=d["mean_reuse_tokens"],
            mean_reuse_tokens_local=d["mean_reuse_tokens_local"],
            mean_reuse_tokens_remote=d["mean_reuse_tokens_remote"],
            worker_utilization=d["worker_utilization"],
            span_us=d["span_us"],
            timelines=timelines,
        )

    def to_text(self) -> str:
        rows = [
            ("format", REPORT_FORMAT),
            ("requests", f"{self.n_requests}"),
            ("TTFT mean", f"{self.ttft_mean_us / 1000:.3f} ms"),
            ("TTFT P95", f"{self.ttft_p95_us / 1000:.3f} ms"),
            ("end-to-end mean", f"{self.e2e_mean_us / 1000:.3f} ms"),
            ("end-to-end P95", f"{self.e2e_p95_us / 1000:.3f} ms"),
            ("decode span mean", f"{self.decode_span_mean_us / 1000:.3f} ms"),
            ("decode span P95", f"{self.decode_span_p95_us / 1000:.3f} ms"),
            ("throughput", f"{self.tokens_per_sec:.1f} tokens/s"),
            ("cache hit rate", f"{self.cache_hit_rate_pct:.2f} %"),
            ("mean reuse length", f"{self.mean_reuse_tokens:.1f} tokens"),
            ("  local", f"{self.mean_reuse_tokens_local:.1f} tokens"),
            ("  remote", f"{self.mean_reuse_tokens_remote:.1f} tokens"),
        ]
        for w in sorted(self.worker_utilization):
            rows.append((f"utilization {w}", f"{self.worker_utilization[w] * 100:.1f} %"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def report(
    timelines: Sequence[RequestTimeline],
    worker_busy_us: Optional[Dict[str, int]] = None,
    span_us: Optional[int] = None,
) -> MetricsReport:
    """Aggregate completed timelines; raises on any incomplete one."""
    for t in timelines:
        t.check_complete()
    n = len(timelines)
    ttfts = [t.ttft for t in timelines if t.ttft is not None]
    e2es = [t.completion - t.arrival for t in timelines]
    spans = [t.completion - t.first_token for t in timelines if t.first_token is not None]
    total_tokens = sum(len(t.token_times) for t in timelines)
    if span_us is None:
        if n:
            span_us = max(t.completion for t in timelines) - min(t.arrival for t in timelines)
        else:
            span_us = 0
    blocks_total = sum(t.blocks_total for t in timelines)
    blocks_hit = sum(t.blocks_hit_local + t.blocks_hit_remote for t in timelines)
    worker_busy_us = worker_busy_us or {}
    utilization = {
        w: (busy / span_us if span_us else 0.0) for w, busy in sorted(worker_busy_us.items())
    }
    return MetricsReport(
        n_requests=n,
        ttft_mean_us=(sum(ttfts) / len(ttfts)) if ttfts else 0.0,
        ttft_p95_us=percentile(ttfts, 95) if ttfts else 0,
        e2e_mean_us=(sum(e2es) / len(e2es)) if e2es else 0.0,
        e2e_p95_us=percentile(e2es, 95) if e2es else 0,
        decode_span_mean_us=(sum(spans) / len(spans)) if spans else 0.0,
        decode_span_p95_us=percentile(spans, 95) if spans else 0,
        tokens_per_sec=(total_tokens * 1_000_000 / span_us) if span_us else 0.0,
        cache_hit_rate_pct=(100.0 * blocks_hit / blocks_total) if blocks_total else 0.0,
        mean_reuse_tokens=(
            sum(t.reused_tokens_local + t.reused_tokens_remote for t in timelines) / n
            if n
            else 0.0
        ),
        mean_reuse_tokens_local=(
            sum(t.reused_tokens_local for t in timelines) / n if n else 0.0
        ),
        mean_reuse_tokens_remote=(
            sum(t.reused_tokens_remote for t in timelines) / n if n else 0.0
        ),
        worker_utilization=utilization,
        span_us=span_us,
        timelines=list(timelines),
    )
