"""Trace synthesis and ingestion.

Profiles mirror two production shapes: a Q&A service (inputs 300..1000
tokens averaging ~340, outputs of 6 or 7 tokens) and a merchant customer
service consultation (inputs fixed at 2500 tokens, outputs at 114).
Arrivals are Poisson; a fraction of requests share a group prefix so their
leading block hashes collide, and a fraction belong to multi-turn chats.

Transcendentals (ln, sqrt, exp) go through the decimal module at fixed
precision, which is correctly rounded and platform-independent, so the same
seed yields the same trace bytes everywhere.
"""

from __future__ import annotations

import decimal
from dataclasses import dataclass
from decimal import Decimal
from typing import List, Optional

from .errors import TraceFormatError
from .rng import CounterRng

_CTX = decimal.Context(prec=40)
_CTX_HALF_UP = decimal.Context(prec=40, rounding=decimal.ROUND_HALF_UP)

TRACE_HEADER = "trace v1"


@dataclass(frozen=True)
class TruncLogNormalLaw:
    """offset + lognormal(mu, sigma), redrawn until the value is <= high."""

    low: int
    high: int
    mu: str  # decimal literals so the law itself is platform-exact
    sigma: str

    def draw(self, rng: CounterRng) -> int:
        # every operation goes through the fixed context so an embedder's
        # thread-local decimal context cannot perturb the draw
        mu = Decimal(self.mu)
        sigma = Decimal(self.sigma)
        while True:
            z = _standard_normal(rng)
            exponent = _CTX.add(mu, _CTX.multiply(sigma, z))
            value = self.low + int(_CTX_HALF_UP.to_integral_value(_CTX.exp(exponent)))
            if value <= self.high:
                return max(self.low, value)


@dataclass(frozen=True)
class ChoiceLaw:
    values: tuple

    def draw(self, rng: CounterRng) -> int:
        return self.values[rng.randrange(len(self.values))]


@dataclass(frozen=True)
class ConstLaw:
    value: int

    def draw(self, rng: CounterRng) -> int:
        return self.value


_TWO = Decimal(2)
_ONE = Decimal(1)


def _standard_normal(rng: CounterRng) -> Decimal:
    # Marsaglia polar method: needs only ln and sqrt, both exactly rounded
    # in decimal, so the draw is bit-stable across platforms.
    while True:
        u = _CTX.subtract(_CTX.multiply(Decimal(rng.random()), _TWO), _ONE)
        v = _CTX.subtract(_CTX.multiply(Decimal(rng.random()), _TWO), _ONE)
        s = _CTX.add(_CTX.multiply(u, u), _CTX.multiply(v, v))
        if 0 < s < 1:
            factor = _CTX.sqrt(_CTX.divide(_CTX.multiply(Decimal(-2), _CTX.ln(s)), s))
            return _CTX.multiply(u, factor)


@dataclass(frozen=True)
class WorkloadProfile:
    """Laws for one workload shape.

    Chat turns model conversation continuation: turn t's prompt is turn
    t-1's full prompt plus the answer plus fresh text, drawn from a single
    per-chat token stream, so consecutive turns share a strict token
    prefix.  Standalone requests may instead share a fixed group prefix
    (system prompt / RAG passage).
    """

    name: str
    input_law: object
    output_law: object
    chat_fresh_law: object
    arrival_rate_per_sec: float
    prefix_group_count: int
    prefix_len_tokens: int
    prefix_share_prob: float
    chat_prob: float
    chat_turns_max: int
    max_input_len: int


PROFILES = {
    "qa": WorkloadProfile(
        name="qa",
        # 300 + lognormal; tuned so the all-requests mean lands near 340
        # once multi-turn continuation growth is folded in.
        input_law=TruncLogNormalLaw(low=300, high=1000, mu="3.05", sigma="1.0"),
        output_law=ChoiceLaw(values=(6, 7)),
        chat_fresh_law=TruncLogNormalLaw(low=10, high=250, mu="3.9", sigma="0.6"),
        arrival_rate_per_sec=80.0,
        # Repeat-question traffic: a recurring question's whole prompt is
        # shared, so repeats are all-or-nothing cache hits.
        prefix_group_count=40,
        prefix_len_tokens=1000,
        prefix_share_prob=0.7,
        chat_prob=0.25,
        chat_turns_max=3,
        max_input_len=1000,
    ),
    "merchant": WorkloadProfile(
        name="merchant",
        input_law=ConstLaw(2500),
        output_law=ConstLaw(114),
        chat_fresh_law=ConstLaw(60),
        arrival_rate_per_sec=10.0,
        prefix_group_count=4,
        prefix_len_tokens=832,
        prefix_share_prob=0.9,
        chat_prob=0.0,
        chat_turns_max=1,
        max_input_len=2500,
    ),
}


@dataclass
class TraceRecord:
    arrival_us: int
    input_len: int
    output_len: int
    chat_id: Optional[str] = None
    prefix_group: Optional[str] = None
    prefix_len: int = 0

    def __post_init__(self):
        if self.input_len < 1:
            raise ValueError("input_len must be >= 1")
        if self.output_len < 0:
            raise ValueError("output_len must be >= 0")
        if self.prefix_group is not None and self.input_len < self.prefix_len:
            raise ValueError("input_len shorter than shared prefix")
        if self.prefix_group is None and self.prefix_len != 0:
            raise ValueError("prefix_len without prefix_group")


def resolve_profile(profile) -> WorkloadProfile:
    if isinstance(profile, WorkloadProfile):
        return profile
    if profile not in PROFILES:
        known = ", ".join(sorted(PROFILES))
        raise ValueError(f"unknown profile {profile!r}; known profiles: {known}")
    return PROFILES[profile]


def synth_trace(
    profile,
    n_requests: int,
    seed: int,
    rate_per_sec: Optional[float] = None,
) -> List[TraceRecord]:
    """Deterministic synthetic trace of n_requests under the profile's laws."""
    if n_requests < 1:
        raise ValueError("n_requests must be >= 1")
    prof = resolve_profile(profile)
    rate = Decimal(repr(rate_per_sec if rate_per_sec is not None else prof.arrival_rate_per_sec))
    if rate <= 0:
        raise ValueError("arrival rate must be positive")

    arrivals = CounterRng(seed).derive("arrivals")
    lengths = CounterRng(seed).derive("lengths")
    groups = CounterRng(seed).derive("groups")
    chats = CounterRng(seed).derive("chats")

    mean_us = _CTX.divide(Decimal(1_000_000), rate)
    records: List[TraceRecord] = []
    clock = Decimal(0)
    # open chats: [chat_id, remaining_turns, last_input_len, last_output_len]
    open_chats: List[List] = []
    next_chat = 0
    for _ in range(n_requests):
        u = Decimal(arrivals.random())
        gap = _CTX.multiply(mean_us, _CTX.ln(_CTX.subtract(_ONE, u))).copy_negate()
        clock = _CTX.add(clock, gap)
        arrival_us = int(_CTX_HALF_UP.to_integral_value(clock))

        output_len = prof.output_law.draw(lengths)
        chat_id = None
        group = None
        prefix_len = 0

        continuing = None
        if chats.random() < prof.chat_prob:
            if open_chats and chats.random() < 0.65:
                # recency-biased continuation: conversations resume promptly
                window = min(4, len(open_chats))
                continuing = len(open_chats) - 1 - chats.randrange(window)
            elif prof.chat_turns_max > 1:
                chat_id = f"c{next_chat:05d}"
                next_chat += 1

        if continuing is not None:
            slot = open_chats[continuing]
            chat_id = slot[0]
            fresh = prof.chat_fresh_law.draw(lengths)
            input_len = min(prof.max_input_len, slot[2] + slot[3] + fresh)
            # the whole prompt is the chat's history: a strict extension of
            # the previous turn's tokens
            group = f"chat-{chat_id}"
            prefix_len = input_len
            slot[1] -= 1
            slot[2] = input_len
            slot[3] = output_len
            if slot[1] <= 0 or input_len >= prof.max_input_len:
                open_chats.pop(continuing)
        else:
            input_len = prof.input_law.draw(lengths)
            if chat_id is not None:
                turns = 1 + chats.randrange(prof.chat_turns_max)
                if turns > 1:
                    open_chats.append([chat_id, turns - 1, input_len, output_len])
                # first turn draws from the chat stream so later turns extend it
                group = f"chat-{chat_id}"
                prefix_len = input_len
            elif prof.prefix_group_count > 0 and groups.random() < prof.prefix_share_prob:
                group = f"g{groups.randrange(prof.prefix_group_count):03d}"
                prefix_len = min(prof.prefix_len_tokens, input_len)

        records.append(
            TraceRecord(
                arrival_us=arrival_us,
                input_len=input_len,
                output_len=output_len,
                chat_id=chat_id,
                prefix_group=group,
                prefix_len=prefix_len,
            )
        )
    return records


def write_trace(records: List[TraceRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_trace(records))


def format_trace(records: List[TraceRecord]) -> str:
    lines = [TRACE_HEADER]
    for r in records:
        lines.append(
            "\t".join(
                [
                    str(r.arrival_us),
                    str(r.input_len),
                    str(r.output_len),
                    r.chat_id or "-",
                    r.prefix_group or "-",
                    str(r.prefix_len),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> List[TraceRecord]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != TRACE_HEADER:
        raise TraceFormatError(1, f"expected `{TRACE_HEADER}` header")
    records = []
    for line_no, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 6:
            raise TraceFormatError(line_no, f"expected 6 fields, got {len(parts)}")
        try:
            arrival = int(parts[0])
            input_len = int(parts[1])
            output_len = int(parts[2])
            prefix_len = int(parts[5])
        except ValueError as exc:
            raise TraceFormatError(line_no, f"bad integer field: {exc}") from exc
        if arrival < 0:
            raise TraceFormatError(line_no, "negative arrival_us")
        try:
            records.append(
                TraceRecord(
                    arrival_us=arrival,
                    input_len=input_len,
                    output_len=output_len,
                    chat_id=None if parts[3] == "-" else parts[3],
                    prefix_group=None if parts[4] == "-" else parts[4],
                    prefix_len=prefix_len,
                )
            )
        except ValueError as exc:
            raise TraceFormatError(line_no, str(exc)) from exc
    records.sort(key=lambda r: r.arrival_us)
    return records


def ingest_trace(path: str) -> List[TraceRecord]:
    """Records sorted by arrival; format errors carry line numbers."""
    with open(path, "r", encoding="utf-8") as f:
        return parse_trace(f.read())
