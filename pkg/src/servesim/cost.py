"""Analytic cost model and exact microsecond arithmetic.

All simulated durations are integer microseconds.  Model parameters may be
given as floats in config files; they are converted exactly to rationals
(Fraction.from_float) so every duration is a deterministic function of the
inputs, independent of platform math libraries.  Rounding is half-up to
1 microsecond.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Union

Rational = Union[int, float, Fraction]


def as_fraction(x: Rational) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction.from_float(x)


def us_round_half_up(x: Fraction) -> int:
    """Round a nonnegative rational duration to whole microseconds, half-up."""
    return int(x + Fraction(1, 2))


@dataclass(frozen=True)
class CostModel:
    """Scalar execution-cost parameters for prefill, decode and KV sizing."""

    prefill_tokens_per_sec: float = 100_000.0
    prefill_overhead_us: int = 1_000
    prefill_capacity_tokens: int = 16_384
    decode_us_per_token: float = 10_000.0
    decode_contention_coeff: float = 0.1
    kv_bytes_per_token: int = 1_024
    spec_draft_us: int = 200
    spec_score_us: int = 10_000

    def __post_init__(self):
        if self.prefill_tokens_per_sec <= 0 or self.decode_us_per_token <= 0:
            raise ValueError("rates must be positive")
        if self.prefill_capacity_tokens <= 0 or self.kv_bytes_per_token <= 0:
            raise ValueError("capacities must be positive")

    def prefill_us(self, seq_tokens: int, batch_tokens: int = 0) -> int:
        """(overhead + tokens/rate) scaled by 1 + batch_tokens/capacity.

        Strictly increasing in seq_tokens; never below 1 us.
        """
        base = Fraction(self.prefill_overhead_us) + Fraction(seq_tokens * 1_000_000) / as_fraction(
            self.prefill_tokens_per_sec
        )
        factor = 1 + Fraction(batch_tokens, self.prefill_capacity_tokens)
        return max(1, us_round_half_up(base * factor))

    def decode_step_us(self, concurrent: int = 1) -> int:
        """Per-token decode cost under `concurrent` active decode streams."""
        factor = 1 + as_fraction(self.decode_contention_coeff) * max(0, concurrent - 1)
        return max(1, us_round_half_up(as_fraction(self.decode_us_per_token) * factor))

    def spec_iteration_us(self, concurrent: int = 1) -> int:
        """Draft plus parallel-score cost of one speculative iteration."""
        factor = 1 + as_fraction(self.decode_contention_coeff) * max(0, concurrent - 1)
        score = as_fraction(self.spec_score_us) * factor
        return max(1, us_round_half_up(Fraction(self.spec_draft_us) + score))

    def kv_bytes(self, tokens: int) -> int:
        return tokens * self.kv_bytes_per_token
