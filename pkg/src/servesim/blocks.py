"""Token blocks and chained block hashing.

A request's token stream is cut into fixed-size blocks (64 tokens by
default).  Each complete block gets a 64-bit key chained from the previous
block's key, so key equality implies equality of the *whole* block prefix,
not just of one block.  A trailing partial block never gets a key: it can
never be safely shared and is tracked worker-side through watermarks
instead.

Hash function: FNV-1a over 8-byte little-endian words, seeded for block 0
with CHAIN_SEED.  The constants below are part of the on-disk format
(remote index snapshots store keys in hex); changing them invalidates every
persisted index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Sequence

MASK64 = 0xFFFF_FFFF_FFFF_FFFF

FNV64_OFFSET = 0xCBF2_9CE4_8422_2325
FNV64_PRIME = 0x0000_0100_0000_01B3

# "Previous key" fed to the first block of every stream (golden-ratio word).
CHAIN_SEED = 0x9E37_79B9_7F4A_7C15

DEFAULT_BLOCK_SIZE = 64

TokenId = int
BlockHashKey = int


def _mix_word(h: int, value: int) -> int:
    # FNV-1a over the 8 little-endian bytes of a 64-bit word.
    for _ in range(8):
        h = ((h ^ (value & 0xFF)) * FNV64_PRIME) & MASK64
        value >>= 8
    return h


def block_hash(prev_key: BlockHashKey, tokens: Iterable[TokenId]) -> BlockHashKey:
    """Chained hash of one block given the previous block's key."""
    h = _mix_word(FNV64_OFFSET, prev_key & MASK64)
    for t in tokens:
        h = _mix_word(h, t & MASK64)
    return h


def generate_hash_keys(
    tokens: Sequence[TokenId], block_size: int = DEFAULT_BLOCK_SIZE
) -> List[BlockHashKey]:
    """One key per complete block; trailing partial blocks produce no key.

    Key i is block_hash(key[i-1], block i's tokens), with CHAIN_SEED standing
    in for key[-1], so two streams agree on exactly their longest common
    whole-block prefix (hash collisions aside).
    """
    if len(tokens) == 0:
        raise ValueError("empty request")
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    keys: List[BlockHashKey] = []
    prev = CHAIN_SEED
    for start in range(0, len(tokens) - block_size + 1, block_size):
        prev = block_hash(prev, tokens[start : start + block_size])
        keys.append(prev)
    return keys


def format_key(key: BlockHashKey) -> str:
    return f"{key & MASK64:016x}"


def parse_key(text: str) -> BlockHashKey:
    value = int(text, 16)
    if not 0 <= value <= MASK64:
        raise ValueError(f"hash out of 64-bit range: {text}")
    return value


@dataclass
class TokenBlock:
    """An ordered run of tokens filling at most one block."""

    tokens: List[TokenId]
    block_size: int = DEFAULT_BLOCK_SIZE

    def __post_init__(self):
        if not 1 <= len(self.tokens) <= self.block_size:
            raise ValueError(
                f"block holds 1..{self.block_size} tokens, got {len(self.tokens)}"
            )

    @property
    def full(self) -> bool:
        return len(self.tokens) == self.block_size


@dataclass(frozen=True)
class SampledHashConfig:
    """Grid of in-block positions at which hash entries are published."""

    start_threshold: int = 208
    step: int = 4

    def __post_init__(self):
        if self.start_threshold < 1:
            raise ValueError("start_threshold must be >= 1")
        if self.step < 1:
            raise ValueError("step must be >= 1")


def sampled_hash_positions(n: int, cfg: SampledHashConfig = SampledHashConfig()) -> List[int]:
    """Token positions hashed for a cached run of n tokens.

    Below the start threshold only the full length is hashed.  At or above
    it, entries sit on the grid start, start+step, ... up to n; when n falls
    off the grid, n itself is appended so the fully-filled run stays
    matchable at exact length.
    """
    if n < 1:
        raise ValueError("empty block")
    if n < cfg.start_threshold:
        return [n]
    positions = list(range(cfg.start_threshold, n + 1, cfg.step))
    if positions[-1] != n:
        positions.append(n)
    return positions
