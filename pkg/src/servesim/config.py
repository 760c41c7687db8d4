"""Simulation configuration: schema, defaults, JSON loading.

One JSON file configures a run.  Every field has a default; unknown keys
are rejected with their dotted path so typos fail loudly.  CLI flags
override file values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from .cost import CostModel
from .errors import ConfigError
from .scheduler import ScoreWeights
from .tiered_cache import CacheTier, FetchAction, TierConfig, TransferCost

TOPOLOGY_MODES = ("fusion", "disaggregated")
ROUTING_MODES = ("cache_aware", "random")
MATCH_MODES = ("global", "strict")
SPEC_MODES = ("greedy", "stochastic")


@dataclass
class Topology:
    mode: str = "disaggregated"
    prefill_workers: int = 2
    decode_workers: int = 1
    dp_size: Optional[int] = None  # defaults to prefill worker count

    def effective_dp_size(self) -> int:
        return self.dp_size if self.dp_size is not None else self.prefill_workers


@dataclass
class SpecSettings:
    enabled: bool = False
    k: int = 8
    ngram_n: int = 2
    mode: str = "greedy"
    skip_initial: bool = True


@dataclass
class SimConfig:
    topology: Topology = field(default_factory=Topology)
    tiers: TierConfig = field(default_factory=TierConfig)
    cost: CostModel = field(default_factory=CostModel)
    weights: ScoreWeights = field(default_factory=ScoreWeights)
    speculative: SpecSettings = field(default_factory=SpecSettings)
    match_semantics: str = "global"
    routing: str = "cache_aware"
    status_sync_us: int = 20_000
    key_sync_us: int = 50_000
    schedule_tick_us: int = 1_000
    occupancy_watermark: float = 0.95
    queue_depth_cap: int = 16
    window_cap: int = 64
    batch_group_size: int = 8
    max_requeues: int = 1_000
    block_size: int = 64
    vocab_size: int = 32_000
    publish_immediately: bool = False
    persist_remote: bool = True
    seed: int = 0


def _expect(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def _take(d: Dict[str, Any], path: str, allowed) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(f"{path}.{name}" if path else name, "unknown key")


def _get_num(d, key, path, default, kind=float, positive=False, nonneg=False):
    value = d.get(key, default)
    _expect(isinstance(value, (int, float)) and not isinstance(value, bool), f"{path}.{key}",
            f"expected a number, got {value!r}")
    if kind is int:
        _expect(float(value).is_integer(), f"{path}.{key}", f"expected an integer, got {value!r}")
        value = int(value)
    if positive:
        _expect(value > 0, f"{path}.{key}", "must be positive")
    if nonneg:
        _expect(value >= 0, f"{path}.{key}", "must be >= 0")
    return value


def _get_bool(d, key, path, default):
    value = d.get(key, default)
    _expect(isinstance(value, bool), f"{path}.{key}", f"expected a bool, got {value!r}")
    return value


def _get_choice(d, key, path, default, choices):
    value = d.get(key, default)
    _expect(value in choices, f"{path}.{key}", f"expected one of {list(choices)}, got {value!r}")
    return value


_TIER_KEYS = {t.name.lower(): t for t in CacheTier}
_TRANSFER_KEYS = {
    "load_to_gpu": FetchAction.LOAD_TO_GPU,
    "rdma_transfer": FetchAction.RDMA_TRANSFER,
    "load_from_3fs": FetchAction.LOAD_FROM_3FS,
}


def _build_tiers(d: Dict[str, Any], path: str, block_size: int) -> TierConfig:
    _take(d, path, {"capacities", "transfers", "single_pass_promotion", "writeback_on_evict"})
    base = TierConfig(block_size=block_size)
    caps = dict(base.capacities)
    caps_d = d.get("capacities", {})
    _expect(isinstance(caps_d, dict), f"{path}.capacities", "expected an object")
    _take(caps_d, f"{path}.capacities", _TIER_KEYS)
    for name, tier in _TIER_KEYS.items():
        if name in caps_d:
            value = caps_d[name]
            if value is None:
                caps[tier] = None
            else:
                caps[tier] = _get_num(
                    caps_d, name, f"{path}.capacities", None, kind=int, positive=True
                )
    transfers = dict(base.transfers)
    tr_d = d.get("transfers", {})
    _expect(isinstance(tr_d, dict), f"{path}.transfers", "expected an object")
    _take(tr_d, f"{path}.transfers", _TRANSFER_KEYS)
    for name, action in _TRANSFER_KEYS.items():
        if name in tr_d:
            step = tr_d[name]
            _expect(isinstance(step, dict), f"{path}.transfers.{name}", "expected an object")
            _take(step, f"{path}.transfers.{name}", {"fixed_us", "bytes_per_sec"})
            transfers[action] = TransferCost(
                fixed_us=_get_num(
                    step, "fixed_us", f"{path}.transfers.{name}",
                    transfers[action].fixed_us, kind=int, nonneg=True,
                ),
                bytes_per_sec=_get_num(
                    step, "bytes_per_sec", f"{path}.transfers.{name}",
                    transfers[action].bytes_per_sec, positive=True,
                ),
            )
    return TierConfig(
        capacities=caps,
        transfers=transfers,
        single_pass_promotion=_get_bool(d, "single_pass_promotion", path, True),
        writeback_on_evict=_get_bool(d, "writeback_on_evict", path, False),
        block_size=block_size,
    )


def config_from_dict(data: Dict[str, Any]) -> SimConfig:
    _expect(isinstance(data, dict), "", "config root must be an object")
    _take(
        data,
        "",
        {
            "topology", "tiers", "cost", "weights", "speculative",
            "match_semantics", "routing", "status_sync_us", "key_sync_us",
            "schedule_tick_us", "occupancy_watermark", "queue_depth_cap",
            "window_cap", "batch_group_size", "max_requeues", "block_size",
            "vocab_size", "publish_immediately", "persist_remote", "seed",
        },
    )
    block_size = _get_num(data, "block_size", "", 64, kind=int, positive=True)

    topo_d = data.get("topology", {})
    _expect(isinstance(topo_d, dict), "topology", "expected an object")
    _take(topo_d, "topology", {"mode", "prefill_workers", "decode_workers", "dp_size"})
    topology = Topology(
        mode=_get_choice(topo_d, "mode", "topology", "disaggregated", TOPOLOGY_MODES),
        prefill_workers=_get_num(topo_d, "prefill_workers", "topology", 2, kind=int, positive=True),
        decode_workers=_get_num(topo_d, "decode_workers", "topology", 1, kind=int, positive=True),
        dp_size=(
            None
            if topo_d.get("dp_size") is None
            else _get_num(topo_d, "dp_size", "topology", None, kind=int, positive=True)
        ),
    )

    cost_d = data.get("cost", {})
    _expect(isinstance(cost_d, dict), "cost", "expected an object")
    _take(
        cost_d,
        "cost",
        {
            "prefill_tokens_per_sec", "prefill_overhead_us", "prefill_capacity_tokens",
            "decode_us_per_token", "decode_contention_coeff", "kv_bytes_per_token",
            "spec_draft_us", "spec_score_us",
        },
    )
    cost = CostModel(
        prefill_tokens_per_sec=_get_num(
            cost_d, "prefill_tokens_per_sec", "cost", 100_000.0, positive=True
        ),
        prefill_overhead_us=_get_num(
            cost_d, "prefill_overhead_us", "cost", 1_000, kind=int, nonneg=True
        ),
        prefill_capacity_tokens=_get_num(
            cost_d, "prefill_capacity_tokens", "cost", 16_384, kind=int, positive=True
        ),
        decode_us_per_token=_get_num(
            cost_d, "decode_us_per_token", "cost", 10_000.0, positive=True
        ),
        decode_contention_coeff=_get_num(
            cost_d, "decode_contention_coeff", "cost", 0.1, nonneg=True
        ),
        kv_bytes_per_token=_get_num(
            cost_d, "kv_bytes_per_token", "cost", 1_024, kind=int, positive=True
        ),
        spec_draft_us=_get_num(cost_d, "spec_draft_us", "cost", 200, kind=int, nonneg=True),
        spec_score_us=_get_num(cost_d, "spec_score_us", "cost", 10_000, kind=int, nonneg=True),
    )

    weights_d = data.get("weights", {})
    _expect(isinstance(weights_d, dict), "weights", "expected an object")
    _take(weights_d, "weights", {"alpha", "beta", "gamma"})
    try:
        weights = ScoreWeights(
            alpha=_get_num(weights_d, "alpha", "weights", 1.0, nonneg=True),
            beta=_get_num(weights_d, "beta", "weights", 0.5, nonneg=True),
            gamma=_get_num(weights_d, "gamma", "weights", 0.5, nonneg=True),
        )
    except ValueError as exc:
        raise ConfigError("weights", str(exc)) from exc

    spec_d = data.get("speculative", {})
    _expect(isinstance(spec_d, dict), "speculative", "expected an object")
    _take(spec_d, "speculative", {"enabled", "k", "ngram_n", "mode", "skip_initial"})
    speculative = SpecSettings(
        enabled=_get_bool(spec_d, "enabled", "speculative", False),
        k=_get_num(spec_d, "k", "speculative", 8, kind=int, positive=True),
        ngram_n=_get_num(spec_d, "ngram_n", "speculative", 2, kind=int, positive=True),
        mode=_get_choice(spec_d, "mode", "speculative", "greedy", SPEC_MODES),
        skip_initial=_get_bool(spec_d, "skip_initial", "speculative", True),
    )

    tiers_d = data.get("tiers", {})
    _expect(isinstance(tiers_d, dict), "tiers", "expected an object")
    tiers = _build_tiers(tiers_d, "tiers", block_size)

    watermark = _get_num(data, "occupancy_watermark", "", 0.95, positive=True)
    _expect(watermark <= 1.0, "occupancy_watermark", "must be in (0, 1]")

    return SimConfig(
        topology=topology,
        tiers=tiers,
        cost=cost,
        weights=weights,
        speculative=speculative,
        match_semantics=_get_choice(data, "match_semantics", "", "global", MATCH_MODES),
        routing=_get_choice(data, "routing", "", "cache_aware", ROUTING_MODES),
        status_sync_us=_get_num(data, "status_sync_us", "", 20_000, kind=int, positive=True),
        key_sync_us=_get_num(data, "key_sync_us", "", 50_000, kind=int, positive=True),
        schedule_tick_us=_get_num(data, "schedule_tick_us", "", 1_000, kind=int, positive=True),
        occupancy_watermark=watermark,
        queue_depth_cap=_get_num(data, "queue_depth_cap", "", 16, kind=int, positive=True),
        window_cap=_get_num(data, "window_cap", "", 64, kind=int, positive=True),
        batch_group_size=_get_num(data, "batch_group_size", "", 8, kind=int, positive=True),
        max_requeues=_get_num(data, "max_requeues", "", 1_000, kind=int, positive=True),
        block_size=block_size,
        vocab_size=_get_num(data, "vocab_size", "", 32_000, kind=int, positive=True),
        publish_immediately=_get_bool(data, "publish_immediately", "", False),
        persist_remote=_get_bool(data, "persist_remote", "", True),
        seed=_get_num(data, "seed", "", 0, kind=int, nonneg=True),
    )


def load_config(path: str) -> SimConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"invalid JSON: {exc}") from exc
    return config_from_dict(data)


def default_config() -> SimConfig:
    return config_from_dict({})
