from __future__ import annotations

import json

import pytest

from servesim.config import config_from_dict, default_config, load_config
from servesim.errors import ConfigError
from servesim.tiered_cache import CacheTier, FetchAction


def test_defaults_materialize():
    cfg = default_config()
    assert cfg.topology.mode == "disaggregated"
    assert cfg.block_size == 64
    assert cfg.status_sync_us == 20_000
    assert cfg.key_sync_us == 50_000
    assert cfg.weights.alpha == 1.0
    assert cfg.tiers.capacities[CacheTier.DIST_STORE] is None


def test_unknown_root_key_names_field():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"topolgy": {}})
    assert exc.value.field == "topolgy"


def test_unknown_nested_key_names_path():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"topology": {"workerz": 3}})
    assert exc.value.field == "topology.workerz"

    with pytest.raises(ConfigError) as exc:
        config_from_dict({"tiers": {"transfers": {"rdma_transfer": {"speed": 1}}}})
    assert exc.value.field == "tiers.transfers.rdma_transfer.speed"


def test_type_errors_are_descriptive():
    with pytest.raises(ConfigError, match="cost.prefill_overhead_us"):
        config_from_dict({"cost": {"prefill_overhead_us": "fast"}})
    with pytest.raises(ConfigError, match="routing"):
        config_from_dict({"routing": "round_robin"})
    with pytest.raises(ConfigError, match="occupancy_watermark"):
        config_from_dict({"occupancy_watermark": 1.5})


def test_weight_validation_surfaces_as_config_error():
    with pytest.raises(ConfigError, match="weights"):
        config_from_dict({"weights": {"alpha": 0.0, "beta": 0.0, "gamma": 0.0}})


def test_tier_overrides_apply():
    cfg = config_from_dict(
        {
            "tiers": {
                "capacities": {"gpu": 1234, "dist_store": None},
                "transfers": {"load_from_3fs": {"fixed_us": 9, "bytes_per_sec": 10}},
                "single_pass_promotion": False,
            }
        }
    )
    assert cfg.tiers.capacities[CacheTier.GPU] == 1234
    assert cfg.tiers.transfers[FetchAction.LOAD_FROM_3FS].fixed_us == 9
    assert cfg.tiers.single_pass_promotion is False
    # untouched entries keep defaults
    assert cfg.tiers.capacities[CacheTier.LOCAL_CPU] > 0


def test_load_config_round_trip(tmp_path):
    path = tmp_path / "sim.json"
    path.write_text(json.dumps({"seed": 42, "topology": {"prefill_workers": 3}}))
    cfg = load_config(str(path))
    assert cfg.seed == 42
    assert cfg.topology.prefill_workers == 3
    assert cfg.topology.effective_dp_size() == 3


def test_invalid_json_is_config_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_bool_fields_checked():
    with pytest.raises(ConfigError, match="persist_remote"):
        config_from_dict({"persist_remote": "yes"})


def test_speculative_block():
    cfg = config_from_dict({"speculative": {"enabled": True, "k": 4, "mode": "stochastic"}})
    assert cfg.speculative.enabled and cfg.speculative.k == 4
    with pytest.raises(ConfigError, match="speculative.mode"):
        config_from_dict({"speculative": {"mode": "argmax"}})
