import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbadapt.config import ConfigError, ExperimentConfig, FederationConfig


def test_defaults_roundtrip_through_json(tmp_path):
    cfg = ExperimentConfig()
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert ExperimentConfig.load(p) == cfg


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 2**64 - 1),
    rounds=st.integers(0, 100),
    clients=st.integers(1, 10),
    sbs=st.sampled_from(["off", "plain", "constrained"]),
    lr=st.floats(1e-4, 1.0),
    shift=st.floats(0.0, 1.0),
)
def test_roundtrip_property(seed, rounds, clients, sbs, lr, shift):
    d = ExperimentConfig().to_dict()
    d["seed"] = seed
    d["federation"].update(rounds=rounds, num_clients=clients, sbs=sbs, lr=lr)
    d["data"]["task_shift"] = shift
    cfg = ExperimentConfig.from_dict(d)
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg
    assert cfg.to_dict() == json.loads(cfg.to_json())


@pytest.mark.parametrize(
    "patch",
    [
        {"bogus": 1},
        {"federation": {"speed": 2}},
        {"federation": {"sbs": "sometimes"}},
        {"federation": "fast"},
        {"seed": -1},
        {"seed": True},
        {"federation": {"adapter_rank": 16}},
        {"model": {"model_dim": 15}},
    ],
)
def test_invalid_configs(patch):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(patch)


def test_bad_json_and_helpers():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json("{nope")
    assert ExperimentConfig().with_seed(7).seed == 7
    off = FederationConfig().defenses_off()
    assert off.permutation is False and off.sbs == "off"
