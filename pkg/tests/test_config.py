import pytest

from mcalab.config import apply_overrides, from_dict, load_json, parse_override, to_dict, valid_keys
from mcalab.errors import InvalidConfigError
from mcalab.objectives import MCAConfig
from mcalab.train import TrainConfig


def test_roundtrip_nested():
    cfg = TrainConfig(steps=10, warmup_steps=1)
    assert from_dict(TrainConfig, to_dict(cfg)) == cfg


def test_unknown_key_lists_valid_keys():
    with pytest.raises(InvalidConfigError) as exc:
        from_dict(TrainConfig, {"mca": {"alpah": 1}})
    msg = str(exc.value)
    assert "mca.alpah" in msg and "mca.alpha" in msg


def test_type_errors():
    with pytest.raises(InvalidConfigError, match="steps"):
        from_dict(TrainConfig, {"steps": "many"})
    with pytest.raises(InvalidConfigError):
        from_dict(MCAConfig, {"mcp_bidirectional": 1})


def test_invariant_violation_is_config_error():
    with pytest.raises(InvalidConfigError):
        from_dict(MCAConfig, {"tau": 0})


def test_overrides_parse_json_values():
    assert parse_override("mca.alpha=0.1") == ("mca.alpha", 0.1)
    assert parse_override("mca.mixer=mfb") == ("mca.mixer", "mfb")
    data = apply_overrides(TrainConfig, {}, ["mca.alpha=0", "mca.beta=0", "betas=[0.8,0.9]"])
    cfg = from_dict(TrainConfig, data)
    assert cfg.mca.alpha == 0 and cfg.mca.beta == 0 and cfg.betas == (0.8, 0.9)


def test_override_rejects_unknown_and_malformed():
    with pytest.raises(InvalidConfigError, match="valid keys"):
        apply_overrides(TrainConfig, {}, ["nope=1"])
    with pytest.raises(InvalidConfigError):
        apply_overrides(TrainConfig, {}, ["steps"])


def test_valid_keys_are_dotted():
    keys = valid_keys(TrainConfig)
    assert "mca.tau" in keys and "encoder.d_model" in keys and "mca" not in keys


def test_load_json_errors(tmp_path):
    with pytest.raises(InvalidConfigError, match="not found"):
        load_json(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  oops")
    with pytest.raises(InvalidConfigError, match="line 2"):
        load_json(bad)
