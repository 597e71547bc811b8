"""Experiment configs: round trips, validation, presets, hashing and the cache root."""

import json
from dataclasses import replace
from pathlib import Path

import pytest

from config_manager import (
    CACHE_ENV_VAR, DEFAULT_CACHE_DIR, PRESETS, ConfigManager, ExperimentConfig, apply_preset, config_hash,
)
from data_structures import ProtocolSetting, ProtocolSpec
from validation import ConfigurationError, ConfigValidator


def test_defaults_are_valid():
    cfg = ExperimentConfig()
    assert cfg.validate().is_valid
    assert cfg.model.prompt_length == 40
    assert cfg.model.mask_ratio == 0.15
    assert cfg.optimizer.lr == 2e-4 and cfg.optimizer.weight_decay == 5e-3


def test_dict_round_trip(tiny_experiment):
    cfg = replace(tiny_experiment, split_protocols={"test": ProtocolSpec(ProtocolSetting.RGBDIR_LIMITED, 0.6, 9)})
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert again.protocol_for("test").setting is ProtocolSetting.RGBDIR_LIMITED
    assert again.protocol_for("train") == cfg.protocol


@pytest.mark.parametrize("data,hint", [
    ({"epoch": 3}, "epochs"),
    ({"model": {"prompt_lenght": 8}}, "model.prompt_length"),
    ({"optimizer": {"learning_rate": 0.1}}, None),
])
def test_unknown_keys_rejected(data, hint):
    with pytest.raises(ConfigurationError) as info:
        ExperimentConfig.from_dict(data)
    if hint:
        assert f"Did you mean '{hint}'" in str(info.value)


def test_invalid_protocol_setting():
    with pytest.raises(ConfigurationError, match="Valid settings"):
        ExperimentConfig.from_dict({"protocol": {"setting": "RGB_ONLY", "alpha": 0.1}})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"split_protocols": {"val": {"setting": "RGBD_MISS_D", "alpha": 0.1}}})


@pytest.mark.parametrize("changes", [
    {"epochs": 0},
    {"threshold_rule": "far"},
    {"eval_mode": "both"},
    {"select": "median"},
    {"dtype": "float16"},
    {"bpcer_target": 0.0},
])
def test_validate_rejects(changes):
    assert not replace(ExperimentConfig(), **changes).validate().is_valid


def test_validate_model_ranges():
    base = ExperimentConfig().model
    for changes in ({"prompt_length": 7}, {"mask_ratio": 0.34}, {"cd_intensity": 1.2}, {"expand_mode": "tile"},
                    {"mmr_weight": -0.1}, {"num_heads": 5}):
        assert not ConfigValidator.validate_model_config(replace(base, **changes)).is_valid, changes


def test_directory_source_needs_paths():
    cfg = ExperimentConfig.from_dict({"dataset": {"source": "directory"}})
    result = cfg.validate()
    assert not result.is_valid and "manifest" in result.error_message


def test_parse_helpers():
    assert ConfigValidator.parse_alpha_range("0:1:0.25").value == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert ConfigValidator.parse_alpha_range("0:1:0.1").value[3] == 0.3
    assert ConfigValidator.parse_alpha_range("0.2,0.7").value == [0.2, 0.7]
    assert not ConfigValidator.parse_alpha_range("0:2:1").is_valid
    assert not ConfigValidator.parse_alpha_range("a,b").is_valid
    assert ConfigValidator.parse_int_list("0,1, 2").value == [0, 1, 2]
    assert not ConfigValidator.parse_int_list("x").is_valid


def test_config_hash_ignores_locations():
    cfg = ExperimentConfig()
    assert config_hash(cfg) == config_hash(replace(cfg, output_dir="elsewhere", cache_dir="/tmp/c"))
    assert config_hash(cfg) != config_hash(replace(cfg, seed=1))
    assert config_hash(cfg) != config_hash(replace(cfg, model=replace(cfg.model, cd_intensity=0.7)))


def test_presets():
    cfg = ExperimentConfig()
    vit = apply_preset(cfg, "vit")
    assert vit.model.prompt_length == 0 and not vit.use_mmr and vit.variant == "vit"
    prompt = apply_preset(cfg, "prompt")
    assert prompt.model.contextual_count == 0 and prompt.model.vanilla_count == 20
    assert apply_preset(cfg, "no_stop_gradient").mmr_stop_gradient is False
    assert apply_preset(cfg, "finetune_last_block").finetune_last_block
    assert apply_preset(cfg, "contextual").model.residual_context is False
    for name in PRESETS:
        assert apply_preset(cfg, name).validate().is_valid
    with pytest.raises(ConfigurationError):
        apply_preset(cfg, "ful")


def test_load_and_save(tmp_path):
    manager = ConfigManager(tmp_path)
    cfg = replace(ExperimentConfig(), epochs=5, variant="prompt")
    path = manager.save(cfg, tmp_path / "exp.json")
    assert manager.load(path) == cfg
    assert manager.load("exp.json") == cfg
    assert manager.load(None) == ExperimentConfig()


def test_load_errors(tmp_path):
    manager = ConfigManager(tmp_path)
    with pytest.raises(ConfigurationError, match="not found"):
        manager.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigurationError, match="not valid JSON"):
        manager.load(bad)
    invalid = tmp_path / "invalid.json"
    invalid.write_text(json.dumps({"epochs": -1}), encoding="utf-8")
    with pytest.raises(ConfigurationError):
        manager.load(invalid)


def test_cache_root_priority(tmp_path, monkeypatch):
    manager = ConfigManager(tmp_path)
    monkeypatch.delenv(CACHE_ENV_VAR, raising=False)
    assert manager.cache_root() == tmp_path / DEFAULT_CACHE_DIR
    cfg = replace(ExperimentConfig(), cache_dir=str(tmp_path / "from_config"))
    assert manager.cache_root(cfg) == tmp_path / "from_config"
    monkeypatch.setenv(CACHE_ENV_VAR, str(tmp_path / "from_env"))
    assert manager.cache_root(cfg) == Path(tmp_path / "from_env")
    assert manager.check_configuration(cfg)["cache_source"] == f"{CACHE_ENV_VAR} environment variable"


def test_print_configuration_status(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv(CACHE_ENV_VAR, raising=False)
    ConfigManager(tmp_path).print_configuration_status(ExperimentConfig())
    out = capsys.readouterr().out
    assert "Configuration Status" in out
    assert "seeded random backbone" in out
