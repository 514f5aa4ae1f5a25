"""Strict run-config parsing."""

import json

import pytest

from tinycd.config import OptimizerConfig, RunConfig
from tinycd.errors import ConfigurationError


def test_defaults_mirror_training_protocol():
    cfg = RunConfig()
    assert cfg.optimizer.lr == pytest.approx(3e-3)
    assert cfg.optimizer.weight_decay == pytest.approx(9e-3)
    assert cfg.optimizer.amsgrad is False
    assert cfg.batch_size == 8
    assert cfg.epochs == 100
    assert cfg.loss == "bce"
    assert cfg.schedule.lr_max == pytest.approx(3e-3)
    assert cfg.schedule.lr_min == 0.0


def test_unknown_top_level_key_rejected():
    with pytest.raises(ConfigurationError, match="learning_rate"):
        RunConfig.from_dict({"learning_rate": 0.1})


def test_unknown_nested_key_has_field_path():
    with pytest.raises(ConfigurationError, match=r"optimizer\.momentum"):
        RunConfig.from_dict({"optimizer": {"momentum": 0.9}})


def test_nested_sections_parse():
    cfg = RunConfig.from_dict(
        {
            "model": {"backbone_widths": [8, 12], "backbone_strides": [2, 2]},
            "optimizer": {"lr": 0.002, "weight_decay": 0.008},
            "schedule": {"lr_min": 0.0001},
            "loss": "mse",
            "epochs": 10,
            "seed": 5,
        }
    )
    assert cfg.model.backbone_widths == (8, 12)
    assert cfg.schedule.lr_max == pytest.approx(0.002)  # defaults to optimizer lr
    assert cfg.schedule.lr_min == pytest.approx(0.0001)
    assert cfg.schedule.total_epochs == 10
    assert cfg.augmentation.seed == 5  # inherits the run seed


def test_invalid_enum_values():
    with pytest.raises(ConfigurationError, match="loss"):
        RunConfig.from_dict({"loss": "dice"})
    with pytest.raises(ConfigurationError, match="precision"):
        RunConfig.from_dict({"precision": "f16"})


def test_roundtrip_through_json(tmp_path):
    cfg = RunConfig.from_dict({"epochs": 3, "seed": 9, "loss": "bce_iou"})
    path = tmp_path / "config.json"
    cfg.save(path)
    again = RunConfig.load(path)
    assert again.to_dict() == cfg.to_dict()


def test_malformed_json_is_a_config_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigurationError, match="JSON"):
        RunConfig.load(path)


def test_optimizer_config_rejects_negatives():
    with pytest.raises(ConfigurationError):
        OptimizerConfig(lr=-1.0)
