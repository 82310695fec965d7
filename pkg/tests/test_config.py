"""Tests for config module."""

import pytest
from pydantic import ValidationError

from config import AppConfig, ConfigError, get_config, load_config, reset_config


def test_app_config_valid():
    """Test valid AppConfig creation with all fields."""
    config = AppConfig(
        precision="f32",
        jobs=4,
        lexicon_dir="./lexicon",
        log_level="DEBUG",
        log_to_file=True,
        log_file_path="./logs/dimemo.log",
        log_rotation_enabled=False,
        log_max_file_size_mb=5,
        log_backup_count=2
    )
    assert config.precision == "f32"
    assert config.jobs == 4
    assert config.lexicon_dir == "./lexicon"
    assert config.log_level == "DEBUG"
    assert config.log_to_file is True
    assert config.log_file_path == "./logs/dimemo.log"
    assert config.log_rotation_enabled is False
    assert config.log_max_file_size_mb == 5
    assert config.log_backup_count == 2


def test_app_config_defaults(monkeypatch):
    """Test every field has a default so an empty environment works."""
    for var in ["DIMEMO_PRECISION", "DIMEMO_JOBS", "DIMEMO_LOG_LEVEL", "DIMEMO_LOG_TO_FILE"]:
        monkeypatch.delenv(var, raising=False)
    config = AppConfig(_env_file=None)
    assert config.precision == "f64"
    assert config.jobs == 1
    assert config.lexicon_dir is None
    assert config.log_file_path == "logs/dimemo.log"


def test_app_config_invalid():
    """Test invalid AppConfig raises ValidationError."""
    with pytest.raises(ValidationError):
        AppConfig(precision="f16")
    with pytest.raises(ValidationError):
        AppConfig(jobs=0)


def test_precision_from_env(monkeypatch):
    """Test DIMEMO_PRECISION is read through the env prefix."""
    monkeypatch.setenv("DIMEMO_PRECISION", "f32")
    reset_config()
    assert load_config().precision == "f32"


def test_load_config_invalid_env(monkeypatch):
    """Test load_config wraps validation failures in ConfigError."""
    monkeypatch.setenv("DIMEMO_JOBS", "zero")
    reset_config()
    with pytest.raises(ConfigError):
        load_config()


def test_get_config_singleton():
    """Test get_config returns singleton."""
    config1 = get_config()
    config2 = get_config()
    assert config1 is config2
    reset_config()
    assert get_config() is not config1
