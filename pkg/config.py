"""Configuration management for dimemo.

This module handles loading and validating ``DIMEMO_*`` environment variables
using Pydantic settings.
"""

from typing import Literal, Optional

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

__version__ = "1.0.0"


class ConfigError(Exception):
    """Raised when configuration is invalid."""
    pass


class AppConfig(BaseSettings):
    """Toolkit settings shared by every command."""

    # Compute settings
    precision: Literal["f64", "f32"] = Field("f64", description="Inference precision (training always runs in f64)")
    jobs: int = Field(1, ge=1, description="Worker threads for per-conversation parallelism")

    # Resource settings
    lexicon_dir: Optional[str] = Field(None, description="Directory overriding the shipped orality lexica")

    # Logging settings
    log_level: str = Field("INFO", description="Logging level (DEBUG, INFO, WARNING, ERROR)")
    log_to_file: bool = Field(False, description="Enable logging to file")
    log_file_path: str = Field("logs/dimemo.log", description="Log file path")
    log_rotation_enabled: bool = Field(True, description="Enable log rotation")
    log_max_file_size_mb: int = Field(10, ge=1, description="Maximum log file size in MB")
    log_backup_count: int = Field(7, ge=0, description="Number of log backup files to keep")

    model_config = SettingsConfigDict(env_prefix="DIMEMO_", env_file=".env", env_file_encoding="utf-8")


# Global config instance
_config: Optional[AppConfig] = None


def get_config() -> AppConfig:
    """Get the global configuration instance.

    Returns:
        AppConfig: The loaded configuration.

    Raises:
        ConfigError: If configuration loading fails.
    """
    global _config
    if _config is None:
        try:
            _config = AppConfig()
        except ValidationError as e:
            raise ConfigError(f"Configuration validation failed: {e}")
    return _config


def load_config() -> AppConfig:
    """Load and validate configuration from environment.

    Returns:
        AppConfig: The validated configuration.

    Raises:
        ConfigError: If variables are invalid.
    """
    return get_config()


def reset_config() -> None:
    """Reset the global configuration instance. For testing purposes."""
    global _config
    _config = None
