from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import field_validator
from pathlib import Path

BASE_DIR = Path(__file__).resolve().parent.parent
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def _default_data_dir() -> str:
    return str(BASE_DIR / "data")


class Settings(BaseSettings):
    # --- REPRODUCIBILITY ---
    RANKMERGE_SEED: int = 0
    RANKMERGE_JOBS: int = 1

    # --- OUTPUT ---
    DATA_DIR: str = _default_data_dir()
    LOG_LEVEL: str = "INFO"

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

    @field_validator("DATA_DIR", mode="before")
    @classmethod
    def _default_data_dir(cls, v):
        # An empty DATA_DIR in .env falls back to the repo-local default
        if v is None or (isinstance(v, str) and v.strip() == ""):
            return _default_data_dir()
        return v

    @field_validator("RANKMERGE_SEED")
    @classmethod
    def _non_negative_seed(cls, v):
        if v < 0:
            raise ValueError("seed must be non-negative")
        return v

    @field_validator("RANKMERGE_JOBS")
    @classmethod
    def _positive_jobs(cls, v):
        if v < 1:
            raise ValueError("at least one worker is required")
        return v

    @field_validator("LOG_LEVEL")
    @classmethod
    def _known_level(cls, v):
        level = v.strip().upper()
        if level not in LOG_LEVELS:
            raise ValueError(f"LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}, got {v!r}")
        return level


settings = Settings()
