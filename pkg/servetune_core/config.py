from __future__ import annotations

import logging
import os
from functools import lru_cache
from pathlib import Path
from typing import Literal, Optional

logger = logging.getLogger(__name__)

BackendKind = Literal["sim", "http"]

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@lru_cache
def get_archive_dir() -> Path:
    """
    Directory receiving one JSON-lines archive per job.

    - SERVETUNE_ARCHIVE_DIR (default: ./archives)
    """
    return Path(os.getenv("SERVETUNE_ARCHIVE_DIR", "./archives"))


@lru_cache
def get_workspace_dir() -> Path:
    """
    Scratch directory for fetched inputs and compressed artifacts.

    - SERVETUNE_WORKSPACE_DIR (default: <archive dir>/workspace)
    """
    raw = os.getenv("SERVETUNE_WORKSPACE_DIR")
    return Path(raw) if raw else get_archive_dir() / "workspace"


@lru_cache
def get_log_level() -> str:
    return os.getenv("SERVETUNE_LOG_LEVEL", "INFO").upper()


@lru_cache
def get_trial_duration() -> float:
    raw = os.getenv("SERVETUNE_TRIAL_DURATION", "60")
    try:
        value = float(raw)
    except ValueError:
        logger.warning("Ignoring non-numeric SERVETUNE_TRIAL_DURATION=%r", raw)
        return 60.0
    return value if value > 0 else 60.0


@lru_cache
def get_backend_kind() -> BackendKind:
    kind = os.getenv("SERVETUNE_BACKEND", "sim").lower()
    if kind not in ("sim", "http"):
        raise ValueError(
            f"Unsupported backend type: {kind}. Supported types: sim, http"
        )
    return kind  # type: ignore[return-value]


@lru_cache
def get_base_url() -> str:
    return os.getenv("SERVETUNE_BASE_URL", "http://localhost:8000/v1")


@lru_cache
def get_model_name() -> str:
    return os.getenv("SERVETUNE_MODEL_NAME", "default")


@lru_cache
def get_api_key() -> Optional[str]:
    return os.getenv("SERVETUNE_API_KEY") or None


def reset_config() -> None:
    """
    Clear cached settings so the next read sees the current environment.
    """
    for getter in (
        get_archive_dir,
        get_workspace_dir,
        get_log_level,
        get_trial_duration,
        get_backend_kind,
        get_base_url,
        get_model_name,
        get_api_key,
    ):
        getter.cache_clear()


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(level=(level or get_log_level()), format=LOG_FORMAT)
