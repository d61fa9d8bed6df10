from __future__ import annotations

import logging
from functools import lru_cache
from typing import Any, Callable, Mapping, Optional

from servetune_core.backends.base import InferenceBackend
from servetune_core.backends.http import EndpointConfig, HttpBackend
from servetune_core.backends.sim import SimBackend, SimServerModel
from servetune_core.config import (
    get_api_key,
    get_backend_kind,
    get_base_url,
    get_model_name,
    reset_config,
)
from servetune_core.flows.base import FlowContext
from servetune_core.models import RuntimeConfig

logger = logging.getLogger(__name__)

BackendFactory = Callable[[RuntimeConfig], InferenceBackend]


@lru_cache
def get_flow_context() -> FlowContext:
    """
    Flow context rooted at the configured archive and workspace directories.

    - SERVETUNE_ARCHIVE_DIR
    - SERVETUNE_WORKSPACE_DIR
    """
    return FlowContext.from_env()


@lru_cache
def get_endpoint_config() -> EndpointConfig:
    """
    Live endpoint used when SERVETUNE_BACKEND=http.

    - SERVETUNE_BASE_URL (default: http://localhost:8000/v1)
    - SERVETUNE_MODEL_NAME (default: default)
    - SERVETUNE_API_KEY (optional)
    """
    cfg = EndpointConfig(
        base_url=get_base_url(), model_name=get_model_name(), api_key=get_api_key()
    )
    logger.info("Using live endpoint %s (%s)", cfg.root, cfg.model_name)
    return cfg


def build_backend_factory(
    kind: Optional[str] = None, sim: Optional[Mapping[str, Any]] = None
) -> BackendFactory:
    """
    Backend per runtime config for standalone sweeps and tuning.

    The live backend talks to an externally managed server, so the runtime
    config only applies to the simulator.
    """
    kind = (kind or get_backend_kind()).lower()
    if kind == "sim":
        params = dict(sim or {})
        return lambda config: SimBackend(SimServerModel.from_mapping(params, config))
    elif kind == "http":
        endpoint = get_endpoint_config()
        return lambda _config: HttpBackend(endpoint)
    raise ValueError(f"Unsupported backend type: {kind}. Supported types: sim, http")


def reset_deps() -> None:
    """
    Drop cached settings and contexts, e.g. after changing the environment in tests.
    """
    reset_config()
    get_flow_context.cache_clear()
    get_endpoint_config.cache_clear()
    logger.info("Dependency caches cleared")
