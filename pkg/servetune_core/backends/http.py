from __future__ import annotations

import asyncio
import logging
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass
from typing import Any, AsyncIterator, Dict, Optional, Sequence

import httpx
import orjson

from servetune_core.backends.base import SyntheticRequest
from servetune_core.errors import BackendUnavailable, InvalidParameter
from servetune_core.models import RequestRecord, RequestStatus

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EndpointConfig:
    """
    An OpenAI-compatible server, e.g. vLLM at ``http://host:8000/v1``.
    """

    base_url: str
    model_name: str
    api_key: Optional[str] = None
    timeout: float = 60.0
    max_connections: int = 256

    def __post_init__(self) -> None:
        if not self.base_url.strip():
            raise InvalidParameter("base_url must be non-empty")
        if not self.timeout > 0:
            raise InvalidParameter(f"timeout must be > 0, got {self.timeout}")
        if self.max_connections < 1:
            raise InvalidParameter("max_connections must be >= 1")

    @property
    def root(self) -> str:
        return self.base_url.rstrip("/")

    def headers(self) -> Dict[str, str]:
        if self.api_key:
            return {"Authorization": f"Bearer {self.api_key}"}
        return {}


def render_prompt(prompt_tokens: Sequence[int]) -> str:
    """Token ids as space-separated integers; content is irrelevant to timing."""
    return " ".join(str(t) for t in prompt_tokens)


def _chat_payload(cfg: EndpointConfig, prompt_tokens: Sequence[int], max_tokens: int) -> Dict[str, Any]:
    return {
        "model": cfg.model_name,
        "messages": [{"role": "user", "content": render_prompt(prompt_tokens)}],
        "max_tokens": max_tokens,
        "stream": True,
        "stream_options": {"include_usage": True},
    }


async def send_request(
    client: httpx.AsyncClient,
    cfg: EndpointConfig,
    request: SyntheticRequest,
    origin: float,
) -> RequestRecord:
    """
    Stream one chat completion and time it against ``origin``.

    First token: first chunk carrying content. Completion: end of stream.
    Token count comes from the final usage chunk when present, else the
    number of content chunks. Non-2xx maps to ERROR, a stalled stream to
    TIMEOUT. Never retried.
    """
    arrival = request.arrival_ts
    first_token: Optional[float] = None
    chunks = 0
    usage_tokens: Optional[int] = None
    payload = _chat_payload(cfg, request.prompt_tokens, request.output_len)

    def failed(status: RequestStatus) -> RequestRecord:
        return RequestRecord(request_id=request.request_id, arrival_ts=arrival, status=status)

    try:
        async with client.stream(
            "POST",
            f"{cfg.root}/chat/completions",
            content=orjson.dumps(payload),
            headers={"Content-Type": "application/json", **cfg.headers()},
        ) as resp:
            if resp.status_code // 100 != 2:
                await resp.aread()
                logger.debug("Request %d failed: HTTP %d", request.request_id, resp.status_code)
                return failed(RequestStatus.ERROR)

            async for line in resp.aiter_lines():
                if not line.startswith("data:"):
                    continue
                data = line[len("data:"):].strip()
                if data == "[DONE]":
                    break
                try:
                    event = orjson.loads(data)
                except orjson.JSONDecodeError:
                    continue
                usage = event.get("usage") or {}
                if usage.get("completion_tokens") is not None:
                    usage_tokens = int(usage["completion_tokens"])
                for choice in event.get("choices") or ():
                    delta = choice.get("delta") or {}
                    if delta.get("content"):
                        chunks += 1
                        if first_token is None:
                            first_token = time.perf_counter() - origin
            completion = time.perf_counter() - origin
    except httpx.TimeoutException:
        return failed(RequestStatus.TIMEOUT)
    except httpx.HTTPError as e:
        logger.debug("Request %d failed: %s", request.request_id, e)
        return failed(RequestStatus.ERROR)

    tokens = usage_tokens if usage_tokens else chunks
    if first_token is None or tokens < 1:
        return failed(RequestStatus.ERROR)
    return RequestRecord(
        request_id=request.request_id,
        arrival_ts=arrival,
        first_token_ts=max(arrival, first_token),
        completion_ts=max(first_token, completion),
        output_tokens=tokens,
        status=RequestStatus.OK,
    )


class HttpSession:
    def __init__(self, client: httpx.AsyncClient, cfg: EndpointConfig) -> None:
        self.client = client
        self.cfg = cfg

    async def send(self, request: SyntheticRequest, origin: float) -> RequestRecord:
        return await send_request(self.client, self.cfg, request, origin)


class HttpBackend:
    """
    Real-clock backend for an externally managed OpenAI-compatible server.

    ``transport`` lets tests mount an in-process server.
    """

    virtual_clock = False

    def __init__(
        self,
        cfg: EndpointConfig,
        *,
        transport: Optional[httpx.AsyncBaseTransport] = None,
    ) -> None:
        self.cfg = cfg
        self.transport = transport

    def _client(self) -> httpx.AsyncClient:
        limits = httpx.Limits(
            max_connections=self.cfg.max_connections,
            max_keepalive_connections=self.cfg.max_connections,
        )
        return httpx.AsyncClient(
            timeout=httpx.Timeout(self.cfg.timeout),
            limits=limits,
            transport=self.transport,
        )

    @asynccontextmanager
    async def connect(self) -> AsyncIterator[HttpSession]:
        async with self._client() as client:
            yield HttpSession(client, self.cfg)

    async def check_models(self) -> None:
        url = f"{self.cfg.root}/models"
        try:
            async with self._client() as client:
                resp = await client.get(url, headers=self.cfg.headers())
        except httpx.HTTPError as e:
            raise BackendUnavailable(f"cannot reach {url}: {e}") from e
        if resp.status_code // 100 != 2:
            raise BackendUnavailable(f"health check {url} returned HTTP {resp.status_code}")
        logger.info("Health check passed: %s serving %s", self.cfg.root, self.cfg.model_name)

    def health_check(self) -> None:
        asyncio.run(self.check_models())
