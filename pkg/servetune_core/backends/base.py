from __future__ import annotations

from dataclasses import dataclass
from typing import AsyncContextManager, Protocol, Tuple, runtime_checkable

import simpy

from servetune_core.models import RequestRecord


@dataclass(frozen=True)
class SyntheticRequest:
    """
    One request of a trial. ``arrival_ts`` is the scheduled send time relative
    to trial start; ``prompt_tokens`` is only populated for wire backends.
    """

    request_id: int
    arrival_ts: float
    input_len: int
    output_len: int
    prefix_len: int = 0
    prompt_tokens: Tuple[int, ...] = ()


class VirtualSession(Protocol):
    """
    A fresh simulated server bound to its own simpy environment.
    """

    env: simpy.Environment

    def submit(self, request: SyntheticRequest) -> simpy.Event:
        """
        Hand a request to the server at ``env.now``.

        The returned event succeeds with the request's RequestRecord.
        """
        ...

    def cancel(self, request_id: int) -> None:
        """
        Drop a request the client gave up on. Unknown ids are ignored.
        """
        ...


class LiveSession(Protocol):
    async def send(self, request: SyntheticRequest, origin: float) -> RequestRecord:
        """
        Issue one request and time it against ``origin`` (a perf_counter value).
        """
        ...


@runtime_checkable
class InferenceBackend(Protocol):
    """
    Anything the load generator can drive.

    Virtual-clock backends (``virtual_clock = True``) implement
    ``open_session``; real-clock backends implement ``connect``.
    """

    virtual_clock: bool

    def health_check(self) -> None:
        """
        Raise BackendUnavailable when the backend cannot take traffic.
        """
        ...


class VirtualBackend(InferenceBackend, Protocol):
    def open_session(self) -> VirtualSession: ...


class LiveBackend(InferenceBackend, Protocol):
    def connect(self) -> AsyncContextManager[LiveSession]: ...
