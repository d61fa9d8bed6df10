from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Deque, Dict, List, Mapping, Optional

import simpy

from servetune_core.backends.base import SyntheticRequest
from servetune_core.errors import ContextOverflow, InvalidParameter
from servetune_core.models import (
    LoadPattern,
    RequestRecord,
    RequestStatus,
    RuntimeConfig,
)

logger = logging.getLogger(__name__)

# Relative speed of a compressed artifact per quantization scheme.
SCHEME_SPEEDUPS: Dict[str, float] = {
    "none": 1.0,
    "fp8_dynamic": 1.35,
    "int_w8a8": 1.45,
    "int_w4a16": 1.6,
}


@dataclass(frozen=True)
class SimServerModel:
    """
    Cost model of a continuous-batching server.

    One scheduler step takes
    ``decode_step_base + token_cost * decoders + prefill_tokens / prefill_rate``
    where ``token_cost`` and ``prefill_rate`` scale with ``tensor_parallel ** efficiency``.
    """

    config: RuntimeConfig = field(default_factory=RuntimeConfig)
    prefill_rate: float = 40000.0  # tokens/s per TP unit
    efficiency: float = 0.85
    decode_step_base: float = 0.008  # seconds
    decode_token_cost: float = 0.0004  # seconds per active sequence per step
    prefix_cache: bool = True
    speedup: float = 1.0

    def __post_init__(self) -> None:
        for name in ("prefill_rate", "decode_step_base", "decode_token_cost", "speedup"):
            if not getattr(self, name) > 0:
                raise InvalidParameter(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 < self.efficiency <= 1:
            raise InvalidParameter(f"efficiency must lie in (0, 1], got {self.efficiency}")

    @property
    def tp_scale(self) -> float:
        return float(self.config.tensor_parallel) ** self.efficiency

    @property
    def effective_prefill_rate(self) -> float:
        return self.prefill_rate * self.tp_scale * self.speedup

    @property
    def effective_token_cost(self) -> float:
        return self.decode_token_cost / (self.tp_scale * self.speedup)

    def step_duration(self, decoders: int, prefill_tokens: int) -> float:
        return (
            self.decode_step_base
            + self.effective_token_cost * decoders
            + prefill_tokens / self.effective_prefill_rate
        )

    def with_config(self, config: RuntimeConfig) -> "SimServerModel":
        return replace(self, config=config)

    def with_scheme(self, scheme: str) -> "SimServerModel":
        return replace(self, speedup=self.speedup * SCHEME_SPEEDUPS.get(scheme.lower(), 1.0))

    @classmethod
    def from_mapping(
        cls, params: Mapping[str, Any], config: Optional[RuntimeConfig] = None
    ) -> "SimServerModel":
        """
        Build a model from job-file parameters, ignoring unknown keys.
        """
        known = {
            k: params[k]
            for k in (
                "prefill_rate",
                "efficiency",
                "decode_step_base",
                "decode_token_cost",
                "prefix_cache",
                "speedup",
            )
            if k in params
        }
        return cls(config=config or RuntimeConfig(), **known)


def effective_prefill_len(model: SimServerModel, pattern: LoadPattern) -> int:
    if model.prefix_cache and pattern.prefix_len > 0:
        return max(1, pattern.input_len - pattern.prefix_len)
    return pattern.input_len


def single_request_latency(model: SimServerModel, pattern: LoadPattern) -> float:
    """
    Unloaded E2E seconds: one prefill step, then output_len - 1 decode steps.
    """
    prefill = model.decode_step_base + pattern.input_len / model.effective_prefill_rate
    decode = (pattern.output_len - 1) * model.step_duration(1, 0)
    return prefill + decode


def analytic_capacity(model: SimServerModel, pattern: LoadPattern) -> float:
    """
    Saturation throughput (req/s) at full batch occupancy, all replicas.

    Exact for ``max_num_seqs = 1``; an approximation otherwise, checked
    against :func:`measure_capacity`.
    """
    cfg = model.config
    o = pattern.output_len
    p = effective_prefill_len(model, pattern)
    budget_bound = math.floor(cfg.max_batched_tokens * o / (o - 1 + p))
    b = max(1, min(cfg.max_num_seqs, budget_bound))
    if b == 1:
        per_replica = 1.0 / single_request_latency(model, pattern)
    else:
        period = (
            o * model.decode_step_base
            + model.effective_token_cost * b * (o - 1)
            + b * p / model.effective_prefill_rate
        )
        per_replica = b / period
    return per_replica * cfg.data_parallel


@dataclass
class _Sequence:
    request: SyntheticRequest
    done: simpy.Event
    tokens: int = 0
    prefill_tokens: int = 0
    first_token_ts: Optional[float] = None


class ServerSimulation:
    """
    One continuous-batching server replica driven by a simpy environment.
    """

    def __init__(
        self,
        model: SimServerModel,
        env: simpy.Environment,
        *,
        replica: int = 0,
        trace: Optional[List[Dict[str, Any]]] = None,
    ) -> None:
        self.model = model
        self.env = env
        self.replica = replica
        self.trace = trace
        self.waiting: Deque[_Sequence] = deque()
        self.running: List[_Sequence] = []
        self._prefix_seen = False
        self._wakeup = env.event()
        env.process(self._serve())

    def check_fits(self, request: SyntheticRequest) -> None:
        needed = request.input_len + request.output_len
        if needed > self.model.config.max_context:
            raise ContextOverflow(
                f"request {request.request_id} needs {needed} tokens, "
                f"max_context is {self.model.config.max_context}"
            )

    def enqueue(self, request: SyntheticRequest, done: simpy.Event) -> None:
        self.waiting.append(_Sequence(request=request, done=done))
        self._emit("arrival", request.request_id)
        if not self._wakeup.triggered:
            self._wakeup.succeed()

    def cancel(self, request_id: int) -> bool:
        for queue in (self.waiting, self.running):
            for seq in queue:
                if seq.request.request_id == request_id:
                    queue.remove(seq)
                    self._emit("cancel", request_id)
                    return True
        return False

    @property
    def busy(self) -> bool:
        return bool(self.waiting or self.running)

    def _emit(self, event: str, request_id: Optional[int] = None, **extra: Any) -> None:
        if self.trace is None:
            return
        entry: Dict[str, Any] = {"t": self.env.now, "event": event, "replica": self.replica}
        if request_id is not None:
            entry["request_id"] = request_id
        entry.update(extra)
        self.trace.append(entry)

    def _prefill_cost(self, seq: _Sequence) -> int:
        cost = seq.request.input_len
        if self.model.prefix_cache and self._prefix_seen and seq.request.prefix_len > 0:
            cost -= seq.request.prefix_len
        return max(1, cost)

    def _admit(self) -> List[_Sequence]:
        cfg = self.model.config
        budget = cfg.max_batched_tokens - len(self.running)
        admitted: List[_Sequence] = []
        while self.waiting and len(self.running) + len(admitted) < cfg.max_num_seqs:
            head = self.waiting[0]
            cost = self._prefill_cost(head)
            # an idle server always takes the head request
            if cost > budget and (self.running or admitted):
                break
            self.waiting.popleft()
            head.prefill_tokens = cost
            budget -= cost
            admitted.append(head)
        return admitted

    def _serve(self):
        while True:
            if not self.busy:
                self._wakeup = self.env.event()
                yield self._wakeup
                continue

            admitted = self._admit()
            decoders = len(self.running)
            prefill_tokens = sum(s.prefill_tokens for s in admitted)
            dt = self.model.step_duration(decoders, prefill_tokens)
            for seq in admitted:
                self._emit("admit", seq.request.request_id, prefill_tokens=seq.prefill_tokens)
            self._emit("step", decoders=decoders, prefill_tokens=prefill_tokens, duration=dt)
            self.running.extend(admitted)

            yield self.env.timeout(dt)

            if any(s.request.prefix_len > 0 for s in admitted):
                self._prefix_seen = True
            now = self.env.now
            still_running: List[_Sequence] = []
            for seq in self.running:
                seq.tokens += 1
                if seq.first_token_ts is None:
                    seq.first_token_ts = now
                if seq.tokens >= seq.request.output_len:
                    self._complete(seq, now)
                else:
                    still_running.append(seq)
            self.running = still_running

    def _complete(self, seq: _Sequence, now: float) -> None:
        self._emit("complete", seq.request.request_id, tokens=seq.tokens)
        seq.done.succeed(
            RequestRecord(
                request_id=seq.request.request_id,
                arrival_ts=seq.request.arrival_ts,
                first_token_ts=seq.first_token_ts,
                completion_ts=now,
                output_tokens=seq.tokens,
                status=RequestStatus.OK,
            )
        )


class SimSession:
    """
    A fresh environment with ``data_parallel`` replicas and round-robin dispatch.
    """

    def __init__(self, model: SimServerModel, *, capture_trace: bool = False) -> None:
        self.env = simpy.Environment()
        self.trace: Optional[List[Dict[str, Any]]] = [] if capture_trace else None
        self.replicas = [
            ServerSimulation(model, self.env, replica=i, trace=self.trace)
            for i in range(model.config.data_parallel)
        ]
        self._next = 0
        self._owner: Dict[int, ServerSimulation] = {}

    def submit(self, request: SyntheticRequest) -> simpy.Event:
        done = self.env.event()
        server = self.replicas[self._next % len(self.replicas)]
        self._next += 1
        try:
            server.check_fits(request)
        except ContextOverflow as e:
            logger.debug("Rejecting request: %s", e)
            server._emit("reject", request.request_id)
            done.succeed(
                RequestRecord(
                    request_id=request.request_id,
                    arrival_ts=request.arrival_ts,
                    status=RequestStatus.ERROR,
                )
            )
            return done
        self._owner[request.request_id] = server
        server.enqueue(request, done)
        return done

    def cancel(self, request_id: int) -> None:
        server = self._owner.pop(request_id, None)
        if server is not None:
            server.cancel(request_id)


class SimBackend:
    """
    Virtual-clock backend. Every session starts from an empty server,
    including an empty prefix cache.
    """

    virtual_clock = True

    def __init__(self, model: SimServerModel, *, capture_trace: bool = False) -> None:
        self.model = model
        self.capture_trace = capture_trace
        self.last_session: Optional[SimSession] = None

    def health_check(self) -> None:
        return None

    def open_session(self) -> SimSession:
        self.last_session = SimSession(self.model, capture_trace=self.capture_trace)
        return self.last_session

    @property
    def last_trace(self) -> List[Dict[str, Any]]:
        if self.last_session is None or self.last_session.trace is None:
            return []
        return self.last_session.trace


def measure_capacity(
    model: SimServerModel, pattern: LoadPattern, n_requests: int = 10_000
) -> float:
    """
    Overload oracle: submit ``n_requests`` at t = 0 and measure the completion
    rate between the 10th and 90th percentile completions.
    """
    if n_requests < 10:
        raise InvalidParameter("measure_capacity needs at least 10 requests")
    session = SimSession(model)
    done = [
        session.submit(
            SyntheticRequest(
                request_id=i,
                arrival_ts=0.0,
                input_len=pattern.input_len,
                output_len=pattern.output_len,
                prefix_len=pattern.prefix_len,
            )
        )
        for i in range(n_requests)
    ]
    session.env.run()
    completions = sorted(
        ev.value.completion_ts for ev in done if ev.value.status is RequestStatus.OK
    )
    if len(completions) < 10:
        raise InvalidParameter("pattern does not fit the model's max_context")
    lo = int(0.1 * len(completions))
    hi = int(0.9 * len(completions)) - 1
    span = completions[hi] - completions[lo]
    if span <= 0:
        return float("inf")
    return (hi - lo) / span
