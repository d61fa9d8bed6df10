from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import simpy

from servetune_core.analysis.steady_state import (
    DEFAULT_TOLERANCE,
    MIN_POINTS,
    fit_stability,
)
from servetune_core.backends.base import (
    InferenceBackend,
    LiveBackend,
    SyntheticRequest,
    VirtualBackend,
    VirtualSession,
)
from servetune_core.errors import DegenerateRegressor, EmptyTelemetry, InvalidParameter, TrialAborted
from servetune_core.loadgen.arrivals import arrival_schedule, build_request
from servetune_core.metrics import latency_table, mean_e2e_s
from servetune_core.models import (
    ArrivalProcess,
    LoadPattern,
    RequestRecord,
    RequestStatus,
    SLOSpec,
    StabilityDiagnostics,
    TrialMode,
    TrialResult,
)

logger = logging.getLogger(__name__)

ABORT_ERROR_FRACTION = 0.5


@dataclass(frozen=True)
class TrialPlan:
    """
    What one trial runs. ``rate`` is ignored in closed loop.
    """

    mode: TrialMode
    pattern: LoadPattern
    rate: float = 0.0
    arrival_process: ArrivalProcess = ArrivalProcess.DETERMINISTIC
    timeout: float = 60.0  # seconds per request
    slos: SLOSpec = field(default_factory=SLOSpec)
    tolerance: float = DEFAULT_TOLERANCE
    max_concurrency: Optional[int] = None  # live backends only

    def __post_init__(self) -> None:
        if self.mode is TrialMode.OPEN_LOOP and not self.rate > 0:
            raise InvalidParameter(f"open-loop trials need rate > 0, got {self.rate}")
        if not self.timeout > 0:
            raise InvalidParameter(f"timeout must be > 0, got {self.timeout}")
        if self.max_concurrency is not None and self.max_concurrency < 1:
            raise InvalidParameter("max_concurrency must be >= 1")


def run_trial(plan: TrialPlan, backend: InferenceBackend) -> TrialResult:
    """
    Drive one trial and summarize it.

    Raises BackendUnavailable when the health check fails, and TrialAborted
    (carrying the summarized result) when more than half the requests errored.
    """
    backend.health_check()
    if backend.virtual_clock:
        records = _drive_virtual(plan, backend)  # type: ignore[arg-type]
    else:
        records = asyncio.run(_drive_live(plan, backend))  # type: ignore[arg-type]
    records.sort(key=lambda r: (r.arrival_ts, r.request_id))

    result = summarize_trial(plan, records)
    if result.records and result.error_count > ABORT_ERROR_FRACTION * len(result.records):
        aborted = _replace_aborted(result)
        logger.warning(
            "Trial aborted at rate %.3f: %d/%d requests errored",
            plan.rate,
            result.error_count,
            len(result.records),
        )
        raise TrialAborted(
            f"{result.error_count} of {len(result.records)} requests errored", aborted
        )
    return result


def summarize_trial(plan: TrialPlan, records: Sequence[RequestRecord]) -> TrialResult:
    """
    Percentile table, stability fit and SLO verdict for a finished trial.
    """
    stats = latency_table(records)
    stability: Optional[StabilityDiagnostics] = None
    ok_count = sum(1 for r in records if r.ok)
    if ok_count >= MIN_POINTS:
        try:
            stability = fit_stability(records, plan.tolerance)
        except DegenerateRegressor:
            stability = None

    checks = plan.slos.evaluate(stats)
    errors = sum(1 for r in records if r.status is RequestStatus.ERROR)
    timeouts = sum(1 for r in records if r.status is RequestStatus.TIMEOUT)

    passed = ok_count > 0 and errors == 0 and timeouts == 0 and all(checks.values())
    if plan.mode is TrialMode.OPEN_LOOP:
        passed = passed and stability is not None and stability.is_stable

    result = TrialResult(
        rate=plan.rate if plan.mode is TrialMode.OPEN_LOOP else 0.0,
        mode=plan.mode,
        records=tuple(records),
        latency_stats=stats,
        stability=stability,
        slo_pass=passed,
        slo_checks=checks,
        error_count=errors,
        timeout_count=timeouts,
    )
    _log_trial(result)
    return result


def closed_loop_lower_bound(result: TrialResult) -> float:
    """
    1 / mean E2E latency (seconds) over OK records of a closed-loop trial.
    """
    if result.mode is not TrialMode.CLOSED_LOOP:
        raise InvalidParameter("lower bound is defined for closed-loop trials only")
    mean_s = mean_e2e_s(result.records)
    if mean_s is None:
        raise EmptyTelemetry("closed-loop trial has no OK records")
    if mean_s <= 0:
        raise InvalidParameter("mean latency must be > 0")
    return 1.0 / mean_s


def _replace_aborted(result: TrialResult) -> TrialResult:
    return replace(result, aborted=True, slo_pass=False)


def _log_trial(result: TrialResult) -> None:
    diag = result.stability
    if diag is None:
        logger.info(
            "Trial %s rate=%.3f n=%d errors=%d timeouts=%d stability=n/a pass=%s",
            result.mode.value,
            result.rate,
            len(result.records),
            result.error_count,
            result.timeout_count,
            result.slo_pass,
        )
        return
    logger.info(
        "Trial %s rate=%.3f n=%d beta=%.4f alpha=%.4f r2=%.4f stable=%s pass=%s",
        result.mode.value,
        result.rate,
        len(result.records),
        diag.beta,
        diag.alpha,
        diag.r2,
        diag.is_stable,
        result.slo_pass,
    )


# ------- VIRTUAL CLOCK -------


def _drive_virtual(plan: TrialPlan, backend: VirtualBackend) -> List[RequestRecord]:
    session = backend.open_session()
    env = session.env
    records: List[RequestRecord] = []

    if plan.mode is TrialMode.OPEN_LOOP:
        for i, at in enumerate(arrival_schedule(plan.arrival_process, plan.rate, plan.pattern)):
            env.process(_virtual_request(env, session, plan, build_request(plan.pattern, i, at), records))
    else:
        env.process(_virtual_closed_loop(env, session, plan, records))
    env.run()
    return records


def _await_virtual(
    env: simpy.Environment,
    session: VirtualSession,
    plan: TrialPlan,
    request: SyntheticRequest,
    records: List[RequestRecord],
):
    done = session.submit(request)
    deadline = env.timeout(plan.timeout)
    yield done | deadline
    if done.triggered:
        records.append(done.value)
    else:
        session.cancel(request.request_id)
        records.append(
            RequestRecord(
                request_id=request.request_id,
                arrival_ts=request.arrival_ts,
                status=RequestStatus.TIMEOUT,
            )
        )


def _virtual_request(env, session, plan, request, records):
    yield env.timeout(request.arrival_ts)
    yield from _await_virtual(env, session, plan, request, records)


def _virtual_closed_loop(env, session, plan, records):
    index = 0
    while env.now < plan.pattern.duration:
        started = env.now
        request = build_request(plan.pattern, index, started)
        yield from _await_virtual(env, session, plan, request, records)
        index += 1
        if env.now == started:
            # an instantly rejected request would otherwise spin forever
            break


# ------- REAL CLOCK -------


async def _drive_live(plan: TrialPlan, backend: LiveBackend) -> List[RequestRecord]:
    async with backend.connect() as session:
        origin = time.perf_counter()
        if plan.mode is TrialMode.CLOSED_LOOP:
            return await _live_closed_loop(plan, session, origin)

        schedule = arrival_schedule(plan.arrival_process, plan.rate, plan.pattern)
        limiter = asyncio.Semaphore(plan.max_concurrency) if plan.max_concurrency else None
        tasks: Dict[asyncio.Task, SyntheticRequest] = {}
        for i, at in enumerate(schedule):
            delay = origin + float(at) - time.perf_counter()
            if delay > 0:
                await asyncio.sleep(delay)
            # measured send time, so scheduler jitter shows up in the record
            sent_at = time.perf_counter() - origin
            request = build_request(plan.pattern, i, sent_at, with_tokens=True)
            task = asyncio.create_task(_live_send(session, request, origin, limiter))
            tasks[task] = request

        if not tasks:
            return []
        done, pending = await asyncio.wait(tasks.keys(), timeout=plan.timeout)
        for task in pending:
            task.cancel()
        if pending:
            await asyncio.gather(*pending, return_exceptions=True)

        records: List[RequestRecord] = []
        for task, request in tasks.items():
            if task in done and not task.cancelled() and task.exception() is None:
                records.append(task.result())
            else:
                status = RequestStatus.TIMEOUT if task in pending else RequestStatus.ERROR
                records.append(
                    RequestRecord(
                        request_id=request.request_id,
                        arrival_ts=request.arrival_ts,
                        status=status,
                    )
                )
        return records


async def _live_send(session, request, origin, limiter) -> RequestRecord:
    if limiter is None:
        return await session.send(request, origin)
    async with limiter:
        return await session.send(request, origin)


async def _live_closed_loop(plan: TrialPlan, session, origin: float) -> List[RequestRecord]:
    records: List[RequestRecord] = []
    index = 0
    while time.perf_counter() - origin < plan.pattern.duration:
        at = time.perf_counter() - origin
        request = build_request(plan.pattern, index, at, with_tokens=True)
        try:
            record = await asyncio.wait_for(session.send(request, origin), plan.timeout)
        except asyncio.TimeoutError:
            record = RequestRecord(
                request_id=index, arrival_ts=at, status=RequestStatus.TIMEOUT
            )
        records.append(record)
        index += 1
    return records
