from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional

from servetune_core.analysis.steady_state import DEFAULT_TOLERANCE
from servetune_core.backends.base import InferenceBackend
from servetune_core.errors import EmptyTelemetry, InvalidParameter, TrialAborted
from servetune_core.loadgen.runner import TrialPlan, closed_loop_lower_bound, run_trial
from servetune_core.models import (
    ArrivalProcess,
    LoadPattern,
    SLOSpec,
    SweepDecision,
    SweepResult,
    SweepStatus,
    TrialMode,
    TrialResult,
)

logger = logging.getLogger(__name__)

# Next rate when halving lands at or below the lower bound.
LB_CLAMP_FACTOR = 1.01


@dataclass(frozen=True)
class SweepConfig:
    """
    Knobs of the maximum-sustainable-rate search.

    ``threshold`` is a fraction of the current best when ``relative_threshold``
    is set, otherwise an absolute gap in requests/second.

    ``track_lower_bound`` brackets the boundary: passes raise the lower bound,
    and once some rate has failed a pass moves halfway towards the lowest
    failure instead of doubling. ``start_from_lower_bound`` runs the
    closed-loop trial even without SLOs and opens the open-loop trials at
    ``max(initial_rate, lower bound)``.
    """

    initial_rate: float = 1.0
    budget: int = 12
    threshold: float = 0.05
    relative_threshold: bool = True
    slos: SLOSpec = field(default_factory=SLOSpec)
    tolerance: float = DEFAULT_TOLERANCE
    timeout: float = 60.0
    arrival_process: ArrivalProcess = ArrivalProcess.DETERMINISTIC
    track_lower_bound: bool = True
    start_from_lower_bound: bool = False

    def __post_init__(self) -> None:
        if not self.initial_rate > 0:
            raise InvalidParameter(f"initial_rate must be > 0, got {self.initial_rate}")
        if self.budget < 1:
            raise InvalidParameter(f"budget must be >= 1, got {self.budget}")
        if not self.threshold > 0:
            raise InvalidParameter(f"threshold must be > 0, got {self.threshold}")

    def gap(self, anchor: float) -> float:
        return self.threshold * anchor if self.relative_threshold else self.threshold


def run_sweep(
    config: SweepConfig, pattern: LoadPattern, backend: InferenceBackend
) -> SweepResult:
    """
    Find the highest request rate that meets every SLO in steady state.

    With SLOs, a closed-loop trial comes first: if it already violates them
    the sweep ends INFEASIBLE; otherwise it sets the lower bound to
    1 / mean latency. Open-loop trials then double the rate after each pass
    (or, once bracketed, move halfway to the lowest failure) and move to the
    midpoint of (lower bound, rate) after each failure, until the next rate
    is within the threshold of the best one or the budget runs out.
    """
    backend.health_check()
    trials: List[TrialResult] = []

    if config.slos.constraints or config.start_from_lower_bound:
        baseline = _run(
            TrialPlan(
                mode=TrialMode.CLOSED_LOOP,
                pattern=pattern,
                timeout=config.timeout,
                slos=config.slos,
                tolerance=config.tolerance,
            ),
            backend,
        )
        if config.slos.constraints and not baseline.slo_pass:
            trials.append(replace(baseline, decision=SweepDecision.BASELINE))
            logger.info(
                "Closed-loop trial violates SLOs %s; sweep is infeasible", baseline.slo_checks
            )
            return SweepResult(
                status=SweepStatus.INFEASIBLE, best_rate=0.0, trials=tuple(trials), lower_bound=0.0
            )
        try:
            lower_bound = closed_loop_lower_bound(baseline)
        except EmptyTelemetry:
            lower_bound = config.initial_rate / 2.0
        trials.append(replace(baseline, decision=SweepDecision.BASELINE))
    else:
        lower_bound = config.initial_rate / 2.0
    initial_lower_bound = lower_bound
    logger.info("Sweep lower bound %.4f req/s", lower_bound)

    best: Optional[float] = None
    # lowest failing rate seen so far
    ceiling: Optional[float] = None
    rate = config.initial_rate
    if config.start_from_lower_bound:
        rate = max(rate, lower_bound)
    converged = False
    open_loop = 0

    while open_loop < config.budget:
        trial = _run(
            TrialPlan(
                mode=TrialMode.OPEN_LOOP,
                pattern=pattern,
                rate=rate,
                arrival_process=config.arrival_process,
                timeout=config.timeout,
                slos=config.slos,
                tolerance=config.tolerance,
            ),
            backend,
        )
        open_loop += 1

        if trial.slo_pass:
            best = rate if best is None else max(best, rate)
            if ceiling is not None and ceiling <= rate:
                ceiling = None
            if config.track_lower_bound:
                lower_bound = max(lower_bound, rate)
            if config.track_lower_bound and ceiling is not None:
                next_rate = (rate + ceiling) / 2.0
                decision = SweepDecision.BISECT
            else:
                next_rate = 2.0 * rate
                decision = SweepDecision.DOUBLE
        else:
            ceiling = rate if ceiling is None else min(ceiling, rate)
            next_rate = (lower_bound + rate) / 2.0
            if lower_bound >= next_rate:
                next_rate = lower_bound * LB_CLAMP_FACTOR
            decision = SweepDecision.HALVE

        anchor = best if best is not None else lower_bound
        if abs(anchor - next_rate) <= config.gap(anchor):
            decision = SweepDecision.CONVERGED
            converged = True

        trials.append(replace(trial, decision=decision, next_rate=next_rate))
        logger.info(
            "Sweep trial %d rate=%.4f pass=%s -> %s next=%.4f",
            open_loop,
            rate,
            trial.slo_pass,
            decision.value,
            next_rate,
        )
        if converged:
            break
        rate = next_rate

    if best is None:
        logger.info("No open-loop trial passed; sweep is infeasible")
        return SweepResult(
            status=SweepStatus.INFEASIBLE,
            best_rate=0.0,
            trials=tuple(trials),
            lower_bound=initial_lower_bound,
            converged=converged,
        )
    if not converged:
        logger.warning("Sweep budget of %d trials exhausted before converging", config.budget)
    return SweepResult(
        status=SweepStatus.FEASIBLE,
        best_rate=best,
        trials=tuple(trials),
        lower_bound=initial_lower_bound,
        converged=converged,
    )


def _run(plan: TrialPlan, backend: InferenceBackend) -> TrialResult:
    try:
        return run_trial(plan, backend)
    except TrialAborted as e:
        return e.result
