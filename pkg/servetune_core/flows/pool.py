from __future__ import annotations

import heapq
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Generic, List, Optional, Sequence, TypeVar

from tenacity import (
    Retrying,
    before_sleep_log,
    retry_if_exception_type,
    stop_after_attempt,
    wait_none,
)

from servetune_core.errors import InvalidParameter, PoolClosed, TransientTrialError
from servetune_core.ledger import ResourceLedger

logger = logging.getLogger(__name__)

R = TypeVar("R")

DEFAULT_RETRY_BUDGET = 2


class TrialStatus(str, Enum):
    OK = "OK"
    FAILED = "FAILED"
    EXCLUDED = "EXCLUDED"


@dataclass(frozen=True)
class TrialOutcome(Generic[R]):
    """
    Terminal state of one trial in one stage.

    ``cost`` is the simulated time the trial occupied its worker, retries included.
    """

    trial: int
    status: TrialStatus
    value: Optional[R] = None
    attempts: int = 0
    error: Optional[str] = None
    cost: float = 0.0

    @property
    def retries(self) -> int:
        return max(0, self.attempts - 1)


def excluded(trial: int, reason: str) -> TrialOutcome[Any]:
    return TrialOutcome(trial=trial, status=TrialStatus.EXCLUDED, error=reason)


def list_schedule_makespan(costs: Sequence[float], workers: int) -> float:
    """
    Finish time of greedy list scheduling: each job, in order, goes to the
    worker that frees up first.
    """
    if workers < 1:
        raise InvalidParameter(f"workers must be >= 1, got {workers}")
    free_at = [0.0] * workers
    heapq.heapify(free_at)
    for cost in costs:
        start = heapq.heappop(free_at)
        heapq.heappush(free_at, start + cost)
    return max(free_at)


class StagePool:
    """
    Worker pool for one stage, holding ``workers * slots_per_worker`` ledger
    slots from creation until :meth:`destroy`.

    Transient trial errors are retried up to ``retry_budget`` times; any other
    error, or running out of retries, marks the trial FAILED.
    """

    def __init__(
        self,
        stage: str,
        ledger: ResourceLedger,
        workers: int,
        *,
        retry_budget: int = DEFAULT_RETRY_BUDGET,
        slots_per_worker: int = 1,
    ) -> None:
        if workers < 1:
            raise InvalidParameter(f"workers must be >= 1, got {workers}")
        if retry_budget < 0:
            raise InvalidParameter(f"retry_budget must be >= 0, got {retry_budget}")
        self.stage = stage
        self.workers = workers
        self.retry_budget = retry_budget
        self._ledger = ledger
        self._owner = f"pool:{stage}"
        ledger.allocate(self._owner, workers * slots_per_worker)
        self._executor: Optional[ThreadPoolExecutor] = ThreadPoolExecutor(
            max_workers=workers, thread_name_prefix=f"pool-{stage}"
        )
        logger.info(
            "Created %s pool: %d worker(s), %d slot(s) free",
            stage,
            workers,
            ledger.free,
        )

    @property
    def closed(self) -> bool:
        return self._executor is None

    def run(
        self,
        trials: Sequence[int],
        fn: Callable[[int], R],
        cost: Optional[Callable[[int, Optional[R]], float]] = None,
    ) -> List[TrialOutcome[R]]:
        """
        Run ``fn(trial)`` for every trial; outcomes come back in input order.

        ``cost(trial, value)`` prices one attempt in simulated seconds; value
        is None for a failed trial.
        """
        if self._executor is None:
            raise PoolClosed(f"{self.stage} pool has been destroyed")
        futures = [self._executor.submit(self._attempt, t, fn, cost) for t in trials]
        return [f.result() for f in futures]

    def makespan(self, outcomes: Sequence[TrialOutcome[Any]]) -> float:
        return list_schedule_makespan([o.cost for o in outcomes], self.workers)

    def destroy(self) -> None:
        if self._executor is None:
            return
        self._executor.shutdown(wait=True)
        self._executor = None
        self._ledger.release(self._owner)
        logger.info("Destroyed %s pool, %d slot(s) free", self.stage, self._ledger.free)

    def __enter__(self) -> "StagePool":
        return self

    def __exit__(self, *exc: object) -> None:
        self.destroy()

    def _attempt(
        self,
        trial: int,
        fn: Callable[[int], R],
        cost: Optional[Callable[[int, Optional[R]], float]],
    ) -> TrialOutcome[R]:
        retrying = Retrying(
            stop=stop_after_attempt(self.retry_budget + 1),
            wait=wait_none(),
            retry=retry_if_exception_type(TransientTrialError),
            before_sleep=before_sleep_log(logger, logging.WARNING),
            reraise=True,
        )
        attempts = 0
        try:
            for attempt in retrying:
                with attempt:
                    attempts = attempt.retry_state.attempt_number
                    value = fn(trial)
        except Exception as e:
            logger.warning(
                "%s trial %d failed after %d attempt(s): %s", self.stage, trial, attempts, e
            )
            return TrialOutcome(
                trial=trial,
                status=TrialStatus.FAILED,
                attempts=attempts,
                error=str(e),
                cost=(cost(trial, None) if cost else 0.0) * attempts,
            )
        return TrialOutcome(
            trial=trial,
            status=TrialStatus.OK,
            value=value,
            attempts=attempts,
            cost=(cost(trial, value) if cost else 0.0) * attempts,
        )
