from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Tuple

from servetune_core.errors import InvalidParameter

ACCEPTED_PERCENTILES = (50, 90, 95, 99)
TENSOR_PARALLEL_SIZES = (1, 2, 4, 8)
MAX_CONTEXT_HEADROOM_PCT = 115


class MetricKind(str, Enum):
    E2E_LATENCY = "e2e_latency"
    TTFT = "ttft"
    TPOT = "tpot"


class RequestStatus(str, Enum):
    OK = "OK"
    ERROR = "ERROR"
    TIMEOUT = "TIMEOUT"


class TrialMode(str, Enum):
    OPEN_LOOP = "OPEN_LOOP"
    CLOSED_LOOP = "CLOSED_LOOP"


class ArrivalProcess(str, Enum):
    DETERMINISTIC = "DETERMINISTIC"
    POISSON = "POISSON"


class SweepStatus(str, Enum):
    FEASIBLE = "FEASIBLE"
    INFEASIBLE = "INFEASIBLE"


class SweepDecision(str, Enum):
    BASELINE = "BASELINE"
    DOUBLE = "DOUBLE"
    BISECT = "BISECT"
    HALVE = "HALVE"
    CONVERGED = "CONVERGED"


@dataclass(frozen=True)
class LoadPattern:
    """
    Workload shape shared by every trial of a sweep.
    """

    input_len: int
    output_len: int
    prefix_len: int = 0
    duration: float = 60.0  # seconds of request submission per trial
    seed: int = 0

    def __post_init__(self) -> None:
        if self.input_len < 1:
            raise InvalidParameter(f"input_len must be >= 1, got {self.input_len}")
        if self.output_len < 1:
            raise InvalidParameter(f"output_len must be >= 1, got {self.output_len}")
        if not 0 <= self.prefix_len <= self.input_len:
            raise InvalidParameter(
                f"prefix_len must lie in [0, input_len], got {self.prefix_len}"
            )
        if not self.duration > 0:
            raise InvalidParameter(f"duration must be > 0, got {self.duration}")


@dataclass(frozen=True)
class SLOMetric:
    """
    A latency metric observed at a given percentile.
    """

    kind: MetricKind
    percentile: int = 50

    def __post_init__(self) -> None:
        if self.percentile not in ACCEPTED_PERCENTILES:
            raise InvalidParameter(
                f"percentile must be one of {ACCEPTED_PERCENTILES}, got {self.percentile}"
            )

    @property
    def label(self) -> str:
        return f"{self.kind.value}:p{self.percentile}"


@dataclass(frozen=True)
class SLOConstraint:
    metric: SLOMetric
    threshold_ms: float
    margin: float = 0.0  # multiplicative slack on the threshold

    def __post_init__(self) -> None:
        if not self.threshold_ms > 0:
            raise InvalidParameter(f"threshold must be > 0 ms, got {self.threshold_ms}")
        if self.margin < 0:
            raise InvalidParameter(f"margin must be >= 0, got {self.margin}")

    @property
    def limit_ms(self) -> float:
        return self.threshold_ms * (1.0 + self.margin)

    def passes(self, observed_ms: float) -> bool:
        return observed_ms <= self.limit_ms


_CONSTRAINT_RE = re.compile(
    r"^\s*(?P<kind>[a-z0-9_]+)\s*:\s*p(?P<pct>\d+)\s*<=\s*(?P<thr>[0-9.]+)\s*(ms)?"
    r"(\s*\+\s*(?P<margin>[0-9.]+)\s*%)?\s*$"
)


@dataclass(frozen=True)
class SLOSpec:
    """
    A set of SLO constraints. An empty set means throughput-oriented (no SLO).
    """

    constraints: Tuple[SLOConstraint, ...] = ()

    @property
    def is_throughput_oriented(self) -> bool:
        return not self.constraints

    def evaluate(self, stats: Dict[str, Dict[str, float]]) -> Dict[str, bool]:
        """
        Per-constraint pass map over a percentile table.

        A constraint whose metric has no samples in ``stats`` fails.
        """
        checks: Dict[str, bool] = {}
        for c in self.constraints:
            observed = stats.get(c.metric.kind.value, {}).get(f"p{c.metric.percentile}")
            checks[c.metric.label] = observed is not None and c.passes(observed)
        return checks

    @classmethod
    def parse(cls, *items: str) -> "SLOSpec":
        """
        Parse compact constraints such as ``"e2e_latency:p95<=500"`` or
        ``"tpot:p50<=10ms+5%"`` (the optional suffix is the error margin).
        """
        parsed = []
        for item in items:
            m = _CONSTRAINT_RE.match(item.lower())
            if not m:
                raise InvalidParameter(f"Cannot parse SLO constraint: {item!r}")
            try:
                kind = MetricKind(m.group("kind"))
            except ValueError as e:
                raise InvalidParameter(f"Unknown SLO metric in {item!r}") from e
            margin = float(m.group("margin")) / 100.0 if m.group("margin") else 0.0
            parsed.append(
                SLOConstraint(
                    metric=SLOMetric(kind=kind, percentile=int(m.group("pct"))),
                    threshold_ms=float(m.group("thr")),
                    margin=margin,
                )
            )
        return cls(constraints=tuple(parsed))


@dataclass(frozen=True)
class RequestRecord:
    """
    Telemetry for one request. Timestamps are seconds since trial start.
    """

    request_id: int
    arrival_ts: float
    first_token_ts: Optional[float] = None
    completion_ts: Optional[float] = None
    output_tokens: int = 0
    status: RequestStatus = RequestStatus.OK

    def __post_init__(self) -> None:
        if self.status is RequestStatus.OK:
            if self.first_token_ts is None or self.completion_ts is None:
                raise InvalidParameter("OK records need first-token and completion timestamps")
            if not self.arrival_ts <= self.first_token_ts <= self.completion_ts:
                raise InvalidParameter(
                    f"request {self.request_id}: timestamps are not monotone"
                )
            if self.output_tokens < 1:
                raise InvalidParameter(f"request {self.request_id}: no output tokens")

    @property
    def ok(self) -> bool:
        return self.status is RequestStatus.OK

    @property
    def e2e_s(self) -> Optional[float]:
        if not self.ok:
            return None
        return self.completion_ts - self.arrival_ts  # type: ignore[operator]

    @property
    def ttft_s(self) -> Optional[float]:
        if not self.ok:
            return None
        return self.first_token_ts - self.arrival_ts  # type: ignore[operator]

    @property
    def tpot_s(self) -> Optional[float]:
        # first token excluded; undefined for single-token outputs
        if not self.ok or self.output_tokens < 2:
            return None
        return (self.completion_ts - self.first_token_ts) / (self.output_tokens - 1)  # type: ignore[operator]


@dataclass(frozen=True)
class StabilityDiagnostics:
    """
    Least-squares fit of completion on arrival timestamps (c = alpha + beta * r).
    """

    beta: float
    alpha: float  # seconds
    r2: float
    tolerance: float
    is_stable: bool
    n_points: int = 0


@dataclass(frozen=True)
class TrialResult:
    """
    Outcome of one fixed-rate (open-loop) or synchronous (closed-loop) trial.
    """

    rate: float
    mode: TrialMode
    records: Tuple[RequestRecord, ...]
    latency_stats: Dict[str, Dict[str, float]]
    stability: Optional[StabilityDiagnostics]
    slo_pass: bool
    slo_checks: Dict[str, bool] = field(default_factory=dict)
    error_count: int = 0
    timeout_count: int = 0
    aborted: bool = False
    decision: Optional[SweepDecision] = None
    next_rate: Optional[float] = None

    @property
    def ok_records(self) -> Tuple[RequestRecord, ...]:
        return tuple(r for r in self.records if r.ok)


@dataclass(frozen=True)
class SweepResult:
    """
    Feasibility verdict, best sustained rate, and the ordered trial archive.
    """

    status: SweepStatus
    best_rate: float
    trials: Tuple[TrialResult, ...]
    lower_bound: float
    converged: bool = False

    @property
    def open_loop_trials(self) -> Tuple[TrialResult, ...]:
        return tuple(t for t in self.trials if t.mode is TrialMode.OPEN_LOOP)


@dataclass(frozen=True)
class RuntimeConfig:
    """
    A candidate serving configuration.
    """

    tensor_parallel: int = 1
    max_num_seqs: int = 256
    max_batched_tokens: int = 8192
    max_context: int = 4096
    data_parallel: int = 1

    def __post_init__(self) -> None:
        if self.tensor_parallel not in TENSOR_PARALLEL_SIZES:
            raise InvalidParameter(
                f"tensor_parallel must be one of {TENSOR_PARALLEL_SIZES}, got {self.tensor_parallel}"
            )
        if self.max_num_seqs < 1:
            raise InvalidParameter(f"max_num_seqs must be >= 1, got {self.max_num_seqs}")
        if self.max_batched_tokens < 1:
            raise InvalidParameter(
                f"max_batched_tokens must be >= 1, got {self.max_batched_tokens}"
            )
        if self.max_context < 2:
            raise InvalidParameter(f"max_context must be >= 2, got {self.max_context}")
        if self.data_parallel < 1:
            raise InvalidParameter(f"data_parallel must be >= 1, got {self.data_parallel}")

    @property
    def gpus(self) -> int:
        return self.tensor_parallel * self.data_parallel

    def validate_for(self, pattern: LoadPattern) -> None:
        """
        Check the invariants that depend on the workload.
        """
        if self.max_batched_tokens < pattern.input_len:
            raise InvalidParameter(
                f"max_batched_tokens {self.max_batched_tokens} < input_len {pattern.input_len}"
            )
        if self.max_context < pattern.input_len + pattern.output_len:
            raise InvalidParameter(
                f"max_context {self.max_context} cannot hold "
                f"{pattern.input_len}+{pattern.output_len} tokens"
            )


def compute_max_context(pattern: LoadPattern) -> int:
    """
    Context size with 15% headroom over the pattern's total length.

    Integer arithmetic keeps the ceiling exact: (1200, 80) -> 1472.
    """
    total = pattern.input_len + pattern.output_len
    return -(-total * MAX_CONTEXT_HEADROOM_PCT // 100)


def default_runtime_config(pattern: LoadPattern) -> RuntimeConfig:
    """
    Untuned serving configuration sized for the pattern.
    """
    return RuntimeConfig(
        tensor_parallel=1,
        max_num_seqs=256,
        max_batched_tokens=max(8192, pattern.input_len),
        max_context=compute_max_context(pattern),
    )
