from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from servetune_core.errors import EmptyTelemetry
from servetune_core.models import (
    ACCEPTED_PERCENTILES,
    MetricKind,
    RequestRecord,
    SLOMetric,
)


def metric_samples_s(records: Iterable[RequestRecord], kind: MetricKind) -> List[float]:
    """
    Per-request values of one metric, in seconds, over OK records only.
    """
    out: List[float] = []
    for r in records:
        if not r.ok:
            continue
        if kind is MetricKind.E2E_LATENCY:
            value = r.e2e_s
        elif kind is MetricKind.TTFT:
            value = r.ttft_s
        else:
            value = r.tpot_s
        if value is not None:
            out.append(value)
    return out


def nearest_rank(values: Sequence[float], percentile: int) -> float:
    """
    Nearest-rank percentile: the ceil(p/100 * n)-th smallest value.
    """
    if len(values) == 0:
        raise EmptyTelemetry("no samples")
    ordered = np.sort(np.asarray(values, dtype=float))
    n = ordered.size
    rank = max(1, -(-percentile * n // 100))
    return float(ordered[rank - 1])


def percentile_stats(records: Sequence[RequestRecord], metric: SLOMetric) -> float:
    """
    Nearest-rank percentile of ``metric`` over OK records, in milliseconds.

    Raises EmptyTelemetry when no OK record exists, or when the metric has no
    defined sample (TPOT with single-token outputs).
    """
    if not any(r.ok for r in records):
        raise EmptyTelemetry("no OK records in trial")
    samples = metric_samples_s(records, metric.kind)
    if not samples:
        raise EmptyTelemetry(f"{metric.kind.value} is undefined for every OK record")
    return nearest_rank(samples, metric.percentile) * 1000.0


def latency_table(
    records: Sequence[RequestRecord],
    percentiles: Sequence[int] = ACCEPTED_PERCENTILES,
) -> Dict[str, Dict[str, float]]:
    """
    {metric: {"p50": ms, ...}} for every metric with at least one sample.
    """
    table: Dict[str, Dict[str, float]] = {}
    for kind in MetricKind:
        samples = metric_samples_s(records, kind)
        if not samples:
            continue
        table[kind.value] = {
            f"p{p}": nearest_rank(samples, p) * 1000.0 for p in percentiles
        }
        table[kind.value]["mean"] = float(np.mean(samples)) * 1000.0
    return table


def mean_e2e_s(records: Sequence[RequestRecord]) -> Optional[float]:
    samples = metric_samples_s(records, MetricKind.E2E_LATENCY)
    if not samples:
        return None
    return float(np.mean(samples))
