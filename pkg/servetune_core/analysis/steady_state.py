from __future__ import annotations

import logging
import math
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from servetune_core.errors import DegenerateRegressor, InsufficientData, InvalidParameter
from servetune_core.models import RequestRecord, StabilityDiagnostics

logger = logging.getLogger(__name__)

MIN_POINTS = 10
MIN_TOLERANCE = 0.005
MAX_TOLERANCE = 0.2
DEFAULT_TOLERANCE = 0.05


def fit_stability(
    records: Sequence[RequestRecord], tolerance: float = DEFAULT_TOLERANCE
) -> StabilityDiagnostics:
    """
    Regress completion on arrival timestamps, ``c = alpha + beta * r``.

    A trial keeping pace with its arrivals has beta close to 1; a growing
    backlog pushes beta above 1. ERROR and TIMEOUT records are excluded.
    """
    if not MIN_TOLERANCE <= tolerance <= MAX_TOLERANCE:
        raise InvalidParameter(
            f"tolerance must lie in [{MIN_TOLERANCE}, {MAX_TOLERANCE}], got {tolerance}"
        )
    ok = [r for r in records if r.ok]
    if len(ok) < MIN_POINTS:
        raise InsufficientData(f"need at least {MIN_POINTS} OK records, got {len(ok)}")

    arrivals = np.fromiter((r.arrival_ts for r in ok), dtype=float, count=len(ok))
    completions = np.fromiter((r.completion_ts for r in ok), dtype=float, count=len(ok))
    if np.ptp(arrivals) == 0:
        raise DegenerateRegressor("all arrival timestamps are equal")

    fit = stats.linregress(arrivals, completions)
    beta = float(fit.slope)
    alpha = float(fit.intercept)
    r2 = float(np.clip(fit.rvalue**2, 0.0, 1.0))
    return StabilityDiagnostics(
        beta=beta,
        alpha=alpha,
        r2=r2,
        tolerance=tolerance,
        is_stable=abs(beta - 1.0) <= tolerance,
        n_points=len(ok),
    )


def correlation_coefficient(diag: StabilityDiagnostics) -> float:
    """Signed Pearson r recovered from R² and the slope."""
    return math.copysign(math.sqrt(diag.r2), diag.beta)


def stability_frame(
    records: Sequence[RequestRecord], diag: Optional[StabilityDiagnostics] = None
) -> pd.DataFrame:
    """
    (arrival, completion, fitted) rows for plotting a trial's regression.

    ``fitted`` is empty when no diagnostics are available.
    """
    ok = [r for r in records if r.ok]
    frame = pd.DataFrame(
        {
            "request_id": [r.request_id for r in ok],
            "arrival_s": [r.arrival_ts for r in ok],
            "completion_s": [r.completion_ts for r in ok],
        }
    )
    if diag is not None:
        frame["fitted_s"] = diag.alpha + diag.beta * frame["arrival_s"]
    else:
        frame["fitted_s"] = np.nan
    return frame
