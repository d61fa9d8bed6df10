from __future__ import annotations

from typing import List, Tuple

import numpy as np

from servetune_core.backends.base import SyntheticRequest
from servetune_core.errors import InvalidParameter
from servetune_core.models import ArrivalProcess, LoadPattern

DEFAULT_VOCAB_SIZE = 32000
# Fixed stream for the shared prefix, so it is identical across seeds too.
_PREFIX_STREAM = 0x5EED


def deterministic_arrivals(rate: float, duration: float) -> np.ndarray:
    """
    Request i fires at i / rate, for every i with i / rate < duration.
    """
    if not rate > 0:
        raise InvalidParameter(f"rate must be > 0, got {rate}")
    n = int(np.ceil(rate * duration))
    times = np.arange(n + 1, dtype=float) / rate
    return times[times < duration]


def poisson_arrivals(rate: float, duration: float, seed: int) -> np.ndarray:
    """
    Poisson process with the first request at t = 0.
    """
    if not rate > 0:
        raise InvalidParameter(f"rate must be > 0, got {rate}")
    rng = np.random.default_rng(seed)
    out: List[float] = []
    t = 0.0
    while t < duration:
        out.append(t)
        t += float(rng.exponential(1.0 / rate))
    return np.asarray(out, dtype=float)


def arrival_schedule(
    process: ArrivalProcess, rate: float, pattern: LoadPattern
) -> np.ndarray:
    if process is ArrivalProcess.POISSON:
        return poisson_arrivals(rate, pattern.duration, pattern.seed)
    return deterministic_arrivals(rate, pattern.duration)


def synthesize_prompt(
    pattern: LoadPattern, index: int, vocab_size: int = DEFAULT_VOCAB_SIZE
) -> Tuple[int, ...]:
    """
    Pseudorandom token ids for request ``index``. The first ``prefix_len``
    tokens are shared by every request.
    """
    prefix = np.random.default_rng(_PREFIX_STREAM).integers(
        0, vocab_size, size=pattern.prefix_len
    )
    suffix = np.random.default_rng([pattern.seed, index + 1]).integers(
        0, vocab_size, size=pattern.input_len - pattern.prefix_len
    )
    return tuple(int(t) for t in np.concatenate([prefix, suffix]))


def build_request(
    pattern: LoadPattern,
    index: int,
    arrival_ts: float,
    *,
    with_tokens: bool = False,
) -> SyntheticRequest:
    return SyntheticRequest(
        request_id=index,
        arrival_ts=float(arrival_ts),
        input_len=pattern.input_len,
        output_len=pattern.output_len,
        prefix_len=pattern.prefix_len,
        prompt_tokens=synthesize_prompt(pattern, index) if with_tokens else (),
    )
