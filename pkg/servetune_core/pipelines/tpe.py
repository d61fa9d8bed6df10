from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from servetune_core.errors import InvalidParameter
from servetune_core.models import TENSOR_PARALLEL_SIZES, RuntimeConfig

DEFAULT_GAMMA = 0.25
DEFAULT_CANDIDATES = 24
DEFAULT_STARTUP = 5
SMOOTHING = 1.0

Observation = Tuple[RuntimeConfig, float]


def log2_grid(lo: int, hi: int) -> Tuple[int, ...]:
    """
    Powers of two inside [lo, hi], plus both endpoints.
    """
    if lo < 1 or hi < lo:
        raise InvalidParameter(f"invalid integer range [{lo}, {hi}]")
    points = {lo, hi}
    k = math.ceil(math.log2(lo))
    while 2**k <= hi:
        points.add(2**k)
        k += 1
    return tuple(sorted(points))


@dataclass(frozen=True)
class SearchSpace:
    """
    Runtime configurations the tuner may propose. Integer ranges are
    searched on log2 grids; ``max_context`` is fixed.
    """

    tensor_parallel_choices: Tuple[int, ...] = TENSOR_PARALLEL_SIZES
    max_num_seqs_range: Tuple[int, int] = (16, 1024)
    max_batched_tokens_range: Tuple[int, int] = (512, 32768)
    max_context: int = 4096
    data_parallel_choices: Tuple[int, ...] = (1,)

    def __post_init__(self) -> None:
        if not self.tensor_parallel_choices:
            raise InvalidParameter("tensor_parallel_choices must be non-empty")
        if not set(self.tensor_parallel_choices) <= set(TENSOR_PARALLEL_SIZES):
            raise InvalidParameter(
                f"tensor_parallel_choices must be a subset of {TENSOR_PARALLEL_SIZES}"
            )
        if not self.data_parallel_choices or min(self.data_parallel_choices) < 1:
            raise InvalidParameter("data_parallel_choices must be non-empty and >= 1")
        # validates both ranges
        log2_grid(*self.max_num_seqs_range)
        log2_grid(*self.max_batched_tokens_range)

    @property
    def dimensions(self) -> List[Tuple[int, ...]]:
        return [
            tuple(sorted(set(self.tensor_parallel_choices))),
            tuple(sorted(set(self.data_parallel_choices))),
            log2_grid(*self.max_num_seqs_range),
            log2_grid(*self.max_batched_tokens_range),
        ]

    @property
    def size(self) -> int:
        return int(np.prod([len(d) for d in self.dimensions]))

    def config_at(self, index: Sequence[int]) -> RuntimeConfig:
        tp, dp, seqs, tokens = (dim[i] for dim, i in zip(self.dimensions, index))
        return RuntimeConfig(
            tensor_parallel=tp,
            max_num_seqs=seqs,
            max_batched_tokens=tokens,
            max_context=self.max_context,
            data_parallel=dp,
        )

    def index_of(self, config: RuntimeConfig) -> Tuple[int, ...]:
        values = (
            config.tensor_parallel,
            config.data_parallel,
            config.max_num_seqs,
            config.max_batched_tokens,
        )
        return tuple(dim.index(v) for dim, v in zip(self.dimensions, values))

    def all_configs(self) -> List[RuntimeConfig]:
        shape = [len(d) for d in self.dimensions]
        return [self.config_at(idx) for idx in np.ndindex(*shape)]


def random_propose(space: SearchSpace, rng: np.random.Generator) -> RuntimeConfig:
    """Uniform draw, one independent index per dimension."""
    return space.config_at([int(rng.integers(len(d))) for d in space.dimensions])


def categorical_density(
    observed: Sequence[int], n_choices: int, smoothing: float = SMOOTHING
) -> np.ndarray:
    """
    Smoothed frequency of each choice index: (count + s) / (n + s * K).
    """
    counts = np.bincount(np.asarray(observed, dtype=int), minlength=n_choices).astype(float)
    return (counts + smoothing) / (len(observed) + smoothing * n_choices)


def ordinal_density(observed: Sequence[int], n_points: int) -> np.ndarray:
    """
    Gaussian kernels over grid indices mixed with one uniform pseudo-observation.
    """
    grid = np.arange(n_points, dtype=float)
    density = np.full(n_points, 1.0 / n_points)
    if n_points == 1:
        return np.ones(1)
    bandwidth = max(1.0, (n_points - 1) / (1.0 + len(observed)))
    for x in observed:
        kernel = np.exp(-0.5 * ((grid - x) / bandwidth) ** 2)
        density = density + kernel / kernel.sum()
    return density / density.sum()


def _densities(points: np.ndarray, space: SearchSpace) -> List[np.ndarray]:
    out: List[np.ndarray] = []
    for d, dim in enumerate(space.dimensions):
        column = points[:, d] if len(points) else np.empty(0, dtype=int)
        if d < 2:
            out.append(categorical_density(column, len(dim)))
        else:
            out.append(ordinal_density(column, len(dim)))
    return out


def tpe_propose(
    history: Sequence[Observation],
    space: SearchSpace,
    rng: np.random.Generator,
    *,
    gamma: float = DEFAULT_GAMMA,
    n_candidates: int = DEFAULT_CANDIDATES,
    n_startup: int = DEFAULT_STARTUP,
) -> RuntimeConfig:
    """
    Propose the next configuration (fitness is maximized).

    Below ``n_startup`` observations, or for a single-point space, the draw is
    uniform. Otherwise the history is split at the gamma quantile into good
    and bad sets, ``n_candidates`` points are sampled from the good density
    and the one maximizing l(x)/g(x) wins. Already-evaluated points lose to
    any fresh candidate.
    """
    if not 0 < gamma < 1:
        raise InvalidParameter(f"gamma must lie in (0, 1), got {gamma}")
    if n_candidates < 1:
        raise InvalidParameter(f"n_candidates must be >= 1, got {n_candidates}")
    usable = [(c, f) for c, f in history if math.isfinite(f)]
    if space.size == 1 or len(usable) < max(2, n_startup):
        return random_propose(space, rng)

    fitness = np.array([f for _, f in usable])
    points = np.array([space.index_of(c) for c, _ in usable], dtype=int)
    order = np.argsort(-fitness, kind="stable")
    n_good = min(len(usable) - 1, max(1, math.ceil(gamma * len(usable))))
    good, bad = points[order[:n_good]], points[order[n_good:]]

    l_dens = _densities(good, space)
    g_dens = _densities(bad, space)
    seen = {tuple(p) for p in points.tolist()}

    best_idx: Tuple[int, ...] = ()
    best_key: Tuple[bool, float] = (False, -math.inf)
    for _ in range(n_candidates):
        idx = tuple(int(rng.choice(len(l), p=l)) for l in l_dens)
        score = float(sum(np.log(l[i]) - np.log(g[i]) for l, g, i in zip(l_dens, g_dens, idx)))
        key = (idx not in seen, score)
        if key > best_key:
            best_key, best_idx = key, idx
    return space.config_at(best_idx)
