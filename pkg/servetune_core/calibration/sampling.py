from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, FrozenSet, List, Mapping, Protocol, Sequence

import numpy as np

from servetune_core.calibration.corpus import TokenCorpus, TokenSequence
from servetune_core.calibration.recipes import Recipe, SamplingStrategy
from servetune_core.errors import CorpusTooSmall, InvalidParameter

logger = logging.getLogger(__name__)

DEFAULT_STRATA = 4
MAX_SEED_ATTEMPTS = 8


class Sampler(Protocol):
    """
    Strategy interface: pick ``n`` distinct indices of a canonical corpus.
    """

    def sample(self, corpus: TokenCorpus, n: int, rng: np.random.Generator) -> List[int]: ...


@dataclass
class UniformSampler:
    def sample(self, corpus: TokenCorpus, n: int, rng: np.random.Generator) -> List[int]:
        return [int(i) for i in rng.choice(len(corpus), size=n, replace=False)]


@dataclass
class LengthWeightedSampler:
    """
    Sequential weighted draw without replacement, weight = sequence length.
    """

    def sample(self, corpus: TokenCorpus, n: int, rng: np.random.Generator) -> List[int]:
        weights = corpus.lengths
        p = weights / weights.sum()
        return [int(i) for i in rng.choice(len(corpus), size=n, replace=False, p=p)]


def mean_token_id(sequence: TokenSequence) -> float:
    return float(np.mean(sequence))


@dataclass
class TokenStratifiedSampler:
    """
    Quantile strata over a per-sequence token statistic, drawn proportionally.
    """

    strata: int = DEFAULT_STRATA
    statistic: Callable[[TokenSequence], float] = field(default=mean_token_id)

    def __post_init__(self) -> None:
        if self.strata < 1:
            raise InvalidParameter(f"strata must be >= 1, got {self.strata}")

    def partition(self, corpus: TokenCorpus) -> List[np.ndarray]:
        values = np.array([self.statistic(s) for s in corpus.sequences], dtype=float)
        # stable sort keeps content-key order among equal statistics
        order = np.argsort(values, kind="stable")
        return np.array_split(order, self.strata)

    def sample(self, corpus: TokenCorpus, n: int, rng: np.random.Generator) -> List[int]:
        groups = self.partition(corpus)
        allocation = proportional_allocation([len(g) for g in groups], n)
        picked: List[int] = []
        for group, k in zip(groups, allocation):
            if k:
                picked.extend(int(i) for i in rng.choice(group, size=k, replace=False))
        return picked


def proportional_allocation(sizes: Sequence[int], n: int) -> List[int]:
    """
    Split ``n`` across groups in proportion to ``sizes`` (largest remainder).
    """
    total = sum(sizes)
    if total == 0:
        return [0] * len(sizes)
    quotas = np.array(sizes, dtype=float) * n / total
    alloc = np.floor(quotas).astype(int)
    remainder = n - int(alloc.sum())
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[:remainder]:
        alloc[i] += 1
    return [int(min(a, s)) for a, s in zip(alloc, sizes)]


@dataclass
class RouterSampler:
    """
    Dispatch to a sampler based on the recipe's sampling strategy.
    """

    by_strategy: Mapping[SamplingStrategy, Sampler]
    fallback: Sampler

    def for_strategy(self, strategy: SamplingStrategy) -> Sampler:
        return self.by_strategy.get(strategy, self.fallback)


def build_default_sampler() -> RouterSampler:
    uniform = UniformSampler()
    return RouterSampler(
        by_strategy={
            SamplingStrategy.UNIFORM: uniform,
            SamplingStrategy.LENGTH_WEIGHTED: LengthWeightedSampler(),
            SamplingStrategy.TOKEN_STRATIFIED: TokenStratifiedSampler(),
        },
        fallback=uniform,
    )


_DEFAULT_SAMPLER = build_default_sampler()


def sample_calibration(
    corpus: TokenCorpus,
    recipe: Recipe,
    seed: int,
    *,
    sampler: RouterSampler = _DEFAULT_SAMPLER,
) -> TokenCorpus:
    """
    Draw the recipe's calibration subset; deterministic given ``seed`` and
    independent of the corpus' input order.
    """
    n = recipe.calibration_samples
    if len(corpus) < n:
        raise CorpusTooSmall(
            f"recipe {recipe.name} needs {n} sequences, corpus has {len(corpus)}"
        )
    canonical = corpus.canonical()
    if n == 0:
        picked: List[int] = []
    else:
        rng = np.random.default_rng(seed)
        picked = sampler.for_strategy(recipe.sampling_strategy).sample(canonical, n, rng)
    return TokenCorpus(
        sequences=tuple(canonical.sequences[i] for i in picked),
        provenance={
            "parent": corpus.fingerprint(),
            "recipe": recipe.name,
            "strategy": recipe.sampling_strategy.value,
            "seed": seed,
        },
    )


def derive_seed(base_seed: int, trial: int, attempt: int = 0) -> int:
    return int(np.random.SeedSequence([base_seed, trial, attempt]).generate_state(1)[0])


@dataclass(frozen=True)
class CalibrationDraw:
    trial: int
    seed: int
    subset: TokenCorpus
    attempts: int = 1


def sample_calibration_batch(
    corpus: TokenCorpus,
    recipe: Recipe,
    base_seed: int,
    n_trials: int,
    *,
    sampler: RouterSampler = _DEFAULT_SAMPLER,
) -> List[CalibrationDraw]:
    """
    One calibration subset per trial, pairwise distinct as sets.

    A colliding draw is re-derived from the next seed; when a corpus admits
    only one subset (no calibration, or n equal to the corpus size) the
    check is skipped. Raises CorpusTooSmall when the corpus cannot yield
    ``n_trials`` distinct subsets or a trial still collides after
    ``MAX_SEED_ATTEMPTS`` seeds.
    """
    if n_trials < 1:
        raise InvalidParameter(f"n_trials must be >= 1, got {n_trials}")
    n = recipe.calibration_samples
    check = 0 < n < len(corpus)
    if check and math.comb(len(corpus), n) < n_trials:
        raise CorpusTooSmall(
            f"{len(corpus)} sequences admit only {math.comb(len(corpus), n)} distinct "
            f"subsets of {n}, {n_trials} trials requested"
        )
    seen: List[FrozenSet[str]] = []
    draws: List[CalibrationDraw] = []
    for trial in range(n_trials):
        for attempt in range(MAX_SEED_ATTEMPTS):
            seed = derive_seed(base_seed, trial, attempt)
            subset = sample_calibration(corpus, recipe, seed, sampler=sampler)
            key = frozenset(subset.keys())
            if not check or key not in seen:
                break
            logger.info("Calibration subset for trial %d collided; re-deriving seed", trial)
        else:
            raise CorpusTooSmall(
                f"trial {trial} found no unused calibration subset after "
                f"{MAX_SEED_ATTEMPTS} seeds; corpus has {len(corpus)} sequences for n={n}"
            )
        seen.append(key)
        draws.append(CalibrationDraw(trial=trial, seed=seed, subset=subset, attempts=attempt + 1))
    return draws
