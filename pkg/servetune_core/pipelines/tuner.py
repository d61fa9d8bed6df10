from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from servetune_core.backends.base import InferenceBackend
from servetune_core.errors import InvalidParameter, ResourceExhausted, ServetuneError
from servetune_core.ledger import ResourceLedger
from servetune_core.models import (
    TENSOR_PARALLEL_SIZES,
    LoadPattern,
    RuntimeConfig,
    SLOSpec,
    SweepResult,
    SweepStatus,
    compute_max_context,
)
from servetune_core.pipelines.sweep import SweepConfig, run_sweep
from servetune_core.pipelines.tpe import (
    DEFAULT_CANDIDATES,
    DEFAULT_GAMMA,
    DEFAULT_STARTUP,
    Observation,
    SearchSpace,
    random_propose,
    tpe_propose,
)

logger = logging.getLogger(__name__)

DEFAULT_PENALTY = -1000.0

BackendFactory = Callable[[RuntimeConfig], InferenceBackend]


def fitness(
    throughput: float, tp: int, slo_violated: bool, penalty: float = DEFAULT_PENALTY
) -> float:
    """
    Per-GPU throughput plus ``penalty`` when the configuration violates its SLOs.
    """
    if tp < 1:
        raise InvalidParameter(f"tp must be >= 1, got {tp}")
    if throughput < 0:
        raise InvalidParameter(f"throughput must be >= 0, got {throughput}")
    return throughput / tp + (penalty if slo_violated else 0.0)


@dataclass(frozen=True)
class TuneTrial:
    config: RuntimeConfig
    fitness: float
    sweep: Optional[SweepResult] = None
    error: Optional[str] = None


@dataclass(frozen=True)
class TuneResult:
    """
    Best configuration plus every evaluated trial, in evaluation order.
    """

    best_config: RuntimeConfig
    best_fitness: float
    trials: Tuple[TuneTrial, ...]
    seed: int = 0
    space: Optional[SearchSpace] = field(default=None, compare=False)


def build_search_space(
    pattern: LoadPattern,
    *,
    gpu_budget: int = 8,
    max_num_seqs_range: Tuple[int, int] = (16, 1024),
    max_batched_tokens_range: Tuple[int, int] = (512, 32768),
    data_parallel_choices: Sequence[int] = (1,),
) -> SearchSpace:
    """
    Search space for a workload under a GPU budget.

    Tensor-parallel choices are limited to the budget; the token budget range
    is lifted so every config can prefill a whole prompt.
    """
    tp_choices = tuple(tp for tp in TENSOR_PARALLEL_SIZES if tp <= gpu_budget)
    if not tp_choices:
        raise InvalidParameter(f"gpu_budget {gpu_budget} cannot host any tensor-parallel size")
    dp_choices = tuple(
        dp for dp in data_parallel_choices if dp >= 1 and dp * min(tp_choices) <= gpu_budget
    )
    if not dp_choices:
        raise InvalidParameter("no data-parallel choice fits the GPU budget")
    lo, hi = max_batched_tokens_range
    lo = max(lo, pattern.input_len)
    hi = max(hi, lo)
    return SearchSpace(
        tensor_parallel_choices=tp_choices,
        max_num_seqs_range=max_num_seqs_range,
        max_batched_tokens_range=(lo, hi),
        max_context=compute_max_context(pattern),
        data_parallel_choices=dp_choices,
    )


def optimize(
    space: SearchSpace,
    evaluate: Callable[[RuntimeConfig], TuneTrial],
    n_trials: int,
    seed: int = 0,
    *,
    gamma: float = DEFAULT_GAMMA,
    n_candidates: int = DEFAULT_CANDIDATES,
    n_startup: int = DEFAULT_STARTUP,
    parallelism: int = 1,
    ledger: Optional[ResourceLedger] = None,
    sampler: str = "tpe",
) -> TuneResult:
    """
    Search loop shared by tuning and its benchmarks.

    With ``parallelism > 1`` configs are proposed in batches; pending ones
    are imputed with the worst observed fitness (constant liar) and every
    trial holds ``config.gpus`` slots of ``ledger`` while it runs.
    """
    if n_trials < 1:
        raise InvalidParameter(f"n_trials must be >= 1, got {n_trials}")
    if parallelism < 1:
        raise InvalidParameter(f"parallelism must be >= 1, got {parallelism}")
    if sampler not in ("tpe", "random"):
        raise InvalidParameter(f"unknown sampler {sampler!r}")

    rng = np.random.default_rng(seed)
    history: List[Observation] = []
    trials: List[TuneTrial] = []

    def propose(observed: Sequence[Observation]) -> RuntimeConfig:
        if sampler == "random":
            return random_propose(space, rng)
        return tpe_propose(
            observed, space, rng, gamma=gamma, n_candidates=n_candidates, n_startup=n_startup
        )

    while len(trials) < n_trials:
        batch_size = min(parallelism, n_trials - len(trials))
        batch: List[RuntimeConfig] = []
        for _ in range(batch_size):
            liar = min((f for _, f in history), default=0.0)
            batch.append(propose(history + [(c, liar) for c in batch]))

        if batch_size == 1:
            results = [_evaluate_reserved(evaluate, batch[0], ledger, len(trials))]
        else:
            with ThreadPoolExecutor(max_workers=batch_size) as pool:
                futures = [
                    pool.submit(_evaluate_reserved, evaluate, cfg, ledger, len(trials) + i)
                    for i, cfg in enumerate(batch)
                ]
                results = [f.result() for f in futures]

        for trial in results:
            trials.append(trial)
            history.append((trial.config, trial.fitness))
            logger.info(
                "Tuning trial %d/%d tp=%d dp=%d seqs=%d tokens=%d fitness=%.4f",
                len(trials),
                n_trials,
                trial.config.tensor_parallel,
                trial.config.data_parallel,
                trial.config.max_num_seqs,
                trial.config.max_batched_tokens,
                trial.fitness,
            )

    best = max(trials, key=lambda t: t.fitness)
    return TuneResult(
        best_config=best.config,
        best_fitness=best.fitness,
        trials=tuple(trials),
        seed=seed,
        space=space,
    )


def _evaluate_reserved(
    evaluate: Callable[[RuntimeConfig], TuneTrial],
    config: RuntimeConfig,
    ledger: Optional[ResourceLedger],
    number: int,
) -> TuneTrial:
    if ledger is None:
        return evaluate(config)
    try:
        with ledger.reserve(f"tune-trial-{number}", config.gpus):
            return evaluate(config)
    except ResourceExhausted as e:
        logger.warning("Skipping %s: %s", config, e)
        return TuneTrial(config=config, fitness=DEFAULT_PENALTY, error=str(e))


def sweep_objective(
    pattern: LoadPattern,
    slos: SLOSpec,
    backend_factory: BackendFactory,
    *,
    sweep_config: Optional[SweepConfig] = None,
    penalty: float = DEFAULT_PENALTY,
) -> Callable[[RuntimeConfig], TuneTrial]:
    """
    Objective running a full sweep on a fresh backend per configuration.
    """
    cfg = replace(sweep_config or SweepConfig(), slos=slos)

    def evaluate(config: RuntimeConfig) -> TuneTrial:
        try:
            config.validate_for(pattern)
            backend = backend_factory(config)
        except Exception as e:
            logger.warning("Backend construction failed for %s: %s", config, e)
            return TuneTrial(config=config, fitness=penalty, error=str(e))
        try:
            sweep = run_sweep(cfg, pattern, backend)
        except ServetuneError as e:
            logger.warning("Sweep failed for %s: %s", config, e)
            return TuneTrial(config=config, fitness=penalty, error=str(e))
        finally:
            close = getattr(backend, "close", None)
            if callable(close):
                close()
        violated = sweep.status is SweepStatus.INFEASIBLE
        score = fitness(sweep.best_rate, config.gpus, violated, penalty)
        return TuneTrial(config=config, fitness=score, sweep=sweep)

    return evaluate


def run_tuning(
    space: SearchSpace,
    pattern: LoadPattern,
    slos: SLOSpec,
    backend_factory: BackendFactory,
    n_trials: int,
    seed: int = 0,
    *,
    sweep_config: Optional[SweepConfig] = None,
    penalty: float = DEFAULT_PENALTY,
    parallelism: int = 1,
    ledger: Optional[ResourceLedger] = None,
) -> TuneResult:
    """
    TPE search where each proposal is benchmarked with a full sweep.
    """
    if not math.isfinite(penalty) or penalty > 0:
        raise InvalidParameter(f"penalty must be a finite value <= 0, got {penalty}")
    objective = sweep_objective(
        pattern, slos, backend_factory, sweep_config=sweep_config, penalty=penalty
    )
    result = optimize(
        space, objective, n_trials, seed, parallelism=parallelism, ledger=ledger
    )
    logger.info(
        "Tuning finished: best %s fitness=%.4f over %d trials",
        result.best_config,
        result.best_fitness,
        len(result.trials),
    )
    return result
