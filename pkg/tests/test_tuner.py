import threading

import numpy as np
import pytest

from servetune_core.backends.sim import SimBackend, SimServerModel, analytic_capacity
from servetune_core.errors import InvalidParameter
from servetune_core.ledger import ResourceLedger
from servetune_core.models import LoadPattern, RuntimeConfig, SLOSpec
from servetune_core.pipelines.sweep import SweepConfig
from servetune_core.pipelines.tpe import (
    SearchSpace,
    categorical_density,
    log2_grid,
    ordinal_density,
    tpe_propose,
)
from servetune_core.pipelines.tuner import (
    TuneTrial,
    build_search_space,
    fitness,
    optimize,
    run_tuning,
)


@pytest.mark.parametrize(
    "throughput,tp,violated,expected",
    [(8.0, 2, False, 4.0), (8.0, 2, True, -996.0), (0.0, 1, False, 0.0)],
)
def test_fitness(throughput, tp, violated, expected):
    assert fitness(throughput, tp, violated) == pytest.approx(expected)


def test_fitness_prefers_fewer_gpus_at_equal_rate():
    rng = np.random.default_rng(0)
    for _ in range(200):
        rate = float(rng.uniform(0.1, 100.0))
        small, large = sorted(rng.choice([1, 2, 4, 8], size=2, replace=False))
        assert fitness(rate, int(small), False) > fitness(rate, int(large), False)


def test_fitness_rejects_bad_inputs():
    with pytest.raises(InvalidParameter):
        fitness(1.0, 0, False)
    with pytest.raises(InvalidParameter):
        fitness(-1.0, 1, False)


def test_log2_grid():
    assert log2_grid(16, 1024) == (16, 32, 64, 128, 256, 512, 1024)
    assert log2_grid(3, 20) == (3, 4, 8, 16, 20)
    assert log2_grid(5, 5) == (5,)
    with pytest.raises(InvalidParameter):
        log2_grid(10, 5)


def test_categorical_density_closed_form():
    good = categorical_density([2, 2, 0], 3)
    bad = categorical_density([0, 0, 0, 0, 1, 1, 1], 3)
    assert good[2] == pytest.approx(3 / 6)
    assert bad[2] == pytest.approx(1 / 10)
    assert good.sum() == pytest.approx(1.0)


def test_ordinal_density_peaks_at_observations():
    density = ordinal_density([4, 4], 7)
    assert density.sum() == pytest.approx(1.0)
    assert int(np.argmax(density)) == 4
    assert ordinal_density([], 1).tolist() == [1.0]


def test_search_space_for_a_gpu_budget():
    pattern = LoadPattern(input_len=1200, output_len=80)
    space = build_search_space(pattern, gpu_budget=2)
    assert space.tensor_parallel_choices == (1, 2)
    assert space.max_batched_tokens_range == (1200, 32768)
    assert space.max_context == 1472
    assert all(c.max_batched_tokens >= 1200 for c in space.all_configs())
    assert len(space.all_configs()) == space.size

    cfg = space.all_configs()[5]
    assert space.config_at(space.index_of(cfg)) == cfg

    with pytest.raises(InvalidParameter):
        build_search_space(pattern, gpu_budget=2, data_parallel_choices=(4,))


def test_tpe_prefers_unseen_configs():
    space = SearchSpace(
        tensor_parallel_choices=(1, 2),
        max_num_seqs_range=(16, 16),
        max_batched_tokens_range=(512, 512),
    )
    seen = space.config_at((0, 0, 0, 0))
    history = [(seen, float(i)) for i in range(6)]
    proposal = tpe_propose(history, space, np.random.default_rng(0), n_candidates=64)
    assert proposal.tensor_parallel == 2


def _grid_space() -> SearchSpace:
    # 4 x 1 x 7 x 4 = 112 configs
    return SearchSpace(
        tensor_parallel_choices=(1, 2, 4, 8),
        max_num_seqs_range=(16, 1024),
        max_batched_tokens_range=(512, 4096),
    )


def _grid_objective(space: SearchSpace):
    def evaluate(config: RuntimeConfig) -> TuneTrial:
        tp, _, seqs, tokens = space.index_of(config)
        score = 100.0 - 3.0 * (tp - 1) ** 2 - 2.0 * (seqs - 4) ** 2 - 4.0 * (tokens - 2) ** 2
        return TuneTrial(config=config, fitness=score)

    return evaluate


def test_tpe_beats_random_search_on_a_known_grid():
    space = _grid_space()
    evaluate = _grid_objective(space)
    exhaustive = sorted((evaluate(c).fitness for c in space.all_configs()), reverse=True)
    top_decile = exhaustive[int(np.ceil(0.1 * len(exhaustive))) - 1]

    tpe_best, random_best = [], []
    for seed in range(20):
        tpe_best.append(optimize(space, evaluate, 30, seed).best_fitness)
        random_best.append(optimize(space, evaluate, 30, seed, sampler="random").best_fitness)

    assert sum(b >= top_decile for b in tpe_best) >= 18
    assert np.mean(tpe_best) > np.mean(random_best)


def _sim_grid_objective(pattern: LoadPattern):
    """Per-GPU fitness at the simulator's saturation throughput, memoized."""
    table = {}

    def evaluate(config: RuntimeConfig) -> TuneTrial:
        if config not in table:
            capacity = analytic_capacity(SimServerModel(config=config), pattern)
            table[config] = fitness(capacity, config.gpus, False)
        return TuneTrial(config=config, fitness=table[config])

    return evaluate


def test_tpe_finds_the_simulator_optimum_more_often_than_random():
    pattern = LoadPattern(input_len=256, output_len=64)
    space = build_search_space(
        pattern, gpu_budget=8, max_num_seqs_range=(16, 1024), max_batched_tokens_range=(512, 4096)
    )
    assert space.size == 112
    evaluate = _sim_grid_objective(pattern)
    ranked = sorted(space.all_configs(), key=lambda c: evaluate(c).fitness, reverse=True)
    optimum = ranked[0]
    assert (optimum.tensor_parallel, optimum.max_num_seqs, optimum.max_batched_tokens) == (1, 1024, 4096)
    top_decile = evaluate(ranked[int(np.ceil(0.1 * len(ranked))) - 1]).fitness

    tpe = [optimize(space, evaluate, 30, seed) for seed in range(20)]
    rnd = [optimize(space, evaluate, 30, seed, sampler="random") for seed in range(20)]

    assert sum(r.best_fitness >= top_decile for r in tpe) >= 18
    assert np.mean([r.best_fitness for r in tpe]) > np.mean([r.best_fitness for r in rnd])
    assert sum(r.best_config == optimum for r in tpe) > sum(r.best_config == optimum for r in rnd)


def test_optimize_is_reproducible():
    space = _grid_space()
    a = optimize(space, _grid_objective(space), 12, seed=5)
    b = optimize(space, _grid_objective(space), 12, seed=5)
    assert [t.config for t in a.trials] == [t.config for t in b.trials]
    assert a.best_fitness == max(t.fitness for t in a.trials)


def test_parallel_trials_respect_the_ledger():
    space = SearchSpace(tensor_parallel_choices=(1, 2), max_num_seqs_range=(16, 64))
    ledger = ResourceLedger(2)
    lock = threading.Lock()
    peak = []

    def evaluate(config):
        with lock:
            peak.append(ledger.allocated)
        return TuneTrial(config=config, fitness=float(config.max_num_seqs))

    result = optimize(space, evaluate, 8, seed=1, parallelism=2, ledger=ledger)
    assert len(result.trials) == 8
    assert max(peak) <= 2
    assert ledger.peak <= 2
    assert ledger.free == 2


def test_oversized_trial_is_penalized_not_run():
    space = SearchSpace(tensor_parallel_choices=(4,), max_num_seqs_range=(16, 16), max_batched_tokens_range=(512, 512))
    calls = []
    result = optimize(
        space,
        lambda c: calls.append(c) or TuneTrial(config=c, fitness=1.0),
        2,
        ledger=ResourceLedger(2),
    )
    assert calls == []
    assert all(t.error for t in result.trials)


def test_run_tuning_on_the_simulator():
    pattern = LoadPattern(input_len=32, output_len=4, duration=2.0)
    space = build_search_space(
        pattern, gpu_budget=2, max_num_seqs_range=(16, 64), max_batched_tokens_range=(512, 1024)
    )
    result = run_tuning(
        space,
        pattern,
        SLOSpec(),
        lambda config: SimBackend(SimServerModel(config=config)),
        3,
        seed=0,
        sweep_config=SweepConfig(initial_rate=8.0, budget=3),
    )
    assert len(result.trials) == 3
    assert all(t.sweep is not None for t in result.trials)
    assert result.best_fitness == max(t.fitness for t in result.trials)
    assert result.best_fitness > 0


def test_run_tuning_rejects_positive_penalty(small_pattern):
    with pytest.raises(InvalidParameter):
        run_tuning(_grid_space(), small_pattern, SLOSpec(), lambda c: None, 1, penalty=5.0)


def test_backend_failures_become_penalties(small_pattern):
    space = SearchSpace(tensor_parallel_choices=(1,), max_num_seqs_range=(16, 16), max_batched_tokens_range=(512, 512))

    def broken(config):
        raise RuntimeError("cannot start server")

    result = run_tuning(space, small_pattern, SLOSpec(), broken, 2, penalty=-50.0)
    assert [t.fitness for t in result.trials] == [-50.0, -50.0]
    assert "cannot start server" in result.trials[0].error
