import numpy as np
import pytest

from servetune_core.backends.sim import SimBackend, SimServerModel, measure_capacity
from servetune_core.errors import BackendUnavailable, InvalidParameter
from servetune_core.models import (
    LoadPattern,
    RuntimeConfig,
    SLOSpec,
    SweepDecision,
    SweepStatus,
    TrialMode,
)
from servetune_core.pipelines.sweep import SweepConfig, run_sweep

SINGLE_SLOT_CAPACITY = 8.0


def _decisions(result):
    return [t.decision for t in result.trials]


def test_single_slot_sweep_finds_capacity(single_slot_backend, single_slot_pattern):
    config = SweepConfig(initial_rate=1.0, threshold=0.25, relative_threshold=False)
    result = run_sweep(config, single_slot_pattern, single_slot_backend)

    assert result.status is SweepStatus.FEASIBLE
    assert result.best_rate == pytest.approx(SINGLE_SLOT_CAPACITY)
    assert result.converged
    assert [t.rate for t in result.trials] == [1.0, 2.0, 4.0, 8.0, 16.0, 12.0, 10.0, 9.0, 8.5]
    D = SweepDecision
    assert _decisions(result) == [D.DOUBLE] * 4 + [D.HALVE] * 4 + [D.CONVERGED]
    assert result.trials[-1].next_rate == pytest.approx(8.25)
    assert result.lower_bound == pytest.approx(0.5)


def test_fixed_lower_bound_bisects_from_the_initial_bound(single_slot_backend, single_slot_pattern):
    config = SweepConfig(
        initial_rate=1.0, threshold=0.25, relative_threshold=False, track_lower_bound=False
    )
    result = run_sweep(config, single_slot_pattern, single_slot_backend)
    assert [t.rate for t in result.trials] == [1.0, 2.0, 4.0, 8.0, 16.0]
    assert result.trials[-1].decision is SweepDecision.CONVERGED
    assert result.trials[-1].next_rate == pytest.approx(8.25)
    assert result.best_rate == pytest.approx(8.0)


def test_slo_sweep_starts_with_a_closed_loop_trial(single_slot_backend, single_slot_pattern):
    config = SweepConfig(
        initial_rate=1.0,
        threshold=0.25,
        relative_threshold=False,
        slos=SLOSpec.parse("e2e_latency:p95<=200ms"),
    )
    result = run_sweep(config, single_slot_pattern, single_slot_backend)
    baseline = result.trials[0]
    assert baseline.mode is TrialMode.CLOSED_LOOP
    assert baseline.decision is SweepDecision.BASELINE
    assert result.lower_bound == pytest.approx(8.0)
    assert result.best_rate == pytest.approx(8.0)
    assert all(t.mode is TrialMode.OPEN_LOOP for t in result.trials[1:])


def test_budget_exhaustion_keeps_the_best_pass(single_slot_backend, single_slot_pattern):
    config = SweepConfig(initial_rate=1.0, budget=3)
    result = run_sweep(config, single_slot_pattern, single_slot_backend)
    assert len(result.trials) == 3
    assert not result.converged
    assert result.status is SweepStatus.FEASIBLE
    assert result.best_rate == pytest.approx(4.0)


def test_pass_after_a_failure_bisects_towards_it(single_slot_backend, single_slot_pattern):
    config = SweepConfig(initial_rate=3.0, threshold=0.25, relative_threshold=False)
    result = run_sweep(config, single_slot_pattern, single_slot_backend)
    rates = [t.rate for t in result.trials]
    assert rates[:5] == [3.0, 6.0, 12.0, 9.0, 7.5]

    D = SweepDecision
    assert _decisions(result)[:5] == [D.DOUBLE, D.DOUBLE, D.HALVE, D.HALVE, D.BISECT]
    assert result.trials[4].next_rate == pytest.approx(8.25)
    for i, trial in enumerate(result.trials):
        if trial.decision is D.BISECT:
            failures = [t.rate for t in result.trials[:i] if not t.slo_pass]
            assert trial.rate < trial.next_rate < min(failures)
    assert result.converged
    assert 7.5 <= result.best_rate <= SINGLE_SLOT_CAPACITY * 1.05


def test_start_from_the_closed_loop_bound(single_slot_backend, single_slot_pattern):
    config = SweepConfig(initial_rate=1.0, start_from_lower_bound=True)
    result = run_sweep(config, single_slot_pattern, single_slot_backend)
    assert result.trials[0].mode is TrialMode.CLOSED_LOOP
    assert result.lower_bound == pytest.approx(SINGLE_SLOT_CAPACITY)
    open_loop = [t.rate for t in result.trials[1:]]
    assert open_loop == pytest.approx([8.0, 16.0, 12.0, 10.0, 9.0, 8.5])
    assert result.converged
    assert result.best_rate == pytest.approx(SINGLE_SLOT_CAPACITY)


def test_closed_loop_violation_is_infeasible():
    pattern = LoadPattern(input_len=1200, output_len=80, duration=5.0)
    backend = SimBackend(SimServerModel(config=RuntimeConfig(max_context=1472)))
    config = SweepConfig(slos=SLOSpec.parse("e2e_latency:p95<=500ms"))
    result = run_sweep(config, pattern, backend)
    assert result.status is SweepStatus.INFEASIBLE
    assert result.best_rate == 0.0
    assert len(result.trials) == 1
    assert result.trials[0].decision is SweepDecision.BASELINE


def test_no_passing_rate_is_infeasible(single_slot_backend):
    # too short for a stability fit, so no open-loop trial can pass
    pattern = LoadPattern(input_len=100, output_len=1, duration=2.0)
    result = run_sweep(SweepConfig(initial_rate=1.0, budget=4), pattern, single_slot_backend)
    assert result.status is SweepStatus.INFEASIBLE
    assert result.best_rate == 0.0


@pytest.mark.parametrize("seed", range(10, 20))
def test_sweep_lands_near_measured_capacity(seed):
    rng = np.random.default_rng(seed)
    config = RuntimeConfig(
        tensor_parallel=int(rng.choice([1, 2, 4])),
        max_num_seqs=int(rng.choice([8, 16, 32, 64])),
    )
    pattern = LoadPattern(
        input_len=int(rng.integers(64, 513)), output_len=int(rng.integers(8, 33)), duration=30.0
    )
    model = SimServerModel(config=config)
    capacity = measure_capacity(model, pattern, n_requests=10_000)
    sweep_config = SweepConfig(initial_rate=1.0, budget=12, start_from_lower_bound=True)
    result = run_sweep(sweep_config, pattern, SimBackend(model))
    assert result.status is SweepStatus.FEASIBLE
    assert result.best_rate == pytest.approx(capacity, rel=0.10)
    assert sum(t.mode is TrialMode.OPEN_LOOP for t in result.trials) <= 12


def test_config_validation():
    with pytest.raises(InvalidParameter):
        SweepConfig(initial_rate=0)
    with pytest.raises(InvalidParameter):
        SweepConfig(budget=0)
    assert SweepConfig(threshold=0.1).gap(20.0) == pytest.approx(2.0)
    assert SweepConfig(threshold=0.1, relative_threshold=False).gap(20.0) == pytest.approx(0.1)


class _Down:
    virtual_clock = True

    def health_check(self):
        raise BackendUnavailable("no server")


def test_unhealthy_backend_stops_the_sweep(small_pattern):
    with pytest.raises(BackendUnavailable):
        run_sweep(SweepConfig(), small_pattern, _Down())
