import threading

import pytest

from servetune_core.calibration.compression import ArtifactRef
from servetune_core.errors import (
    InvalidParameter,
    PersistentTrialError,
    PoolClosed,
    ResourceExhausted,
)
from servetune_core.faults import FailurePlan
from servetune_core.flows.evaluation import EvaluatedArtifact, MockScorer, select_representative
from servetune_core.flows.pool import StagePool, TrialStatus, list_schedule_makespan
from servetune_core.flows.storage import LocalStorage
from servetune_core.ledger import ResourceLedger


def test_ledger_accounting():
    ledger = ResourceLedger(4)
    ledger.allocate("a", 3)
    assert (ledger.allocated, ledger.free, ledger.peak) == (3, 1, 3)
    with pytest.raises(ResourceExhausted):
        ledger.allocate("b", 2)
    assert ledger.release("a") == 3
    assert ledger.release("a") == 0
    assert ledger.free == 4
    with pytest.raises(InvalidParameter):
        ledger.allocate("c", 0)
    with pytest.raises(InvalidParameter):
        ResourceLedger(0)


def test_reserve_blocks_until_slots_free():
    ledger = ResourceLedger(2)
    ledger.allocate("holder", 2)
    entered = threading.Event()

    def waiter():
        with ledger.reserve("waiter", 1):
            entered.set()

    thread = threading.Thread(target=waiter)
    thread.start()
    assert not entered.wait(0.05)
    ledger.release("holder")
    thread.join(timeout=2)
    assert entered.is_set()
    assert ledger.free == 2

    with pytest.raises(ResourceExhausted):
        with ledger.reserve("too-big", 3):
            pass


@pytest.mark.parametrize(
    "costs,workers,expected",
    [([2.0] * 5, 2, 6.0), ([3.0, 1.0, 1.0, 1.0], 2, 3.0), ([1.0, 2.0], 4, 2.0), ([], 2, 0.0)],
)
def test_list_schedule_makespan(costs, workers, expected):
    assert list_schedule_makespan(costs, workers) == pytest.approx(expected)


def test_pool_holds_slots_until_destroyed():
    ledger = ResourceLedger(3)
    pool = StagePool("compression", ledger, 2)
    assert ledger.free == 1
    pool.destroy()
    pool.destroy()
    assert ledger.free == 3
    assert pool.closed
    with pytest.raises(PoolClosed):
        pool.run([0], lambda t: t)


def test_pool_larger_than_budget_is_refused():
    with pytest.raises(ResourceExhausted):
        StagePool("evaluation", ResourceLedger(1), 2)


def test_outcomes_in_input_order_with_retries():
    plan = FailurePlan(transient={1: 1, 2: 3}, persistent=frozenset({3}))

    def work(trial):
        plan.check(trial)
        return trial * 10

    ledger = ResourceLedger(2)
    with StagePool("compression", ledger, 2, retry_budget=2) as pool:
        outcomes = pool.run([0, 1, 2, 3], work, cost=lambda _t, _v: 1.5)
        makespan = pool.makespan(outcomes)
    assert ledger.free == 2

    by_trial = {o.trial: o for o in outcomes}
    assert [o.trial for o in outcomes] == [0, 1, 2, 3]
    assert (by_trial[0].status, by_trial[0].value, by_trial[0].attempts) == (TrialStatus.OK, 0, 1)
    assert (by_trial[1].status, by_trial[1].attempts, by_trial[1].retries) == (TrialStatus.OK, 2, 1)
    assert (by_trial[2].status, by_trial[2].attempts) == (TrialStatus.FAILED, 3)
    assert (by_trial[3].status, by_trial[3].attempts) == (TrialStatus.FAILED, 1)
    assert "permanently" in by_trial[3].error
    assert [o.cost for o in outcomes] == [1.5, 3.0, 4.5, 1.5]
    assert makespan == pytest.approx(list_schedule_makespan([1.5, 3.0, 4.5, 1.5], 2))


def test_zero_retry_budget_fails_on_first_transient():
    plan = FailurePlan(transient={0: 1})
    with StagePool("evaluation", ResourceLedger(1), 1, retry_budget=0) as pool:
        [outcome] = pool.run([0], plan.check)
    assert outcome.status is TrialStatus.FAILED
    assert outcome.attempts == 1


def _artifact(trial, seed, fingerprint="f"):
    return ArtifactRef(
        trial=trial, seed=seed, recipe_name="w8", scheme="int_w8a8",
        path=f"m-w8-t{trial}/manifest.json", fingerprint=fingerprint, calibration_fingerprint="c",
    )


def test_representative_breaks_ties_on_lowest_seed():
    candidates = [
        EvaluatedArtifact(_artifact(0, 3), 0.80),
        EvaluatedArtifact(_artifact(1, 1), 0.82),
        EvaluatedArtifact(_artifact(2, 2), 0.82),
    ]
    assert select_representative(candidates).artifact.seed == 1
    with pytest.raises(InvalidParameter):
        select_representative([])


def test_mock_scorer_is_stable():
    scorer = MockScorer()
    score = scorer.score(_artifact(0, 0, "abc"))
    assert 0.0 <= score <= 1.0
    assert scorer.score(_artifact(5, 9, "abc")) == score
    assert scorer.score(_artifact(0, 0, "abd")) != score

    failing = MockScorer(failures=FailurePlan(persistent=frozenset({0})))
    with pytest.raises(PersistentTrialError):
        failing.score(_artifact(0, 0))


def test_local_storage(tmp_path):
    storage = LocalStorage(tmp_path / "out")
    passthrough = storage.fetch("acme/tiny-llm", tmp_path / "in")
    assert passthrough.local_path is None

    src = tmp_path / "data.jsonl"
    src.write_text("[1, 2]\n")
    fetched = storage.fetch(str(src), tmp_path / "in")
    assert fetched.local_path.read_text() == "[1, 2]\n"
    assert storage.fetch(f"file://{src}", tmp_path / "in2").local_path.exists()

    with pytest.raises(FileNotFoundError):
        storage.fetch("./does-not-exist.jsonl", tmp_path / "in")

    artifact_dir = tmp_path / "artifact"
    artifact_dir.mkdir()
    (artifact_dir / "manifest.json").write_text("{}")
    assert storage.upload(artifact_dir, "job/artifact") == "job/artifact"
    assert (tmp_path / "out" / "job" / "artifact" / "manifest.json").exists()
