import orjson
import pytest

from servetune_core.errors import InvalidParameter
from servetune_core.flows.archive import (
    FlowArchive,
    FlowStatus,
    dump_records,
    header_record,
    read_archive,
    stability_table,
    sweep_records,
    write_records,
)
from servetune_core.models import SLOSpec
from servetune_core.pipelines.sweep import SweepConfig, run_sweep


@pytest.fixture
def short_sweep(single_slot_backend, single_slot_pattern):
    # rates 1, 2, 4: all below the single-slot capacity
    config = SweepConfig(initial_rate=1.0, budget=3)
    return run_sweep(config, single_slot_pattern, single_slot_backend)


def test_dump_records_sorts_keys_one_per_line():
    data = dump_records([{"b": 1, "a": 2}, {"record": "x"}])
    assert data == b'{"a":2,"b":1}\n{"record":"x"}\n'


def test_read_archive_checks_the_header(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_bytes(b"\n")
    with pytest.raises(InvalidParameter):
        read_archive(empty)

    headless = write_records([{"record": "sweep"}], tmp_path / "headless.jsonl")
    with pytest.raises(InvalidParameter):
        read_archive(headless)

    future = tmp_path / "future.jsonl"
    future.write_bytes(orjson.dumps({"record": "header", "schema_version": 2}) + b"\n")
    with pytest.raises(InvalidParameter):
        read_archive(future)

    garbage = tmp_path / "garbage.jsonl"
    garbage.write_bytes(b"not json\n")
    with pytest.raises(InvalidParameter):
        read_archive(garbage)


def test_sweep_records(short_sweep):
    records = sweep_records("sweep", short_sweep)
    assert [r["record"] for r in records] == ["sweep_trial"] * 3 + ["sweep"]
    assert [r["rate"] for r in records[:-1]] == [1.0, 2.0, 4.0]
    assert len(records[0]["requests"]) == 30
    assert records[-1]["best_rate"] == pytest.approx(4.0)
    assert not records[-1]["converged"]

    bare = sweep_records("sweep", short_sweep, with_requests=False)
    assert all("requests" not in r for r in bare)


def test_stability_table_from_an_archive(tmp_path, short_sweep):
    path = write_records(
        [header_record(job="bench"), *sweep_records("sweep", short_sweep)], tmp_path / "a.jsonl"
    )
    records = read_archive(path)

    table = stability_table(records)
    assert list(table.columns) == [
        "label", "trial", "rate", "request_id", "arrival_s", "completion_s", "fitted_s",
    ]
    assert len(table) == 30 + 60 + 120
    assert (table["completion_s"] > table["arrival_s"]).all()

    second = stability_table(records, label="sweep", index=1)
    assert len(second) == 60
    assert set(second["rate"]) == {2.0}

    with pytest.raises(InvalidParameter):
        stability_table(records, label="baseline")


def test_closed_loop_trial_is_left_out_of_the_table(single_slot_backend, single_slot_pattern):
    config = SweepConfig(initial_rate=1.0, budget=2, slos=SLOSpec.parse("e2e_latency:p95<=200ms"))
    result = run_sweep(config, single_slot_pattern, single_slot_backend)
    table = stability_table(sweep_records("sweep", result))
    assert 0 not in set(table["trial"])


def test_flow_archive_records():
    archive = FlowArchive({"name": "j", "flow": "quantization", "seed": 3})
    archive.add_records([{"record": "note"}])
    archive.finish(FlowStatus.FAILED, "no candidate passed")

    records = archive.to_records()
    assert [r["record"] for r in records] == ["header", "job", "note", "result"]
    assert records[0] == {
        "record": "header", "schema_version": 1, "job": "j", "flow": "quantization", "seed": 3,
    }
    assert records[-1]["status"] == "FAILED"
    assert records[-1]["failure_reason"] == "no candidate passed"
    assert not archive.succeeded
    assert archive.dumps().count(b"\n") == 4
