import pytest

from servetune_core.errors import InvalidParameter
from servetune_core.models import (
    LoadPattern,
    MetricKind,
    RequestRecord,
    RequestStatus,
    RuntimeConfig,
    SLOSpec,
    compute_max_context,
    default_runtime_config,
)


@pytest.mark.parametrize(
    "input_len,output_len,expected",
    [(1200, 80, 1472), (1500, 1500, 3450), (1, 1, 3)],
)
def test_compute_max_context(input_len, output_len, expected):
    assert compute_max_context(LoadPattern(input_len=input_len, output_len=output_len)) == expected


def test_default_runtime_config_is_sized_for_the_pattern():
    cfg = default_runtime_config(LoadPattern(input_len=1200, output_len=80))
    assert cfg.max_context == 1472
    assert cfg.max_batched_tokens == 8192
    assert cfg.tensor_parallel == 1

    long_prompt = default_runtime_config(LoadPattern(input_len=10000, output_len=10))
    assert long_prompt.max_batched_tokens == 10000


@pytest.mark.parametrize(
    "kwargs",
    [
        {"input_len": 0, "output_len": 1},
        {"input_len": 10, "output_len": 0},
        {"input_len": 10, "output_len": 1, "prefix_len": 11},
        {"input_len": 10, "output_len": 1, "duration": 0},
    ],
)
def test_load_pattern_rejects_invalid_shapes(kwargs):
    with pytest.raises(InvalidParameter):
        LoadPattern(**kwargs)


def test_ok_record_needs_monotone_timestamps():
    with pytest.raises(InvalidParameter):
        RequestRecord(request_id=0, arrival_ts=1.0, first_token_ts=None, completion_ts=2.0, output_tokens=1)
    with pytest.raises(InvalidParameter):
        RequestRecord(request_id=0, arrival_ts=1.0, first_token_ts=3.0, completion_ts=2.0, output_tokens=1)

    failed = RequestRecord(request_id=1, arrival_ts=1.0, status=RequestStatus.TIMEOUT)
    assert failed.e2e_s is None
    assert not failed.ok


def test_record_latencies():
    r = RequestRecord(request_id=0, arrival_ts=1.0, first_token_ts=1.2, completion_ts=1.5, output_tokens=4)
    assert r.e2e_s == pytest.approx(0.5)
    assert r.ttft_s == pytest.approx(0.2)
    assert r.tpot_s == pytest.approx(0.1)

    single = RequestRecord(request_id=1, arrival_ts=0.0, first_token_ts=0.1, completion_ts=0.1, output_tokens=1)
    assert single.tpot_s is None


def test_slo_parse_with_margin():
    spec = SLOSpec.parse("e2e_latency:p95<=500ms", "tpot:p50<=10ms+5%")
    e2e, tpot = spec.constraints
    assert e2e.metric.kind is MetricKind.E2E_LATENCY
    assert e2e.metric.percentile == 95
    assert e2e.limit_ms == 500
    assert tpot.limit_ms == pytest.approx(10.5)
    assert not spec.is_throughput_oriented
    assert SLOSpec.parse().is_throughput_oriented


@pytest.mark.parametrize("text", ["e2e_latency:p97<=100", "latency:p95<=100", "ttft<=100", "ttft:p50<=0"])
def test_slo_parse_rejects_bad_constraints(text):
    with pytest.raises(InvalidParameter):
        SLOSpec.parse(text)


def test_slo_evaluate_fails_missing_metrics():
    spec = SLOSpec.parse("e2e_latency:p95<=500", "tpot:p50<=10")
    checks = spec.evaluate({"e2e_latency": {"p95": 480.0}})
    assert checks == {"e2e_latency:p95": True, "tpot:p50": False}


def test_runtime_config_invariants():
    with pytest.raises(InvalidParameter):
        RuntimeConfig(tensor_parallel=3)
    with pytest.raises(InvalidParameter):
        RuntimeConfig(max_num_seqs=0)

    cfg = RuntimeConfig(tensor_parallel=2, data_parallel=2, max_batched_tokens=512, max_context=600)
    assert cfg.gpus == 4
    with pytest.raises(InvalidParameter):
        cfg.validate_for(LoadPattern(input_len=1024, output_len=8))
    with pytest.raises(InvalidParameter):
        cfg.validate_for(LoadPattern(input_len=500, output_len=200))
    cfg.validate_for(LoadPattern(input_len=500, output_len=100))
