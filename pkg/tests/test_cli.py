import copy
import re

import orjson
import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from servetune_api.cli import main

QUIET = ["--log-level", "ERROR"]
SMALL_SWEEP = [
    "--input-len", "32",
    "--output-len", "4",
    "--duration", "2",
    "--initial-rate", "8",
    "--budget", "3",
    "--backend", "sim",
]


def _json(output: str):
    return orjson.loads(output[output.index("{"): output.rindex("}") + 1])


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def job_file(tmp_path, tiny_job):
    path = tmp_path / "job.yaml"
    path.write_text(yaml.safe_dump(tiny_job))
    return path


def test_validate(runner, job_file):
    result = runner.invoke(main, [*QUIET, "validate", str(job_file)])
    assert result.exit_code == 0
    assert "valid: job 'tiny-quantize-tune'" in result.output


def test_validate_lists_bad_fields(runner, tmp_path, tiny_job):
    job = copy.deepcopy(tiny_job)
    del job["flow_params"]["num_trials"]
    path = tmp_path / "bad.json"
    path.write_bytes(orjson.dumps(job))
    result = runner.invoke(main, [*QUIET, "validate", str(path)])
    assert result.exit_code == 1
    assert "  - flow_params.num_trials" in result.output


def test_submit(runner, tmp_path, job_file):
    archive_dir = tmp_path / "archives"
    result = runner.invoke(main, [*QUIET, "submit", str(job_file), "--archive-dir", str(archive_dir)])
    assert result.exit_code == 0, result.output
    out = _json(result.output)
    assert out["status"] == "SUCCEEDED"
    assert out["archive"].endswith("tiny-quantize-tune.jsonl")
    assert (archive_dir / "tiny-quantize-tune.jsonl").exists()


def test_submit_exits_1_when_the_flow_fails(runner, tmp_path, tiny_job):
    tiny_job["flow_params"]["min_score"] = 2.0
    path = tmp_path / "job.yaml"
    path.write_text(yaml.safe_dump(tiny_job))
    result = runner.invoke(main, [*QUIET, "submit", str(path), "--archive-dir", str(tmp_path / "a")])
    assert result.exit_code == 1
    assert _json(result.output)["status"] == "FAILED"


def test_sweep_then_plot_stability(runner, tmp_path):
    archive = tmp_path / "sweep.jsonl"
    result = runner.invoke(main, [*QUIET, "sweep", *SMALL_SWEEP, "--archive", str(archive)])
    assert result.exit_code == 0, result.output
    out = _json(result.output)
    assert out["status"] == "FEASIBLE"
    assert out["trials"] == 3

    csv = tmp_path / "stability.csv"
    result = runner.invoke(main, [*QUIET, "plot-stability", str(archive), "--index", "0", "-o", str(csv)])
    assert result.exit_code == 0, result.output
    rows = int(re.search(r"wrote (\d+) rows", result.output).group(1))
    table = pd.read_csv(csv)
    assert len(table) == rows > 0
    assert list(table.columns) == [
        "label", "trial", "rate", "request_id", "arrival_s", "completion_s", "fitted_s",
    ]
    assert set(table["trial"]) == {0}

    result = runner.invoke(main, [*QUIET, "plot-stability", str(archive), "--label", "baseline"])
    assert result.exit_code == 2


def test_sweep_rejects_bad_options(runner):
    result = runner.invoke(main, [*QUIET, "sweep", *SMALL_SWEEP, "--slo", "e2e_latency:p97<=1s"])
    assert result.exit_code == 2
    result = runner.invoke(main, [*QUIET, "sweep", *SMALL_SWEEP, "--budget", "0"])
    assert result.exit_code == 2


def test_tune(runner, tmp_path):
    config = tmp_path / "tune.yaml"
    config.write_text(
        yaml.safe_dump(
            {"tuner": {"max_num_seqs_range": [16, 64], "max_batched_tokens_range": [512, 1024]}}
        )
    )
    result = runner.invoke(
        main,
        [*QUIET, "tune", "--config", str(config), *SMALL_SWEEP, "--trials", "2", "--seed", "1", "--gpu-budget", "2"],
    )
    assert result.exit_code == 0, result.output
    out = _json(result.output)
    assert out["trials"] == 2
    assert out["best_config"]["tensor_parallel"] in (1, 2)


def test_sim_trace(runner, tmp_path):
    path = tmp_path / "trace.jsonl"
    args = ["sim-trace", "--rate", "4", "--input-len", "32", "--output-len", "4", "--duration", "1"]
    result = runner.invoke(main, [*QUIET, *args, "-o", str(path)])
    assert result.exit_code == 0, result.output
    events = int(re.search(r"wrote (\d+) events", result.output).group(1))
    lines = path.read_bytes().splitlines()
    assert len(lines) == events > 0
    assert all("event" in orjson.loads(ln) for ln in lines)
