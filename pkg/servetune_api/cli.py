from __future__ import annotations

import logging
import sys
from pathlib import Path
from typing import Any, Dict, NoReturn, Optional, Sequence

import click
import orjson
from dotenv import load_dotenv

from servetune_api.routes.benchmarks import execute_sweep, execute_tuning
from servetune_api.schemas import SweepRequest, TuneRequest
from servetune_core.backends.sim import SimBackend, SimServerModel
from servetune_core.config import configure_logging, get_archive_dir, get_trial_duration
from servetune_core.errors import SchemaViolation, ServetuneError
from servetune_core.flows.archive import (
    config_record,
    dump_records,
    header_record,
    read_archive,
    stability_table,
    sweep_records,
    tuning_records,
    write_records,
)
from servetune_core.flows.base import FlowContext
from servetune_core.flows.submit import load_job_file, validate_and_submit, validate_job
from servetune_core.loadgen.runner import TrialPlan, run_trial
from servetune_core.models import (
    ArrivalProcess,
    LoadPattern,
    RuntimeConfig,
    TrialMode,
    default_runtime_config,
)

logger = logging.getLogger(__name__)


def _echo_json(data: Any) -> None:
    click.echo(orjson.dumps(data, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS).decode())


def _fail(message: str, code: int = 2) -> NoReturn:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_request(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        return load_job_file(path)
    except ServetuneError as e:
        _fail(str(e))


def _merge(base: Dict[str, Any], section: str, **values: Any) -> None:
    given = {k: v for k, v in values.items() if v is not None}
    if given:
        base.setdefault(section, {}).update(given)


@click.group()
@click.option("--log-level", default=None, help="Overrides SERVETUNE_LOG_LEVEL.")
def main(log_level: Optional[str]) -> None:
    """Benchmark and tune LLM serving configurations."""
    load_dotenv()
    configure_logging(log_level.upper() if log_level else None)


@main.command()
@click.argument("job_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
def validate(job_file: Path) -> None:
    """Check a job file against its flow's schema."""
    try:
        validated = validate_job(load_job_file(job_file))
    except SchemaViolation as e:
        click.echo(f"invalid: {e}", err=True)
        for field in e.fields:
            click.echo(f"  - {field}", err=True)
        sys.exit(1)
    except ServetuneError as e:
        _fail(str(e), code=1)
    click.echo(f"valid: job {validated.spec.name!r} runs flow {validated.flow.name!r}")


@main.command()
@click.argument("job_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option(
    "--archive-dir",
    type=click.Path(file_okay=False, path_type=Path),
    default=None,
    help="Overrides SERVETUNE_ARCHIVE_DIR.",
)
def submit(job_file: Path, archive_dir: Optional[Path]) -> None:
    """Validate a job file and run its flow; exits 1 when the flow fails."""
    ctx = FlowContext.from_env()
    if archive_dir is not None:
        ctx = FlowContext(archive_dir=archive_dir, workspace_dir=archive_dir / "workspace")
    try:
        archive = validate_and_submit(load_job_file(job_file), ctx)
    except SchemaViolation as e:
        click.echo(f"invalid: {e}", err=True)
        sys.exit(2)
    except ServetuneError as e:
        _fail(str(e))
    _echo_json(
        {
            "status": archive.status.value if archive.status else None,
            "failure_reason": archive.failure_reason,
            "q_star": archive.q_star,
            "c_star": archive.c_star,
            "archive": str(archive.path) if archive.path else None,
        }
    )
    sys.exit(0 if archive.succeeded else 1)


def _pattern_options(fn: Any) -> Any:
    options = [
        click.option(
            "--config",
            "config_file",
            type=click.Path(exists=True, dir_okay=False, path_type=Path),
            default=None,
            help="JSON or YAML request file.",
        ),
        click.option("--input-len", type=int, default=None),
        click.option("--output-len", type=int, default=None),
        click.option("--prefix-len", type=int, default=None),
        click.option("--duration", type=float, default=None, help="Seconds per trial."),
        click.option("--slo", "slos", multiple=True, help='e.g. "e2e_latency:p95<=500ms"'),
        click.option("--initial-rate", type=float, default=None),
        click.option("--budget", type=int, default=None),
        click.option("--threshold", type=float, default=None),
        click.option("--absolute-threshold", is_flag=True, default=False),
        click.option("--poisson", is_flag=True, default=False, help="Poisson arrivals."),
        click.option("--backend", type=click.Choice(["sim", "http"]), default=None),
        click.option(
            "--archive",
            "archive_path",
            type=click.Path(dir_okay=False, path_type=Path),
            default=None,
            help="Write a JSON-lines archive.",
        ),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _common_request(
    config_file: Optional[Path],
    input_len: Optional[int],
    output_len: Optional[int],
    prefix_len: Optional[int],
    duration: Optional[float],
    slos: Sequence[str],
    initial_rate: Optional[float],
    budget: Optional[int],
    threshold: Optional[float],
    absolute_threshold: bool,
    poisson: bool,
    backend: Optional[str],
) -> Dict[str, Any]:
    data = _load_request(config_file)
    _merge(
        data,
        "load_pattern",
        input_len=input_len,
        output_len=output_len,
        prefix_len=prefix_len,
        duration=duration,
    )
    _merge(
        data,
        "sweep",
        initial_rate=initial_rate,
        budget=budget,
        threshold=threshold,
        relative_threshold=False if absolute_threshold else None,
        arrival_process="POISSON" if poisson else None,
    )
    if slos:
        data["slos"] = list(slos)
    if backend:
        data["backend"] = backend
    return data


@main.command()
@_pattern_options
@click.option("--tp", "tensor_parallel", type=int, default=None)
@click.option("--max-num-seqs", type=int, default=None)
@click.option("--max-batched-tokens", type=int, default=None)
def sweep(
    config_file: Optional[Path],
    input_len: Optional[int],
    output_len: Optional[int],
    prefix_len: Optional[int],
    duration: Optional[float],
    slos: Sequence[str],
    initial_rate: Optional[float],
    budget: Optional[int],
    threshold: Optional[float],
    absolute_threshold: bool,
    poisson: bool,
    backend: Optional[str],
    archive_path: Optional[Path],
    tensor_parallel: Optional[int],
    max_num_seqs: Optional[int],
    max_batched_tokens: Optional[int],
) -> None:
    """Run one maximum-sustainable-rate sweep."""
    data = _common_request(
        config_file, input_len, output_len, prefix_len, duration, slos,
        initial_rate, budget, threshold, absolute_threshold, poisson, backend,
    )
    _merge(
        data,
        "runtime",
        tensor_parallel=tensor_parallel,
        max_num_seqs=max_num_seqs,
        max_batched_tokens=max_batched_tokens,
    )
    try:
        req = SweepRequest.model_validate(data)
        result = execute_sweep(req)
    except (ServetuneError, ValueError) as e:
        _fail(str(e))
    if archive_path is not None:
        write_records(
            [
                header_record(job="sweep", flow="sweep", seed=req.load_pattern.seed),
                *sweep_records("sweep", result),
            ],
            archive_path,
        )
    _echo_json(
        {
            "status": result.status.value,
            "best_rate": result.best_rate,
            "lower_bound": result.lower_bound,
            "converged": result.converged,
            "trials": len(result.trials),
        }
    )


@main.command()
@_pattern_options
@click.option("--trials", "n_trials", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--gpu-budget", type=int, default=None)
@click.option("--parallelism", type=int, default=None)
def tune(
    config_file: Optional[Path],
    input_len: Optional[int],
    output_len: Optional[int],
    prefix_len: Optional[int],
    duration: Optional[float],
    slos: Sequence[str],
    initial_rate: Optional[float],
    budget: Optional[int],
    threshold: Optional[float],
    absolute_threshold: bool,
    poisson: bool,
    backend: Optional[str],
    archive_path: Optional[Path],
    n_trials: Optional[int],
    seed: Optional[int],
    gpu_budget: Optional[int],
    parallelism: Optional[int],
) -> None:
    """Search serving configurations with TPE."""
    data = _common_request(
        config_file, input_len, output_len, prefix_len, duration, slos,
        initial_rate, budget, threshold, absolute_threshold, poisson, backend,
    )
    _merge(data, "tuner", n_trials=n_trials, seed=seed, parallelism=parallelism)
    if gpu_budget is not None:
        data["gpu_budget"] = gpu_budget
    try:
        req = TuneRequest.model_validate(data)
        result = execute_tuning(req)
    except (ServetuneError, ValueError) as e:
        _fail(str(e))
    if archive_path is not None:
        write_records(
            [header_record(job="tune", flow="tune", seed=result.seed), *tuning_records(result)],
            archive_path,
        )
    _echo_json(
        {
            "best_config": config_record(result.best_config),
            "best_fitness": result.best_fitness,
            "trials": len(result.trials),
        }
    )


@main.command("plot-stability")
@click.argument("archive", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--label", default=None, help="Only trials of this sweep label.")
@click.option("--index", type=int, default=None, help="Only this trial index.")
@click.option("--output", "-o", type=click.Path(dir_okay=False, path_type=Path), default=None)
def plot_stability(
    archive: Path, label: Optional[str], index: Optional[int], output: Optional[Path]
) -> None:
    """Emit the arrival/completion regression of archived trials as CSV."""
    try:
        frame = stability_table(read_archive(archive), label=label, index=index)
    except ServetuneError as e:
        _fail(str(e))
    if output is None:
        click.echo(frame.to_csv(index=False), nl=False)
    else:
        frame.to_csv(output, index=False)
        click.echo(f"wrote {len(frame)} rows to {output}")


@main.command("sim-trace")
@click.option("--rate", type=float, required=True, help="Requests per second.")
@click.option("--input-len", type=int, default=256)
@click.option("--output-len", type=int, default=64)
@click.option("--prefix-len", type=int, default=0)
@click.option("--duration", type=float, default=None, help="Seconds of submission.")
@click.option("--tp", "tensor_parallel", type=int, default=1)
@click.option("--max-num-seqs", type=int, default=None)
@click.option("--max-batched-tokens", type=int, default=None)
@click.option("--poisson", is_flag=True, default=False)
@click.option("--output", "-o", type=click.Path(dir_okay=False, path_type=Path), default=None)
def sim_trace(
    rate: float,
    input_len: int,
    output_len: int,
    prefix_len: int,
    duration: Optional[float],
    tensor_parallel: int,
    max_num_seqs: Optional[int],
    max_batched_tokens: Optional[int],
    poisson: bool,
    output: Optional[Path],
) -> None:
    """Run one simulated open-loop trial and dump its scheduler events."""
    try:
        pattern = LoadPattern(
            input_len=input_len,
            output_len=output_len,
            prefix_len=prefix_len,
            duration=duration or get_trial_duration(),
        )
        base = default_runtime_config(pattern)
        config = RuntimeConfig(
            tensor_parallel=tensor_parallel,
            max_num_seqs=max_num_seqs or base.max_num_seqs,
            max_batched_tokens=max_batched_tokens or base.max_batched_tokens,
            max_context=base.max_context,
        )
        backend = SimBackend(SimServerModel(config=config), capture_trace=True)
        result = run_trial(
            TrialPlan(
                mode=TrialMode.OPEN_LOOP,
                pattern=pattern,
                rate=rate,
                arrival_process=ArrivalProcess.POISSON if poisson else ArrivalProcess.DETERMINISTIC,
            ),
            backend,
        )
    except ServetuneError as e:
        _fail(str(e))
    body = dump_records(backend.last_trace)
    if output is None:
        click.echo(body.decode(), nl=False)
    else:
        output.write_bytes(body)
        click.echo(f"wrote {len(backend.last_trace)} events to {output}")
    logger.info("Trace trial at %.3f req/s: slo_pass=%s", rate, result.slo_pass)


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8080)
def serve(host: str, port: int) -> None:
    """Run the HTTP API."""
    import uvicorn

    logger.info("Serving on %s:%d, archives in %s", host, port, get_archive_dir())
    uvicorn.run("servetune_api.main:app", host=host, port=port)


if __name__ == "__main__":
    main()
