from __future__ import annotations

import logging
from fastapi import APIRouter, HTTPException
from fastapi.concurrency import run_in_threadpool

from servetune_api.deps import build_backend_factory
from servetune_api.schemas import SweepRequest, SweepResponse, TuneRequest, TuneResponse
from servetune_core.errors import BackendUnavailable, InvalidParameter, ServetuneError
from servetune_core.flows.archive import config_record, sweep_records, tuning_records
from servetune_core.models import SweepResult
from servetune_core.pipelines.tuner import TuneResult, build_search_space, run_tuning
from servetune_core.pipelines.sweep import run_sweep

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/v1/benchmarks", tags=["benchmarks"])


def execute_sweep(req: SweepRequest) -> SweepResult:
    """
    Run one standalone sweep against the requested backend.
    """
    pattern = req.load_pattern.build()
    config = req.runtime.build(pattern)
    config.validate_for(pattern)
    backend = build_backend_factory(req.backend, req.sim.model_dump())(config)
    return run_sweep(req.sweep.build(req.slo_spec()), pattern, backend)


def execute_tuning(req: TuneRequest) -> TuneResult:
    pattern = req.load_pattern.build()
    t = req.tuner
    space = build_search_space(
        pattern,
        gpu_budget=req.gpu_budget,
        max_num_seqs_range=t.max_num_seqs_range,
        max_batched_tokens_range=t.max_batched_tokens_range,
        data_parallel_choices=t.data_parallel_choices,
    )
    return run_tuning(
        space,
        pattern,
        req.slo_spec(),
        build_backend_factory(req.backend, req.sim.model_dump()),
        t.n_trials,
        0 if t.seed is None else t.seed,
        sweep_config=req.sweep.build(req.slo_spec()),
        penalty=t.penalty,
        parallelism=t.parallelism,
    )


def _http_error(e: Exception) -> HTTPException:
    if isinstance(e, BackendUnavailable):
        return HTTPException(status_code=503, detail=str(e))
    if isinstance(e, (InvalidParameter, ValueError)):
        return HTTPException(status_code=400, detail=str(e))
    return HTTPException(status_code=500, detail=f"Benchmark failed: {e}")


def sweep_response(sweep: SweepResult, include_requests: bool = False) -> SweepResponse:
    records = sweep_records("sweep", sweep, with_requests=include_requests)
    return SweepResponse(
        status=sweep.status.value,
        best_rate=sweep.best_rate,
        lower_bound=sweep.lower_bound,
        converged=sweep.converged,
        trials=records[:-1],
    )


def tune_response(result: TuneResult) -> TuneResponse:
    records = tuning_records(result)
    return TuneResponse(
        best_config=config_record(result.best_config),
        best_fitness=result.best_fitness,
        trials=records[:-1],
    )


@router.post("/sweep", response_model=SweepResponse)
async def sweep(req: SweepRequest) -> SweepResponse:
    """
    Find the highest request rate that meets the SLOs in steady state.
    """
    try:
        result = await run_in_threadpool(execute_sweep, req)
    except (ServetuneError, ValueError) as e:
        raise _http_error(e) from e
    return sweep_response(result, req.include_requests)


@router.post("/tune", response_model=TuneResponse)
async def tune(req: TuneRequest) -> TuneResponse:
    """
    Search serving configurations for the best per-GPU sustainable rate.
    """
    try:
        result = await run_in_threadpool(execute_tuning, req)
    except (ServetuneError, ValueError) as e:
        raise _http_error(e) from e
    return tune_response(result)

