from __future__ import annotations

from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field, field_validator

from servetune_core.flows.archive import config_record
from servetune_core.flows.quantization import (
    LoadPatternParams,
    SimParams,
    SweepParams,
    TunerParams,
)
from servetune_core.models import LoadPattern, RuntimeConfig, SLOSpec, default_runtime_config

BackendType = Literal["sim", "http"]


class RuntimeConfigIn(BaseModel):
    """
    Serving configuration; unset fields default to an untuned config sized
    for the load pattern.
    """

    tensor_parallel: Optional[int] = Field(None, examples=[1, 2, 4, 8])
    data_parallel: Optional[int] = Field(None, ge=1)
    max_num_seqs: Optional[int] = Field(None, ge=1)
    max_batched_tokens: Optional[int] = Field(None, ge=1)
    max_context: Optional[int] = Field(None, ge=2)

    def build(self, pattern: LoadPattern) -> RuntimeConfig:
        base = default_runtime_config(pattern)
        overrides = {k: v for k, v in self.model_dump().items() if v is not None}
        return RuntimeConfig(**{**config_record(base), **overrides})


class _SLORequest(BaseModel):
    slos: List[str] = Field(default_factory=list, examples=[["e2e_latency:p95<=500ms"]])

    @field_validator("slos")
    @classmethod
    def _parse_slos(cls, v: List[str]) -> List[str]:
        SLOSpec.parse(*v)
        return v

    def slo_spec(self) -> SLOSpec:
        return SLOSpec.parse(*self.slos)


class SweepRequest(_SLORequest):
    load_pattern: LoadPatternParams = Field(default_factory=LoadPatternParams)
    sweep: SweepParams = Field(default_factory=SweepParams)
    runtime: RuntimeConfigIn = Field(default_factory=RuntimeConfigIn)
    backend: Optional[BackendType] = None
    sim: SimParams = Field(default_factory=SimParams)
    include_requests: bool = False


class TuneRequest(_SLORequest):
    load_pattern: LoadPatternParams = Field(default_factory=LoadPatternParams)
    sweep: SweepParams = Field(default_factory=SweepParams)
    tuner: TunerParams = Field(default_factory=TunerParams)
    gpu_budget: int = Field(8, ge=1)
    backend: Optional[BackendType] = None
    sim: SimParams = Field(default_factory=SimParams)


class SweepResponse(BaseModel):
    status: str
    best_rate: float
    lower_bound: float
    converged: bool
    trials: List[Dict[str, Any]]


class TuneResponse(BaseModel):
    best_config: Dict[str, int]
    best_fitness: float
    trials: List[Dict[str, Any]]


class ValidationResponse(BaseModel):
    valid: bool
    name: str
    flow: str
    required_params: List[str]


class JobResponse(BaseModel):
    name: str
    flow: str
    status: str
    failure_reason: Optional[str] = None
    q_star: Optional[Dict[str, Any]] = None
    c_star: Optional[Dict[str, Any]] = None
    archive: Optional[str] = None
    stages: List[Dict[str, Any]] = Field(default_factory=list)
