from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator, model_validator

from servetune_core.backends.sim import SimBackend, SimServerModel
from servetune_core.calibration.compression import (
    ArtifactRef,
    CompressionBackend,
    MockCompressionBackend,
    Optimizer,
)
from servetune_core.calibration.corpus import TokenCorpus, load_corpus, synthetic_corpus
from servetune_core.calibration.recipes import Recipe, get_recipe
from servetune_core.calibration.sampling import CalibrationDraw, sample_calibration_batch
from servetune_core.config import get_trial_duration
from servetune_core.errors import (
    CorpusTooSmall,
    InvalidParameter,
    PersistentTrialError,
    ServetuneError,
    UnknownRecipe,
)
from servetune_core.faults import FailurePlan
from servetune_core.flows.archive import (
    FlowArchive,
    FlowStatus,
    config_record,
    sweep_records,
    tuning_records,
)
from servetune_core.flows.base import (
    ArtifactBackendFactory,
    FlowContext,
    JobSpec,
    registry,
)
from servetune_core.flows.evaluation import EvaluatedArtifact, MockScorer, Scorer, select_representative
from servetune_core.flows.pool import (
    DEFAULT_RETRY_BUDGET,
    StagePool,
    TrialOutcome,
    TrialStatus,
    excluded,
    list_schedule_makespan,
)
from servetune_core.flows.storage import FetchedInput
from servetune_core.ledger import ResourceLedger
from servetune_core.models import (
    ArrivalProcess,
    LoadPattern,
    RuntimeConfig,
    SLOSpec,
    SweepResult,
    default_runtime_config,
)
from servetune_core.pipelines.sweep import SweepConfig, run_sweep
from servetune_core.pipelines.tuner import DEFAULT_PENALTY, build_search_space, run_tuning

logger = logging.getLogger(__name__)

QUANTIZATION_REQUIRED = ("quantization_recipe", "num_trials")


class _Params(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FailureParams(_Params):
    transient: Dict[int, int] = Field(default_factory=dict)
    persistent: List[int] = Field(default_factory=list)

    def build(self) -> Optional[FailurePlan]:
        return FailurePlan.from_mapping(self.model_dump())


class CompressionMockParams(_Params):
    base_cost: float = Field(1.0, ge=0)
    cost_per_sample: float = Field(0.001, ge=0)
    failures: FailureParams = Field(default_factory=FailureParams)


class EvaluationMockParams(_Params):
    cost: float = Field(0.5, ge=0)
    failures: FailureParams = Field(default_factory=FailureParams)


class MockParams(_Params):
    compression: CompressionMockParams = Field(default_factory=CompressionMockParams)
    evaluation: EvaluationMockParams = Field(default_factory=EvaluationMockParams)


class CorpusParams(_Params):
    """Synthetic corpus drawn when the job names no dataset."""

    size: int = Field(1024, ge=1)
    min_len: int = Field(16, ge=1)
    max_len: int = Field(256, ge=1)


class LoadPatternParams(_Params):
    input_len: int = Field(256, ge=1)
    output_len: int = Field(64, ge=1)
    prefix_len: int = Field(0, ge=0)
    duration: float = Field(default_factory=get_trial_duration, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _consistent(self) -> "LoadPatternParams":
        self.build()
        return self

    def build(self) -> LoadPattern:
        return LoadPattern(**self.model_dump())


class SweepParams(_Params):
    initial_rate: float = Field(1.0, gt=0)
    budget: int = Field(12, ge=1)
    threshold: float = Field(0.05, gt=0)
    relative_threshold: bool = True
    tolerance: float = Field(0.05, ge=0.005, le=0.2)
    timeout: float = Field(60.0, gt=0)
    arrival_process: ArrivalProcess = ArrivalProcess.DETERMINISTIC
    track_lower_bound: bool = True
    start_from_lower_bound: bool = False

    @field_validator("arrival_process", mode="before")
    @classmethod
    def _upper(cls, v: Any) -> Any:
        return v.upper() if isinstance(v, str) else v

    def build(self, slos: SLOSpec) -> SweepConfig:
        return SweepConfig(slos=slos, **self.model_dump())


class TunerParams(_Params):
    n_trials: int = Field(30, ge=1)
    seed: Optional[int] = None
    max_num_seqs_range: Tuple[int, int] = (16, 1024)
    max_batched_tokens_range: Tuple[int, int] = (512, 32768)
    data_parallel_choices: List[int] = Field(default_factory=lambda: [1])
    parallelism: int = Field(1, ge=1)
    penalty: float = Field(DEFAULT_PENALTY, le=0)


class SimParams(_Params):
    prefill_rate: float = Field(40000.0, gt=0)
    efficiency: float = Field(0.85, gt=0, le=1)
    decode_step_base: float = Field(0.008, gt=0)
    decode_token_cost: float = Field(0.0004, gt=0)
    prefix_cache: bool = True

    def build(self) -> SimServerModel:
        return SimServerModel.from_mapping(self.model_dump())


class QuantizationParams(_Params):
    """
    Parameters of the ``quantization`` flow.
    """

    recipes: List[Dict[str, Any]] = Field(default_factory=list)
    quantization_recipe: str
    num_trials: int = Field(..., ge=1)
    retry_budget: int = Field(DEFAULT_RETRY_BUDGET, ge=0)
    min_score: float = 0.0
    corpus: CorpusParams = Field(default_factory=CorpusParams)
    mock: MockParams = Field(default_factory=MockParams)

    @field_validator("recipes")
    @classmethod
    def _check_recipes(cls, v: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
        for data in v:
            Recipe.from_mapping(data)
        return v

    @field_validator("quantization_recipe")
    @classmethod
    def _known_recipe(cls, v: str, info: ValidationInfo) -> str:
        declared = [Recipe.from_mapping(d) for d in info.data.get("recipes", [])]
        if any(r.name.lower() == v.lower() for r in declared):
            return v
        try:
            get_recipe(v)
        except UnknownRecipe as e:
            raise ValueError(str(e)) from None
        return v

    def recipe(self) -> Recipe:
        for data in self.recipes:
            declared = Recipe.from_mapping(data)
            if declared.name.lower() == self.quantization_recipe.lower():
                return declared
        return get_recipe(self.quantization_recipe)


class QuantizeTuneParams(QuantizationParams):
    """
    Parameters of the ``quantize_tune`` flow.
    """

    include_baseline: bool = False
    load_pattern: LoadPatternParams = Field(default_factory=LoadPatternParams)
    slos: List[str] = Field(default_factory=list, examples=[["e2e_latency:p95<=500ms"]])
    sweep: SweepParams = Field(default_factory=SweepParams)
    tuner: TunerParams = Field(default_factory=TunerParams)
    sim: SimParams = Field(default_factory=SimParams)

    @field_validator("slos")
    @classmethod
    def _parse_slos(cls, v: List[str]) -> List[str]:
        SLOSpec.parse(*v)
        return v

    def slo_spec(self) -> SLOSpec:
        return SLOSpec.parse(*self.slos)


def sim_backend_factory(model: SimServerModel) -> ArtifactBackendFactory:
    """
    Simulated server for a config; compressed artifacts run at their scheme's speed.
    """

    def factory(config: RuntimeConfig, artifact: Optional[ArtifactRef]) -> SimBackend:
        sized = model.with_config(config)
        if artifact is not None:
            sized = sized.with_scheme(artifact.scheme)
        return SimBackend(sized)

    return factory


def sweep_virtual_time(sweep: SweepResult) -> float:
    """Simulated seconds spent driving every trial of a sweep."""
    total = 0.0
    for trial in sweep.trials:
        stamps = [r.completion_ts or r.arrival_ts for r in trial.records]
        total += max(stamps, default=0.0)
    return total


@dataclass
class _Candidate:
    draw: CalibrationDraw
    artifact: Optional[ArtifactRef] = None


class QuantizationFlowRun:
    """
    One execution of the staged flow.

    Stages run strictly one after another; each pool is destroyed, and its
    ledger slots returned, before the next stage starts.
    """

    def __init__(self, spec: JobSpec, params: QuantizationParams, ctx: FlowContext) -> None:
        self.spec = spec
        self.params = params
        self.ctx = ctx
        self.ledger = ResourceLedger(spec.resources)
        self.archive = FlowArchive(spec.model_dump(mode="json"))
        self.workspace = ctx.workspace_dir / spec.slug
        self.artifact_root = self.workspace / "artifacts"
        mock = params.mock
        self.compression: CompressionBackend = ctx.compression_backend or MockCompressionBackend(
            base_cost=mock.compression.base_cost,
            cost_per_sample=mock.compression.cost_per_sample,
            failures=mock.compression.failures.build(),
        )
        self.scorer: Scorer = ctx.scorer or MockScorer(
            failures=mock.evaluation.failures.build(), cost=mock.evaluation.cost
        )

    def execute(self, *, tune: bool) -> FlowArchive:
        logger.info("Starting flow %s for job %s", self.spec.flow, self.spec.name)
        try:
            corpus = self._fetch()
        except (OSError, InvalidParameter) as e:
            self.archive.add_stage(
                "fetch", workers=0, makespan=0.0, ledger_free=self.ledger.free,
                extra={"status": TrialStatus.FAILED.value, "error": str(e)},
            )
            return self._finish(FlowStatus.FAILED, f"fetch failed: {e}")

        recipe = self.params.recipe()
        try:
            draws = sample_calibration_batch(
                corpus, recipe, self.spec.seed, self.params.num_trials
            )
        except CorpusTooSmall as e:
            return self._finish(FlowStatus.FAILED, f"calibration sampling failed: {e}")

        candidates = self._compress(recipe, draws)
        evaluated = self._evaluate(candidates)
        if not evaluated:
            return self._finish(
                FlowStatus.FAILED, "no candidate passed compression and evaluation"
            )

        chosen = select_representative(evaluated)
        self.archive.q_star = {**chosen.artifact.to_dict(), "score": chosen.score}
        logger.info("Selected trial %d (score %.4f)", chosen.artifact.trial, chosen.score)

        if tune and isinstance(self.params, QuantizeTuneParams):
            self._benchmark(self.params, chosen.artifact)
            self._tune(self.params, chosen.artifact)
        self._persist(chosen.artifact)
        return self._finish(FlowStatus.SUCCEEDED)

    def _fetch(self) -> TokenCorpus:
        inputs = self.workspace / "inputs"
        storage = self.ctx.storage
        assert storage is not None
        model: FetchedInput = storage.fetch(self.spec.model, inputs)
        if self.spec.dataset:
            fetched = storage.fetch(self.spec.dataset, inputs)
            if fetched.local_path is None:
                raise InvalidParameter(f"dataset {self.spec.dataset} is not a local file")
            corpus = load_corpus(fetched.local_path)
        else:
            c = self.params.corpus
            corpus = synthetic_corpus(
                c.size, seed=self.spec.seed, min_len=c.min_len, max_len=max(c.min_len, c.max_len)
            )
        self.archive.add_stage(
            "fetch",
            workers=0,
            makespan=0.0,
            ledger_free=self.ledger.free,
            extra={
                "status": TrialStatus.OK.value,
                "model": model.ref,
                "model_local": model.local_path is not None,
                "dataset": self.spec.dataset,
                "corpus_size": len(corpus),
                "corpus_fingerprint": corpus.fingerprint(),
            },
        )
        return corpus

    def _compress(self, recipe: Recipe, draws: List[CalibrationDraw]) -> Dict[int, _Candidate]:
        strategy = recipe.create()
        optimizer = Optimizer(self.compression)
        by_trial = {d.trial: _Candidate(draw=d) for d in draws}
        workers = min(self.spec.resources, len(draws))

        def compress(trial: int) -> ArtifactRef:
            draw = by_trial[trial].draw
            return optimizer.run_pipeline(
                self.spec.model,
                self.artifact_root,
                strategy,
                draw.subset,
                trial=trial,
                seed=draw.seed,
            )

        with StagePool(
            "compression", self.ledger, workers, retry_budget=self.params.retry_budget
        ) as pool:
            outcomes = pool.run(
                list(by_trial),
                compress,
                cost=lambda _t, _v: self.compression.estimate_cost(strategy),
            )
            makespan = pool.makespan(outcomes)

        details: Dict[int, Dict[str, Any]] = {}
        for o in outcomes:
            cand = by_trial[o.trial]
            cand.artifact = o.value
            details[o.trial] = {
                "seed": cand.draw.seed,
                "calibration_samples": len(cand.draw.subset),
                "calibration_fingerprint": cand.draw.subset.fingerprint(),
                "calibration_attempts": cand.draw.attempts,
                "artifact": o.value.to_dict() if o.value else None,
            }
        self._stage_done("compression", workers, makespan, outcomes, details)
        return by_trial

    def _evaluate(self, candidates: Dict[int, _Candidate]) -> List[EvaluatedArtifact]:
        ready = {t: c.artifact for t, c in candidates.items() if c.artifact is not None}
        min_score = self.params.min_score
        scores: Dict[int, float] = {}

        def evaluate(trial: int) -> float:
            score = self.scorer.score(ready[trial])
            if score < min_score:
                raise PersistentTrialError(f"score {score:.4f} is below min_score {min_score}")
            scores[trial] = score
            return score

        outcomes: List[TrialOutcome[Any]] = []
        workers = 0
        makespan = 0.0
        if ready:
            workers = min(self.spec.resources, len(ready))
            with StagePool(
                "evaluation", self.ledger, workers, retry_budget=self.params.retry_budget
            ) as pool:
                outcomes = pool.run(
                    list(ready),
                    evaluate,
                    cost=lambda _t, _v: getattr(self.scorer, "cost", 0.0),
                )
                makespan = pool.makespan(outcomes)
        outcomes.extend(
            excluded(t, "compression failed") for t in candidates if t not in ready
        )
        outcomes.sort(key=lambda o: o.trial)
        details = {t: {"score": s} for t, s in scores.items()}
        self._stage_done("evaluation", workers, makespan, outcomes, details)
        return [
            EvaluatedArtifact(artifact=ready[o.trial], score=o.value)
            for o in outcomes
            if o.status is TrialStatus.OK
        ]

    def _benchmark(self, params: QuantizeTuneParams, artifact: ArtifactRef) -> None:
        pattern = params.load_pattern.build()
        config = default_runtime_config(pattern)
        sweep_config = params.sweep.build(params.slo_spec())
        factory = self._backend_factory(params)
        targets: List[Tuple[str, Optional[ArtifactRef]]] = [("q_star", artifact)]
        if params.include_baseline:
            targets.append(("baseline", None))

        def bench(index: int) -> SweepResult:
            _label, target = targets[index]
            return run_sweep(sweep_config, pattern, factory(config, target))

        workers = min(self.spec.resources // config.gpus or 1, len(targets))
        with StagePool(
            "benchmark",
            self.ledger,
            workers,
            retry_budget=params.retry_budget,
            slots_per_worker=config.gpus,
        ) as pool:
            outcomes = pool.run(
                list(range(len(targets))),
                bench,
                cost=lambda _i, sweep: sweep_virtual_time(sweep) if sweep else 0.0,
            )
            makespan = pool.makespan(outcomes)

        details: Dict[int, Dict[str, Any]] = {}
        for o in outcomes:
            label = targets[o.trial][0]
            details[o.trial] = {"label": label}
            if o.value is not None:
                details[o.trial].update(
                    {"sweep_status": o.value.status.value, "best_rate": o.value.best_rate}
                )
                self.archive.add_records(sweep_records(label, o.value))
        self._stage_done(
            "benchmark", workers, makespan, outcomes, details,
            extra={"config": config_record(config)},
        )

    def _tune(self, params: QuantizeTuneParams, artifact: ArtifactRef) -> None:
        pattern = params.load_pattern.build()
        factory = self._backend_factory(params)
        t = params.tuner
        try:
            space = build_search_space(
                pattern,
                gpu_budget=self.spec.resources,
                max_num_seqs_range=t.max_num_seqs_range,
                max_batched_tokens_range=t.max_batched_tokens_range,
                data_parallel_choices=t.data_parallel_choices,
            )
            result = run_tuning(
                space,
                pattern,
                params.slo_spec(),
                lambda config: factory(config, artifact),
                t.n_trials,
                self.spec.seed if t.seed is None else t.seed,
                sweep_config=params.sweep.build(params.slo_spec()),
                penalty=t.penalty,
                parallelism=t.parallelism,
                ledger=self.ledger,
            )
        except ServetuneError as e:
            logger.warning("Tuning failed: %s", e)
            self.archive.add_stage(
                "tuning", workers=t.parallelism, makespan=0.0, ledger_free=self.ledger.free,
                extra={"status": TrialStatus.FAILED.value, "error": str(e)},
            )
            return

        costs = [sweep_virtual_time(tr.sweep) if tr.sweep else 0.0 for tr in result.trials]
        self.archive.add_stage(
            "tuning",
            workers=t.parallelism,
            makespan=list_schedule_makespan(costs, t.parallelism),
            ledger_free=self.ledger.free,
            extra={"status": TrialStatus.OK.value, "trials": len(result.trials)},
        )
        self.archive.add_records(tuning_records(result))
        self.archive.c_star = {**config_record(result.best_config), "fitness": result.best_fitness}

    def _persist(self, artifact: ArtifactRef) -> None:
        storage = self.ctx.storage
        assert storage is not None
        source = self.artifact_root / Path(artifact.path).parent
        uploaded = None
        if source.exists():
            uploaded = storage.upload(source, f"{self.spec.slug}/{Path(artifact.path).parent.as_posix()}")
        self.archive.add_stage(
            "persist",
            workers=0,
            makespan=0.0,
            ledger_free=self.ledger.free,
            extra={"artifact": uploaded, "archive": f"{self.spec.slug}.jsonl"},
        )

    def _backend_factory(self, params: QuantizeTuneParams) -> ArtifactBackendFactory:
        return self.ctx.backend_factory or sim_backend_factory(params.sim.build())

    def _stage_done(
        self,
        stage: str,
        workers: int,
        makespan: float,
        outcomes: List[TrialOutcome[Any]],
        details: Dict[int, Dict[str, Any]],
        extra: Optional[Dict[str, Any]] = None,
    ) -> None:
        if self.ledger.allocated:
            logger.error("%s stage left %d slot(s) allocated", stage, self.ledger.allocated)
        self.archive.add_stage(
            stage,
            workers=workers,
            makespan=makespan,
            ledger_free=self.ledger.free,
            outcomes=outcomes,
            details=details,
            extra=extra,
        )
        logger.info(
            "Stage %s done: %d trial(s), makespan %.3fs (virtual)", stage, len(outcomes), makespan
        )

    def _finish(self, status: FlowStatus, reason: Optional[str] = None) -> FlowArchive:
        self.archive.finish(status, reason)
        if reason:
            logger.warning("Flow %s for job %s failed: %s", self.spec.flow, self.spec.name, reason)
        if self.ctx.write_archive:
            self.archive.write(self.ctx.archive_dir / f"{self.spec.slug}.jsonl")
        return self.archive


@registry.register(
    "quantization", required_params=QUANTIZATION_REQUIRED, params_model=QuantizationParams
)
def quantization_flow(spec: JobSpec, params: BaseModel, ctx: FlowContext) -> FlowArchive:
    """Fetch, compress N trials, evaluate, persist the best artifact."""
    assert isinstance(params, QuantizationParams)
    return QuantizationFlowRun(spec, params, ctx).execute(tune=False)


@registry.register(
    "quantize_tune", required_params=QUANTIZATION_REQUIRED, params_model=QuantizeTuneParams
)
def quantize_tune_flow(spec: JobSpec, params: BaseModel, ctx: FlowContext) -> FlowArchive:
    """Quantization followed by benchmarking and serving-config tuning."""
    assert isinstance(params, QuantizeTuneParams)
    return QuantizationFlowRun(spec, params, ctx).execute(tune=True)


def run_quantize_tune_flow(spec: JobSpec, ctx: Optional[FlowContext] = None) -> FlowArchive:
    """
    Validate ``spec`` as a quantize_tune job and run it.
    """
    params = registry.get("quantize_tune").parse_params(spec.flow_params)
    return quantize_tune_flow(spec, params, ctx or FlowContext.from_env())
