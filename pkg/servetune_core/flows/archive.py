from __future__ import annotations

import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import orjson
import pandas as pd

from servetune_core.analysis.steady_state import stability_frame
from servetune_core.errors import InvalidParameter
from servetune_core.flows.pool import TrialOutcome, TrialStatus
from servetune_core.models import (
    RequestRecord,
    RequestStatus,
    RuntimeConfig,
    StabilityDiagnostics,
    SweepResult,
    TrialResult,
)
from servetune_core.pipelines.tuner import TuneResult

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

Record = Dict[str, Any]


class FlowStatus(str, Enum):
    SUCCEEDED = "SUCCEEDED"
    FAILED = "FAILED"


def config_record(config: RuntimeConfig) -> Record:
    return {
        "tensor_parallel": config.tensor_parallel,
        "data_parallel": config.data_parallel,
        "max_num_seqs": config.max_num_seqs,
        "max_batched_tokens": config.max_batched_tokens,
        "max_context": config.max_context,
    }


def _request_row(r: RequestRecord) -> List[Any]:
    return [r.request_id, r.arrival_ts, r.first_token_ts, r.completion_ts, r.output_tokens, r.status.value]


def trial_record(label: str, index: int, trial: TrialResult, *, with_requests: bool = True) -> Record:
    stability = trial.stability
    record: Record = {
        "record": "sweep_trial",
        "label": label,
        "index": index,
        "mode": trial.mode.value,
        "rate": trial.rate,
        "decision": trial.decision.value if trial.decision else None,
        "next_rate": trial.next_rate,
        "slo_pass": trial.slo_pass,
        "slo_checks": dict(trial.slo_checks),
        "latency_ms": trial.latency_stats,
        "error_count": trial.error_count,
        "timeout_count": trial.timeout_count,
        "aborted": trial.aborted,
        "stability": None
        if stability is None
        else {
            "beta": stability.beta,
            "alpha": stability.alpha,
            "r2": stability.r2,
            "tolerance": stability.tolerance,
            "is_stable": stability.is_stable,
            "n_points": stability.n_points,
        },
    }
    if with_requests:
        # id, arrival, first token, completion, output tokens, status
        record["requests"] = [_request_row(r) for r in trial.records]
    return record


def sweep_records(label: str, sweep: SweepResult, *, with_requests: bool = True) -> List[Record]:
    records = [
        trial_record(label, i, t, with_requests=with_requests) for i, t in enumerate(sweep.trials)
    ]
    records.append(
        {
            "record": "sweep",
            "label": label,
            "status": sweep.status.value,
            "best_rate": sweep.best_rate,
            "lower_bound": sweep.lower_bound,
            "converged": sweep.converged,
            "trials": len(sweep.trials),
        }
    )
    return records


def tuning_records(result: TuneResult) -> List[Record]:
    records: List[Record] = []
    for i, trial in enumerate(result.trials):
        records.append(
            {
                "record": "tune_trial",
                "index": i,
                "config": config_record(trial.config),
                "fitness": trial.fitness,
                "best_rate": trial.sweep.best_rate if trial.sweep else None,
                "sweep_status": trial.sweep.status.value if trial.sweep else None,
                "error": trial.error,
            }
        )
    records.append(
        {
            "record": "tuning",
            "seed": result.seed,
            "best_config": config_record(result.best_config),
            "best_fitness": result.best_fitness,
            "trials": len(result.trials),
        }
    )
    return records


class FlowArchive:
    """
    Everything a flow run produced, in the order it happened.

    Holds no wall-clock values and records the paths it creates relative
    to the archive directory, so equal runs serialize to equal bytes.
    """

    def __init__(self, job: Mapping[str, Any]) -> None:
        self.job = dict(job)
        self.status: Optional[FlowStatus] = None
        self.failure_reason: Optional[str] = None
        self.q_star: Optional[Record] = None
        self.c_star: Optional[Record] = None
        self.stages: List[Record] = []
        self.records: List[Record] = []
        self.path: Optional[Path] = None

    @property
    def succeeded(self) -> bool:
        return self.status is FlowStatus.SUCCEEDED

    def add_stage(
        self,
        stage: str,
        *,
        workers: int,
        makespan: float,
        ledger_free: int,
        outcomes: Sequence[TrialOutcome[Any]] = (),
        details: Optional[Mapping[int, Record]] = None,
        extra: Optional[Record] = None,
    ) -> Record:
        summary: Record = {
            "record": "stage",
            "stage": stage,
            "workers": workers,
            "makespan": makespan,
            "ledger_free": ledger_free,
            "ok": sum(1 for o in outcomes if o.status is TrialStatus.OK),
            "failed": sum(1 for o in outcomes if o.status is TrialStatus.FAILED),
            "excluded": sum(1 for o in outcomes if o.status is TrialStatus.EXCLUDED),
        }
        if extra:
            summary.update(extra)
        self.stages.append(summary)
        self.records.append(summary)
        details = details or {}
        for o in outcomes:
            entry: Record = {
                "record": "trial",
                "stage": stage,
                "trial": o.trial,
                "status": o.status.value,
                "attempts": o.attempts,
                "retries": o.retries,
                "cost": o.cost,
                "error": o.error,
            }
            entry.update(details.get(o.trial, {}))
            self.records.append(entry)
        return summary

    def add_records(self, records: Sequence[Record]) -> None:
        self.records.extend(records)

    def trials(self, stage: str) -> List[Record]:
        return [r for r in self.records if r["record"] == "trial" and r["stage"] == stage]

    def finish(self, status: FlowStatus, reason: Optional[str] = None) -> None:
        self.status = status
        self.failure_reason = reason

    def to_records(self) -> List[Record]:
        header: Record = {
            "record": "header",
            "schema_version": SCHEMA_VERSION,
            "job": self.job.get("name"),
            "flow": self.job.get("flow"),
            "seed": self.job.get("seed"),
        }
        result: Record = {
            "record": "result",
            "status": self.status.value if self.status else None,
            "failure_reason": self.failure_reason,
            "q_star": self.q_star,
            "c_star": self.c_star,
        }
        return [header, {"record": "job", **self.job}, *self.records, result]

    def dumps(self) -> bytes:
        return dump_records(self.to_records())

    def write(self, path: Union[str, Path]) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(self.dumps())
        self.path = p
        logger.info("Wrote archive %s (%d records)", p, len(self.records) + 3)
        return p


def dump_records(records: Sequence[Record]) -> bytes:
    return b"".join(orjson.dumps(r, option=orjson.OPT_SORT_KEYS) + b"\n" for r in records)


def write_records(records: Sequence[Record], path: Union[str, Path]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(dump_records(records))
    return p


def header_record(**fields: Any) -> Record:
    return {"record": "header", "schema_version": SCHEMA_VERSION, **fields}


def read_archive(path: Union[str, Path]) -> List[Record]:
    """
    Load an archive, checking its header.
    """
    lines = [ln for ln in Path(path).read_bytes().splitlines() if ln.strip()]
    if not lines:
        raise InvalidParameter(f"{path} is empty")
    try:
        records = [orjson.loads(ln) for ln in lines]
    except orjson.JSONDecodeError as e:
        raise InvalidParameter(f"{path} is not a JSON-lines archive: {e}") from e
    header = records[0]
    if header.get("record") != "header":
        raise InvalidParameter(f"{path} does not start with a header record")
    if header.get("schema_version") != SCHEMA_VERSION:
        raise InvalidParameter(
            f"{path} has schema version {header.get('schema_version')}, expected {SCHEMA_VERSION}"
        )
    return records


def _records_from_rows(rows: Sequence[Sequence[Any]]) -> List[RequestRecord]:
    return [
        RequestRecord(
            request_id=int(row[0]),
            arrival_ts=float(row[1]),
            first_token_ts=row[2],
            completion_ts=row[3],
            output_tokens=int(row[4]),
            status=RequestStatus(row[5]),
        )
        for row in rows
    ]


def stability_table(
    records: Sequence[Record], *, label: Optional[str] = None, index: Optional[int] = None
) -> pd.DataFrame:
    """
    Arrival/completion/fitted rows for every archived open-loop trial,
    optionally narrowed to one sweep label or trial index.
    """
    frames = []
    for rec in records:
        if rec.get("record") != "sweep_trial" or rec.get("mode") != "OPEN_LOOP":
            continue
        if label is not None and rec["label"] != label:
            continue
        if index is not None and rec["index"] != index:
            continue
        stab = rec.get("stability")
        diag = StabilityDiagnostics(**stab) if stab else None
        frame = stability_frame(_records_from_rows(rec.get("requests", [])), diag)
        frame.insert(0, "rate", rec["rate"])
        frame.insert(0, "trial", rec["index"])
        frame.insert(0, "label", rec["label"])
        frames.append(frame)
    if not frames:
        raise InvalidParameter("archive holds no matching open-loop trials")
    return pd.concat(frames, ignore_index=True)
