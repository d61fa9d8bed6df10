from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import orjson
import yaml
from pydantic import BaseModel

# registers the built-in flows
import servetune_core.flows.quantization  # noqa: F401
from servetune_core.errors import InvalidParameter
from servetune_core.flows.archive import FlowArchive
from servetune_core.flows.base import FlowContext, FlowDefinition, FlowRegistry, JobSpec, parse_job, registry

logger = logging.getLogger(__name__)

JobInput = Union[JobSpec, Mapping[str, Any]]


def parse_job_document(raw: Union[str, bytes], fmt: Optional[str] = None) -> Dict[str, Any]:
    """
    Decode a job document. ``fmt`` is "json" or "yaml"; sniffed when omitted.
    """
    text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    if fmt is None:
        fmt = "json" if text.lstrip().startswith("{") else "yaml"
    try:
        data = orjson.loads(text) if fmt == "json" else yaml.safe_load(text)
    except (orjson.JSONDecodeError, yaml.YAMLError) as e:
        raise InvalidParameter(f"cannot parse job document as {fmt}: {e}") from e
    if not isinstance(data, dict):
        raise InvalidParameter("job document must be a mapping")
    return data


def load_job_file(path: Union[str, Path]) -> Dict[str, Any]:
    p = Path(path)
    suffix = p.suffix.lower()
    fmt = "json" if suffix == ".json" else "yaml" if suffix in (".yaml", ".yml") else None
    return parse_job_document(p.read_bytes(), fmt)


@dataclass(frozen=True)
class ValidatedJob:
    spec: JobSpec
    flow: FlowDefinition
    params: BaseModel


def validate_job(job: JobInput, flows: FlowRegistry = registry) -> ValidatedJob:
    """
    Schema-check a job and resolve its flow without running anything.

    Raises SchemaViolation listing every offending field, or UnknownFlow.
    """
    spec = job if isinstance(job, JobSpec) else parse_job(job)
    flow = flows.get(spec.flow)
    params = flow.parse_params(spec.flow_params)
    return ValidatedJob(spec=spec, flow=flow, params=params)


def validate_and_submit(
    job: JobInput,
    ctx: Optional[FlowContext] = None,
    flows: FlowRegistry = registry,
) -> FlowArchive:
    validated = validate_job(job, flows)
    logger.info("Submitting job %s to flow %s", validated.spec.name, validated.flow.name)
    return validated.flow.run(validated.spec, validated.params, ctx or FlowContext.from_env())
