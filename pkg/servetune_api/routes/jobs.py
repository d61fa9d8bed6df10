from __future__ import annotations

import logging
from typing import Any, Dict, List

from fastapi import APIRouter, Depends, HTTPException, Request
from fastapi.concurrency import run_in_threadpool
from starlette.datastructures import UploadFile

from servetune_api.deps import get_flow_context
from servetune_api.schemas import JobResponse, ValidationResponse
from servetune_core.errors import (
    BackendUnavailable,
    InvalidParameter,
    SchemaViolation,
    UnknownFlow,
)
from servetune_core.flows.archive import FlowArchive
from servetune_core.flows.base import FlowContext, registry
from servetune_core.flows.submit import parse_job_document, validate_and_submit, validate_job

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/v1/jobs", tags=["jobs"])


async def read_job_document(request: Request) -> Dict[str, Any]:
    """
    A job arrives either as a JSON body or as a multipart upload in ``file``
    (JSON or YAML).
    """
    content_type = request.headers.get("content-type", "")
    try:
        if content_type.startswith("multipart/form-data"):
            form = await request.form()
            upload = form.get("file")
            if not isinstance(upload, UploadFile):
                raise HTTPException(status_code=422, detail="Missing job file upload: file")
            name = (upload.filename or "").lower()
            fmt = "json" if name.endswith(".json") else "yaml" if name.endswith((".yaml", ".yml")) else None
            return parse_job_document(await upload.read(), fmt)
        return parse_job_document(await request.body(), "json")
    except InvalidParameter as e:
        raise HTTPException(status_code=400, detail=f"Invalid job document: {e}") from e


def _job_error(e: Exception) -> HTTPException:
    if isinstance(e, SchemaViolation):
        return HTTPException(status_code=422, detail={"message": str(e), "fields": e.fields})
    if isinstance(e, UnknownFlow):
        return HTTPException(status_code=404, detail=str(e))
    if isinstance(e, BackendUnavailable):
        return HTTPException(status_code=503, detail=str(e))
    return HTTPException(status_code=400, detail=str(e))


def job_response(archive: FlowArchive, ctx: FlowContext) -> JobResponse:
    path = None
    if archive.path is not None:
        try:
            path = archive.path.relative_to(ctx.archive_dir).as_posix()
        except ValueError:
            path = archive.path.as_posix()
    return JobResponse(
        name=str(archive.job.get("name")),
        flow=str(archive.job.get("flow")),
        status=archive.status.value if archive.status else "UNKNOWN",
        failure_reason=archive.failure_reason,
        q_star=archive.q_star,
        c_star=archive.c_star,
        archive=path,
        stages=[{k: v for k, v in s.items() if k != "record"} for s in archive.stages],
    )


@router.get("/flows", response_model=List[Dict[str, Any]])
async def list_flows() -> List[Dict[str, Any]]:
    out = []
    for name in registry.names():
        flow = registry.get(name)
        out.append(
            {
                "name": flow.name,
                "required_params": list(flow.required_params),
                "description": flow.description,
            }
        )
    return out


@router.post("/validate", response_model=ValidationResponse)
async def validate(request: Request) -> ValidationResponse:
    """
    Check a job against its flow's schema without running it.
    """
    document = await read_job_document(request)
    try:
        validated = validate_job(document)
    except (SchemaViolation, UnknownFlow) as e:
        raise _job_error(e) from e
    return ValidationResponse(
        valid=True,
        name=validated.spec.name,
        flow=validated.flow.name,
        required_params=list(validated.flow.required_params),
    )


@router.post("", response_model=JobResponse)
async def submit(
    request: Request, ctx: FlowContext = Depends(get_flow_context)
) -> JobResponse:
    """
    Validate a job and run its flow to completion.

    A flow that runs but fails still answers 200; its status says FAILED.
    """
    document = await read_job_document(request)
    try:
        archive = await run_in_threadpool(validate_and_submit, document, ctx)
    except (SchemaViolation, UnknownFlow, InvalidParameter, BackendUnavailable) as e:
        raise _job_error(e) from e
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Flow execution failed: {e}") from e
    logger.info("Job %s finished with status %s", archive.job.get("name"), archive.status)
    return job_response(archive, ctx)
