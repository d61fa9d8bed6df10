from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Type

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from servetune_core.backends.base import InferenceBackend
from servetune_core.calibration.compression import ArtifactRef, CompressionBackend
from servetune_core.config import get_archive_dir, get_workspace_dir
from servetune_core.errors import SchemaViolation, UnknownFlow
from servetune_core.flows.archive import FlowArchive
from servetune_core.flows.evaluation import Scorer
from servetune_core.flows.storage import LocalStorage, Storage
from servetune_core.models import RuntimeConfig

logger = logging.getLogger(__name__)

# Builds the serving backend for a config, optionally loaded with a compressed artifact.
ArtifactBackendFactory = Callable[[RuntimeConfig, Optional[ArtifactRef]], InferenceBackend]


class JobSpec(BaseModel):
    """
    A submitted job: which flow to run, on what, with which budget.
    """

    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., min_length=1, examples=["llama-w8a8-tune"])
    flow: str = Field(..., min_length=1, examples=["quantize_tune"])
    model: str = Field(..., min_length=1, description="Model path or identifier")
    dataset: Optional[str] = Field(None, description="Calibration corpus (JSON lines)")
    flow_params: Dict[str, Any] = Field(default_factory=dict)
    resources: int = Field(1, ge=1, description="Resource budget in abstract slots")
    seed: int = 0

    @property
    def slug(self) -> str:
        return re.sub(r"[^A-Za-z0-9_.-]+", "-", self.name).strip("-") or "job"


def _loc(parts: Tuple[Any, ...], prefix: str = "") -> str:
    path = ".".join(str(p) for p in parts)
    if prefix:
        return f"{prefix}.{path}" if path else prefix
    return path


def schema_violation(err: ValidationError, prefix: str = "") -> SchemaViolation:
    fields: List[str] = []
    details: List[str] = []
    for item in err.errors():
        loc = _loc(tuple(item.get("loc", ())), prefix)
        if loc not in fields:
            fields.append(loc)
        details.append(f"{loc}: {item.get('msg')}")
    return SchemaViolation(fields, details)


def parse_job(data: Mapping[str, Any]) -> JobSpec:
    try:
        return JobSpec.model_validate(dict(data))
    except ValidationError as e:
        raise schema_violation(e) from None


@dataclass
class FlowContext:
    """
    Where a flow reads and writes, and which backends it drives.

    Unset backends are built from the job's own parameters.
    """

    archive_dir: Path
    workspace_dir: Path
    storage: Optional[Storage] = None
    compression_backend: Optional[CompressionBackend] = None
    scorer: Optional[Scorer] = None
    backend_factory: Optional[ArtifactBackendFactory] = None
    write_archive: bool = True

    def __post_init__(self) -> None:
        self.archive_dir = Path(self.archive_dir)
        self.workspace_dir = Path(self.workspace_dir)
        if self.storage is None:
            self.storage = LocalStorage(self.archive_dir)

    @classmethod
    def from_env(cls) -> "FlowContext":
        return cls(archive_dir=get_archive_dir(), workspace_dir=get_workspace_dir())


FlowFn = Callable[[JobSpec, BaseModel, FlowContext], FlowArchive]


@dataclass(frozen=True)
class FlowDefinition:
    name: str
    run: FlowFn
    required_params: Tuple[str, ...] = ()
    params_model: Optional[Type[BaseModel]] = None
    description: str = ""

    def parse_params(self, params: Mapping[str, Any]) -> BaseModel:
        """
        Check required parameters first, then the full parameter schema.
        """
        missing = [f"flow_params.{p}" for p in self.required_params if p not in params]
        if self.params_model is None:
            if missing:
                raise SchemaViolation(missing, [f"{m}: field required" for m in missing])
            return BaseModel()
        try:
            parsed = self.params_model.model_validate(dict(params))
        except ValidationError as e:
            violation = schema_violation(e, "flow_params")
            fields = missing + [f for f in violation.fields if f not in missing]
            details = [f"{m}: field required" for m in missing] + [
                d for d in violation.details if d.split(":", 1)[0] not in missing
            ]
            raise SchemaViolation(fields, details) from None
        if missing:
            raise SchemaViolation(missing, [f"{m}: field required" for m in missing])
        return parsed


class FlowRegistry:
    """
    Flows by name. Register with the :meth:`register` decorator.
    """

    def __init__(self) -> None:
        self._flows: Dict[str, FlowDefinition] = {}

    def register(
        self,
        name: str,
        *,
        required_params: Tuple[str, ...] = (),
        params_model: Optional[Type[BaseModel]] = None,
        description: str = "",
    ) -> Callable[[FlowFn], FlowFn]:
        def decorator(fn: FlowFn) -> FlowFn:
            doc = (fn.__doc__ or "").strip().splitlines()
            self._flows[name] = FlowDefinition(
                name=name,
                run=fn,
                required_params=tuple(required_params),
                params_model=params_model,
                description=description or (doc[0] if doc else ""),
            )
            logger.debug("Registered flow %s", name)
            return fn

        return decorator

    def get(self, name: str) -> FlowDefinition:
        try:
            return self._flows[name]
        except KeyError:
            raise UnknownFlow(
                f"Unknown flow {name!r}. Registered: {', '.join(sorted(self._flows)) or 'none'}"
            ) from None

    def names(self) -> List[str]:
        return sorted(self._flows)

    def __contains__(self, name: object) -> bool:
        return name in self._flows


registry = FlowRegistry()
