from __future__ import annotations

import hashlib
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Optional, Protocol, Union

import orjson

from servetune_core.calibration.corpus import TokenCorpus
from servetune_core.calibration.recipes import CompressionStrategy, QuantScheme, Recipe
from servetune_core.errors import BackendMissing, InvalidParameter
from servetune_core.faults import FailurePlan

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ArtifactRef:
    """
    A compressed model. ``path`` is relative to the output root.
    """

    trial: int
    seed: int
    recipe_name: str
    scheme: str
    path: str
    fingerprint: str
    calibration_fingerprint: str
    cost: float = 0.0  # simulated seconds

    def to_dict(self) -> Dict[str, Any]:
        return {
            "trial": self.trial,
            "seed": self.seed,
            "recipe": self.recipe_name,
            "scheme": self.scheme,
            "path": self.path,
            "fingerprint": self.fingerprint,
            "calibration_fingerprint": self.calibration_fingerprint,
            "cost": self.cost,
        }


class CompressionBackend(Protocol):
    """
    Single entry point turning (model, strategy, calibration) into an artifact.
    """

    schemes: FrozenSet[QuantScheme]

    def estimate_cost(self, strategy: CompressionStrategy) -> float: ...

    def compress(
        self,
        model_ref: str,
        strategy: CompressionStrategy,
        calibration: TokenCorpus,
        output_root: Path,
        *,
        trial: int = 0,
        seed: int = 0,
    ) -> ArtifactRef: ...


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", text).strip("-") or "model"


@dataclass
class MockCompressionBackend:
    """
    Writes a deterministic manifest instead of quantized weights.

    Cost is ``base_cost + cost_per_sample * calibration size`` simulated
    seconds; ``sleep_scale > 0`` also sleeps that fraction of it for real.
    """

    schemes: FrozenSet[QuantScheme] = frozenset(QuantScheme)
    base_cost: float = 1.0
    cost_per_sample: float = 0.001
    sleep_scale: float = 0.0
    failures: Optional[FailurePlan] = None
    calls: List[Dict[str, Any]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def estimate_cost(self, strategy: CompressionStrategy) -> float:
        return self.base_cost + self.cost_per_sample * strategy.calibration_samples

    def compress(
        self,
        model_ref: str,
        strategy: CompressionStrategy,
        calibration: TokenCorpus,
        output_root: Path,
        *,
        trial: int = 0,
        seed: int = 0,
    ) -> ArtifactRef:
        with self._lock:
            self.calls.append(
                {
                    "model": model_ref,
                    "recipe": strategy.recipe_name,
                    "samples": len(calibration),
                    "trial": trial,
                    "seed": seed,
                }
            )
        if self.failures is not None:
            self.failures.check(trial)

        calib_fp = calibration.fingerprint()
        manifest = {
            "model": model_ref,
            "recipe": strategy.recipe_name,
            "scheme": strategy.scheme.value,
            "calibration_samples": len(calibration),
            "calibration_fingerprint": calib_fp,
            "layer_exclusions": list(strategy.layer_exclusions),
            "seed": seed,
        }
        body = orjson.dumps(manifest, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2)
        rel = Path(f"{_slug(model_ref)}-{strategy.recipe_name}-t{trial}") / "manifest.json"
        target = Path(output_root) / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(body)

        cost = self.estimate_cost(strategy)
        if self.sleep_scale > 0:
            time.sleep(cost * self.sleep_scale)
        return ArtifactRef(
            trial=trial,
            seed=seed,
            recipe_name=strategy.recipe_name,
            scheme=strategy.scheme.value,
            path=rel.as_posix(),
            fingerprint=hashlib.sha256(body).hexdigest(),
            calibration_fingerprint=calib_fp,
            cost=cost,
        )


class Optimizer:
    """
    Front door of compression: pick a backend path and run one strategy.
    """

    def __init__(self, backend: CompressionBackend) -> None:
        self.backend = backend

    def run_pipeline(
        self,
        model_ref: str,
        output_path: Union[str, Path],
        strategy: CompressionStrategy,
        calibration: TokenCorpus,
        *,
        trial: int = 0,
        seed: int = 0,
    ) -> ArtifactRef:
        if strategy.scheme not in self.backend.schemes:
            raise BackendMissing(
                f"no compression backend handles scheme {strategy.scheme.value}"
            )
        if strategy.needs_calibration and len(calibration) != strategy.calibration_samples:
            raise InvalidParameter(
                f"{strategy.recipe_name} expects {strategy.calibration_samples} "
                f"calibration sequences, got {len(calibration)}"
            )
        artifact = self.backend.compress(
            model_ref, strategy, calibration, Path(output_path), trial=trial, seed=seed
        )
        logger.info(
            "Compressed %s with %s (trial %d) -> %s", model_ref, strategy.recipe_name, trial, artifact.path
        )
        return artifact


def run_compression(
    recipe: Recipe,
    model_ref: str,
    calibration: TokenCorpus,
    backend: CompressionBackend,
    output_path: Union[str, Path],
    *,
    trial: int = 0,
    seed: int = 0,
) -> ArtifactRef:
    return Optimizer(backend).run_pipeline(
        model_ref, output_path, recipe.create(), calibration, trial=trial, seed=seed
    )
