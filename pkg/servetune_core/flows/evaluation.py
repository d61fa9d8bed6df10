from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

from servetune_core.calibration.compression import ArtifactRef
from servetune_core.errors import InvalidParameter
from servetune_core.faults import FailurePlan


class Scorer(Protocol):
    """
    Quality score of a compressed artifact, higher is better.
    """

    def score(self, artifact: ArtifactRef) -> float: ...


@dataclass
class MockScorer:
    """
    Hashes the artifact fingerprint to a stable score in [0, 1].
    """

    failures: Optional[FailurePlan] = None
    cost: float = 0.5  # simulated seconds per evaluation

    def score(self, artifact: ArtifactRef) -> float:
        if self.failures is not None:
            self.failures.check(artifact.trial)
        digest = hashlib.sha256(artifact.fingerprint.encode("utf-8")).hexdigest()
        return int(digest[:8], 16) / 0xFFFFFFFF


@dataclass(frozen=True)
class EvaluatedArtifact:
    artifact: ArtifactRef
    score: float


def select_representative(candidates: Sequence[EvaluatedArtifact]) -> EvaluatedArtifact:
    """
    Highest score wins; ties go to the lowest trial seed.
    """
    if not candidates:
        raise InvalidParameter("no candidates to select from")
    return min(candidates, key=lambda c: (-c.score, c.artifact.seed))
