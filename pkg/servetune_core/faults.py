from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Optional

import numpy as np

from servetune_core.errors import PersistentTrialError, TransientTrialError


@dataclass
class FailurePlan:
    """
    Scripted failures for mock backends, keyed by trial number.

    ``transient[t] = k`` fails trial ``t`` on its first ``k`` attempts;
    trials in ``persistent`` fail on every attempt.
    """

    transient: Dict[int, int] = field(default_factory=dict)
    persistent: FrozenSet[int] = frozenset()
    _attempts: Dict[int, int] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def check(self, trial: int) -> None:
        with self._lock:
            attempt = self._attempts.get(trial, 0)
            self._attempts[trial] = attempt + 1
        if trial in self.persistent:
            raise PersistentTrialError(f"trial {trial} failed permanently")
        if attempt < self.transient.get(trial, 0):
            raise TransientTrialError(f"trial {trial} failed transiently (attempt {attempt + 1})")

    def attempts(self, trial: int) -> int:
        with self._lock:
            return self._attempts.get(trial, 0)

    @classmethod
    def random(
        cls,
        n_trials: int,
        seed: int,
        *,
        p_transient: float = 0.3,
        p_persistent: float = 0.15,
        max_transient: int = 3,
    ) -> "FailurePlan":
        rng = np.random.default_rng(seed)
        transient: Dict[int, int] = {}
        persistent = set()
        for trial in range(n_trials):
            u = rng.random()
            if u < p_persistent:
                persistent.add(trial)
            elif u < p_persistent + p_transient:
                transient[trial] = int(rng.integers(1, max_transient + 1))
        return cls(transient=transient, persistent=frozenset(persistent))

    @classmethod
    def from_mapping(cls, data: Optional[Dict[str, object]]) -> Optional["FailurePlan"]:
        if not data:
            return None
        transient = {int(k): int(v) for k, v in dict(data.get("transient") or {}).items()}  # type: ignore[arg-type]
        persistent = frozenset(int(t) for t in (data.get("persistent") or ()))  # type: ignore[union-attr]
        return cls(transient=transient, persistent=persistent)
