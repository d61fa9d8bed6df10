from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from typing import Dict, Iterator

from servetune_core.errors import InvalidParameter, ResourceExhausted

logger = logging.getLogger(__name__)


class ResourceLedger:
    """
    Accounting of abstract compute slots standing in for GPUs.

    Allocated slots never exceed ``capacity``. Thread-safe.
    """

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise InvalidParameter(f"resource budget must be >= 1, got {capacity}")
        self.capacity = capacity
        self._allocated: Dict[str, int] = {}
        self._cond = threading.Condition()
        self.peak = 0

    @property
    def allocated(self) -> int:
        with self._cond:
            return sum(self._allocated.values())

    @property
    def free(self) -> int:
        return self.capacity - self.allocated

    def allocate(self, owner: str, slots: int) -> None:
        with self._cond:
            self._take(owner, slots)

    def release(self, owner: str) -> int:
        """
        Return every slot held by ``owner``. Releasing twice is a no-op.
        """
        with self._cond:
            slots = self._allocated.pop(owner, 0)
            if slots:
                logger.debug("Ledger: %s released %d slot(s)", owner, slots)
                self._cond.notify_all()
            return slots

    @contextmanager
    def reserve(self, owner: str, slots: int) -> Iterator[None]:
        """
        Block until ``slots`` are free, hold them for the ``with`` body.
        """
        if slots > self.capacity:
            raise ResourceExhausted(
                f"{owner} needs {slots} slot(s); the budget is {self.capacity}"
            )
        with self._cond:
            while self.capacity - sum(self._allocated.values()) < slots:
                self._cond.wait()
            self._take(owner, slots)
        try:
            yield
        finally:
            self.release(owner)

    def _take(self, owner: str, slots: int) -> None:
        if slots < 1:
            raise InvalidParameter(f"slot count must be >= 1, got {slots}")
        in_use = sum(self._allocated.values())
        if in_use + slots > self.capacity:
            raise ResourceExhausted(
                f"{owner} asked for {slots} slot(s) with {self.capacity - in_use} free"
            )
        self._allocated[owner] = self._allocated.get(owner, 0) + slots
        self.peak = max(self.peak, in_use + slots)
        logger.debug("Ledger: %s holds %d slot(s)", owner, self._allocated[owner])
