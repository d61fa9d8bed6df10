from __future__ import annotations

from typing import TYPE_CHECKING, List, Sequence

if TYPE_CHECKING:
    from servetune_core.models import TrialResult


class ServetuneError(Exception):
    """
    Base class for every error raised by servetune.
    """


class InvalidParameter(ServetuneError, ValueError):
    """A value violates a documented precondition or invariant."""


class EmptyTelemetry(ServetuneError):
    """No OK request records are available for the requested statistic."""


class InsufficientData(ServetuneError):
    """Too few completed requests to fit the steady-state regression."""


class DegenerateRegressor(ServetuneError):
    """All arrival timestamps are equal, so no slope can be fitted."""


class BackendUnavailable(ServetuneError):
    """The inference backend failed its health check."""


class TrialAborted(ServetuneError):
    """
    More than half of a trial's requests failed.

    The partially populated result is kept so callers can archive it.
    """

    def __init__(self, message: str, result: "TrialResult") -> None:
        super().__init__(message)
        self.result = result


class ContextOverflow(ServetuneError):
    """A request does not fit in the server's maximum context."""


class UnknownRecipe(ServetuneError, KeyError):
    """No recipe is registered under the requested name."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown recipe"


class CorpusTooSmall(ServetuneError):
    """The corpus holds fewer sequences than the recipe asks for."""


class BackendMissing(ServetuneError):
    """No compression backend handles the recipe's scheme."""


class SchemaViolation(ServetuneError):
    """
    A job specification failed validation.

    ``fields`` lists every offending field as a dotted path.
    """

    def __init__(self, fields: Sequence[str], details: Sequence[str] = ()) -> None:
        self.fields: List[str] = list(fields)
        self.details: List[str] = list(details)
        listing = "; ".join(self.details) if self.details else ", ".join(self.fields)
        super().__init__(f"Job specification is invalid: {listing}")


class UnknownFlow(ServetuneError, KeyError):
    """No flow is registered under the requested name."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown flow"


class ResourceExhausted(ServetuneError):
    """A reservation would exceed the resource ledger's capacity."""


class PoolClosed(ServetuneError):
    """Work was submitted to a destroyed stage pool."""


class TransientTrialError(ServetuneError):
    """A trial failed in a way that is worth retrying."""


class PersistentTrialError(ServetuneError):
    """A trial failed permanently; it is recorded and excluded."""
