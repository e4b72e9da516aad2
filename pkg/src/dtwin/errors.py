"""Exception hierarchy shared by every dtwin module."""

from __future__ import annotations


class DtwinError(Exception):
    """Base class for all errors raised by this package."""


# --- definitions and conditions -------------------------------------------


class SchemaSyntaxError(DtwinError):
    """Malformed definition file or condition text."""

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class ValidationError(DtwinError):
    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class ScopeError(ValidationError):
    """A path root that is illegal in the condition's context."""


class ConditionTypeError(DtwinError, TypeError):
    pass


class MissingBinding(DtwinError):
    pass


# --- twins ----------------------------------------------------------------


class ValueTypeError(DtwinError, TypeError):
    """An attribute or input value does not match its declared type."""


class InvariantViolation(DtwinError):
    pass


class DuplicateId(DtwinError):
    pass


class DefinitionMismatch(DtwinError):
    pass


# --- repository -----------------------------------------------------------


class NotFound(DtwinError):
    pass


class UnknownDefinition(DtwinError):
    pass


class Busy(DtwinError):
    """Twin is locked by a logical unit of work."""


class VersionConflict(DtwinError):
    pass


class Rejected(DtwinError):
    def __init__(self, verdict):
        self.verdict = verdict
        summary = "; ".join(f"{f.kind}: {f.condition}" for f in verdict.failures)
        super().__init__(f"transition rejected ({summary})")


class Unauthorized(DtwinError):
    pass


class Destructed(DtwinError):
    pass


class UnknownLuw(DtwinError):
    pass


class LuwStateError(DtwinError):
    """A staged LUW was asked to resolve both ways."""


# --- ledger ---------------------------------------------------------------


class LedgerClosed(DtwinError):
    pass


class IllegalPhaseOrder(DtwinError):
    pass


class OutOfRange(DtwinError):
    pass


class LedgerFormatError(DtwinError):
    pass


# --- asset providers ------------------------------------------------------


class Insufficient(DtwinError):
    pass


class UnknownAsset(DtwinError):
    pass


class UnknownReservation(DtwinError):
    pass


class AlreadyAborted(DtwinError):
    pass


class AlreadyCommitted(DtwinError):
    pass


# --- LUW / network --------------------------------------------------------


class WrongPhase(DtwinError):
    pass


class NotEnlisted(WrongPhase):
    pass


class Unreachable(DtwinError):
    pass


class UnknownContainer(DtwinError):
    pass


class ScenarioError(DtwinError):
    pass


class LogCorrupted(DtwinError):
    pass
