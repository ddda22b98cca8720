"""Exception hierarchy shared across the package.

Every error raised on purpose derives from AtaError so callers can catch
domain failures without swallowing programming mistakes. The CLI maps these
onto exit codes in one place (cli.py).
"""

from __future__ import annotations


class AtaError(Exception):
    """Base class for all deliberate failures."""


class ValidationError(AtaError):
    """An object or argument violates a documented invariant or precondition."""


class ConfigurationError(AtaError):
    """A configuration document is structurally or semantically unusable."""

    def __init__(self, problems: list[str] | str):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = problems
        super().__init__("; ".join(problems))


class IntegrityError(AtaError):
    """Cross-object consistency broke: unknown ids, duplicates, bad ordering."""


class NotFoundError(AtaError):
    """A referenced artifact, run, or record does not exist."""


class ParseError(AtaError):
    """A wire document could not be parsed. Carries a byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class ProtocolError(AtaError):
    """A runner violated the execution protocol (e.g. no result document)."""


class SandboxError(AtaError):
    """The sandboxed runner could not be launched or crashed outside protocol."""


class BackendError(AtaError):
    """A generation backend failed after exhausting its retry budget."""


class OperationalError(AtaError):
    """Infrastructure failure that aborts a run (e.g. unwritable trace sink)."""
