"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SqlKnowError(Exception):
    """Base class for all package errors."""


class SqlSyntaxError(SqlKnowError):
    """Malformed SQL. Carries the byte offset and an expected-token hint."""

    def __init__(self, message: str, offset: int, expected: str | None = None):
        hint = f" (expected {expected})" if expected else ""
        super().__init__(f"{message} at offset {offset}{hint}")
        self.offset = offset
        self.expected = expected


class DuplicateNameError(SqlKnowError):
    """Two CTEs in one script share a name."""


class UnresolvedDependencyError(SqlKnowError):
    """A referenced CTE has no definition in the dependency context."""


class SpliceError(SqlKnowError):
    """A fragment replacement produced an invalid unit or dropped a required column."""


class CycleError(SqlKnowError):
    """The subquery dependency graph contains a cycle."""

    def __init__(self, cycle: list[str]):
        super().__init__("dependency cycle: " + " -> ".join(cycle))
        self.cycle = cycle


class ExecutionError(SqlKnowError):
    """Database execution failed; wraps the engine message with the failing unit id."""

    def __init__(self, unit_id: str, message: str):
        super().__init__(f"execution failed in {unit_id!r}: {message}")
        self.unit_id = unit_id


class LlmError(SqlKnowError):
    """Chat-completion call failed (network, HTTP, timeout, or bad response)."""


class MissingVariableError(LlmError):
    """A prompt template variable was not supplied."""

    def __init__(self, template_id: str, name: str):
        super().__init__(f"template {template_id!r} is missing variable {name!r}")
        self.template_id = template_id
        self.name = name


class EmbeddingError(SqlKnowError):
    """Text embedding call failed or returned inconsistent dimensions."""


class EmptyStoreError(SqlKnowError):
    """Similarity query against a store with no records at the requested level."""


class GenerationParseError(SqlKnowError):
    """LLM output never parsed as SQL after the repair budget; keeps the raw text."""

    def __init__(self, message: str, raw_text: str):
        super().__init__(message)
        self.raw_text = raw_text


class StaleGenerationError(SqlKnowError):
    """Metadata requested for a generation that has been superseded."""


class RefusalError(SqlKnowError):
    """An edit would orphan downstream references and auto-repair failed."""


class BudgetExhaustedError(SqlKnowError):
    """Dataset synthesis retry budget ran out before reaching the task quota."""
