"""Exception hierarchy shared by the services and the CLI."""
from __future__ import annotations

from typing import Any, Dict, Optional


class GemsError(Exception):
    """Base class for every error raised by the package."""


class InputError(GemsError):
    """Bad input data or configuration (CLI exit code 1)."""


class SchemaError(InputError):
    pass


class EdgeFileError(InputError):
    pass


class DatasetError(InputError):
    pass


class GeneGrammarError(InputError):
    pass


class GeneValidationError(InputError):
    """A gene string parsed but broke one or more schema rules."""

    def __init__(self, gene_text: str, violations: list):
        self.gene_text = gene_text
        self.violations = list(violations)
        super().__init__(f"invalid gene {gene_text}: {', '.join(self.violations)}")


class ConfigError(InputError):
    pass


class CheckpointMismatchError(InputError):
    pass


class RuntimeAbort(GemsError):
    """A run had to stop part-way (CLI exit code 2)."""


class TrainingAbort(RuntimeAbort):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = dict(diagnostics or {})
        details = ", ".join(f"{key}={value}" for key, value in self.diagnostics.items())
        super().__init__(f"{message} ({details})" if details else message)


class SearchAbort(RuntimeAbort):
    """An evaluation failed inside the search loop."""

    def __init__(self, generation: int, individual: int, cause: Exception):
        self.generation = generation
        self.individual = individual
        self.cause = cause
        super().__init__(f"generation {generation}, individual {individual}: {cause}")
