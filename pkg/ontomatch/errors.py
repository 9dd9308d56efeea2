"""
Exception hierarchy shared by every stage.

Library code raises these; only the CLI turns them into console
messages and exit codes.
"""


class OntoMatchError(Exception):
    """Base class for all ontomatch errors."""


class ParseError(OntoMatchError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(f"{message}{where}")


class OntologyValidationError(OntoMatchError):
    pass


class ConceptNotFoundError(OntoMatchError, KeyError):
    def __init__(self, concept_id: str, ontology: str = ""):
        self.concept_id = concept_id
        suffix = f" in ontology '{ontology}'" if ontology else ""
        OntoMatchError.__init__(self, f"Unknown concept id '{concept_id}'{suffix}")

    def __str__(self) -> str:
        return self.args[0]


class FitError(OntoMatchError):
    pass


class ContractError(OntoMatchError):
    """A caller or provider broke an interface contract."""


class ProviderError(OntoMatchError):
    def __init__(self, message: str, retryable: bool = False):
        self.retryable = retryable
        super().__init__(message)


class UndecidableError(OntoMatchError):
    """No probability mass (or no label word) for either class."""


class MetricError(OntoMatchError):
    pass


class ConfigError(OntoMatchError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(message)


class StageError(OntoMatchError):
    def __init__(self, stage: str, cause: Exception, timings: dict[str, float] | None = None):
        self.stage = stage
        self.cause = cause
        self.timings = dict(timings or {})
        super().__init__(f"Stage '{stage}' failed: {cause}")
