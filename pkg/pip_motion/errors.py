"""
Exception types raised by the pipeline and their CLI exit codes
"""
from typing import Dict, List, Optional, Type


class PipelineError(Exception):
    """Base class for all pipeline errors"""


class DimensionError(PipelineError):
    """Operand shapes do not agree"""


class ConfigurationError(PipelineError):
    """Invalid or inconsistent configuration"""


class ContractError(PipelineError):
    """A precondition of an operation was violated"""


class DomainError(ContractError):
    """An operation was applied outside its domain (e.g. an empty axis)"""


class EvaluationError(PipelineError):
    """A function evaluated to a non-finite value"""


class GenerationError(PipelineError):
    """Scene generation was asked for something infeasible"""


class NumericalError(PipelineError):
    """NaN, divergence or failed gradient check"""

    def __init__(self, message: str, history: Optional[List[dict]] = None):
        super().__init__(message)
        self.history = history or []


class ValidationFailure(PipelineError):
    """Input data violates the scene/prediction invariants"""

    def __init__(self, message: str, violations: Optional[list] = None):
        super().__init__(message)
        self.violations = violations or []


EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4

# Most specific class first
EXIT_CODES: Dict[Type[Exception], int] = {
    ValidationFailure: EXIT_VALIDATION,
    ConfigurationError: EXIT_USAGE,
    GenerationError: EXIT_USAGE,
    DimensionError: EXIT_USAGE,
    ContractError: EXIT_USAGE,
    NumericalError: EXIT_NUMERICAL,
    EvaluationError: EXIT_NUMERICAL,
}


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code"""
    for exc_type, code in EXIT_CODES.items():
        if isinstance(exc, exc_type):
            return code
    return EXIT_NUMERICAL
