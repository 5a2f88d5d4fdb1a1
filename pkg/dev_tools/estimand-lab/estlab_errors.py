"""
exception classes shared by all modules
"""


class EstimandLabError(Exception):
    """base class of every error raised by the package"""


class ConfigError(EstimandLabError):
    """invalid scenario configuration (raised at load time, never per patient)"""


class SpecParseError(EstimandLabError):
    """estimand spec text does not follow the grammar"""

    def __init__(self, message: str, line: int, column: int = 1):
        self.message = message
        self.line = line
        self.column = column
        super().__init__(f"{message} (line {line}, column {column})")


class SpecValidationError(EstimandLabError):
    """spec failed validation, carries the ValidationReport"""

    def __init__(self, report):
        self.report = report
        errors = "; ".join(str(item) for item in report.errors)
        super().__init__(f"estimand spec has {len(report.errors)} error(s): {errors}")


class ImputationError(EstimandLabError):
    """imputation model cannot be fitted (too few cases or donors)"""


class ImputationRequiredError(EstimandLabError):
    """a value is missing where a completed dataset is required"""


class StratumEmptyError(EstimandLabError):
    """principal stratum has no oracle patients"""


class ReplicateError(EstimandLabError):
    """error raised inside one replicate of a study"""

    def __init__(self, replicate_index: int, cause: str):
        self.replicate_index = replicate_index
        self.cause = cause
        super().__init__(f"replicate {replicate_index}: {cause}")


class StudyAbortedError(EstimandLabError):
    """failed replicates exceeded the failure budget"""

    def __init__(self, failed: int, budget: int, partial=None):
        self.failed = failed
        self.budget = budget
        self.partial = partial
        super().__init__(f"study aborted: {failed} failed replicate(s) exceed budget of {budget}")


class PlanResolutionError(EstimandLabError):
    """an ICE or missing cell has no strategy / imputation method in the spec"""
