"""Exception types shared across the pipeline.

InputError maps to CLI exit code 1, NumericalError to exit code 2.
"""


class InputError(Exception):
    """Bad or missing input: files, columns, config values, empty corpora."""


class NumericalError(Exception):
    """Numerical failure: rank deficiency, degenerate fits, constant vectors."""


class StageError(Exception):
    """A pipeline stage failed; carries the stage name and the cause."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
