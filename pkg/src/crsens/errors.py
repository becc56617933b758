"""Exception taxonomy.

Each class carries the process exit code the CLI maps it to.
"""


class CRSensError(Exception):
    exit_code = 4


class InputError(CRSensError):
    """File could not be read."""

    exit_code = 1


class ParseError(CRSensError):
    exit_code = 2

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class ValidationError(CRSensError):
    """Input violates a data-model invariant.

    ``problems`` is a list of ``(row, message)`` pairs; ``row`` is ``None`` for
    cohort-level problems.
    """

    exit_code = 2

    def __init__(self, message, problems=None):
        self.problems = list(problems or [])
        if self.problems:
            detail = "; ".join(
                (f"row {r}: {m}" if r is not None else m) for r, m in self.problems[:10]
            )
            if len(self.problems) > 10:
                detail += f"; ... ({len(self.problems) - 10} more)"
            message = f"{message}: {detail}"
        super().__init__(message)


class DomainError(CRSensError, ValueError):
    exit_code = 2


class ConvergenceError(CRSensError):
    exit_code = 3

    def __init__(self, message, last_iterate=None, iterations=None):
        self.last_iterate = last_iterate
        self.iterations = iterations
        super().__init__(message)


class SeparationError(ConvergenceError):
    pass


class SingularMatrixError(CRSensError):
    exit_code = 3

    def __init__(self, message, columns=None):
        self.columns = list(columns or [])
        if self.columns:
            message = f"{message} (collinear columns: {', '.join(map(str, self.columns))})"
        super().__init__(message)


class StudyError(CRSensError):
    exit_code = 3
