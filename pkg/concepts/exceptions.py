"""
Structured errors raised across the concepts app.

Management commands map these onto process exit codes.
"""


class ReasonerError(Exception):
    """Base class for every error raised by the concepts app"""


class ShapeError(ReasonerError, ValueError):
    """An input does not satisfy an operation's shape rule"""

    def __init__(self, op, *shapes, detail=None):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        rendered = ' vs '.join(str(list(s)) for s in self.shapes)
        message = f"{op}: incompatible shapes {rendered}" if rendered else f"{op}: bad shape"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class DomainError(ReasonerError, ValueError):
    """An input lies outside the mathematical domain of an operation"""


class ContractError(ReasonerError, ValueError):
    """A documented precondition was violated"""


class StateError(ReasonerError, RuntimeError):
    """An operation was invoked in the wrong lifecycle state"""


class StorageIOError(ReasonerError, OSError):
    """Filesystem failure while reading or writing a dataset or checkpoint"""

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class DatasetIntegrityError(ReasonerError):
    """An episode on disk is incomplete, malformed or corrupted"""

    def __init__(self, episode_id, message):
        self.episode_id = episode_id
        super().__init__(f"episode {episode_id}: {message}")


class ArtifactMismatchError(ReasonerError):
    """A checkpoint does not match the expected format or the data it is used with"""


class NumericDivergenceError(ReasonerError, ArithmeticError):
    """Training produced a non-finite loss"""

    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at step {step}")


EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_ARTIFACT_MISMATCH = 5


def exit_code(error):
    """Process exit code for an error reaching a management command"""
    if isinstance(error, NumericDivergenceError):
        return EXIT_DIVERGED
    if isinstance(error, ArtifactMismatchError):
        return EXIT_ARTIFACT_MISMATCH
    if isinstance(error, (StorageIOError, DatasetIntegrityError)):
        return EXIT_IO
    if isinstance(error, (ShapeError, DomainError, ContractError)):
        return EXIT_USAGE
    return EXIT_VERIFY_FAILED
