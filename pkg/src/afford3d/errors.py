"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation-type failures exit 2,
backend failures exit 3, and a memory/target leakage refusal exits 4.
"""


class Afford3DError(Exception):
    exit_code = 1


class ContractViolation(Afford3DError, ValueError):
    """A caller broke an operation's precondition."""

    exit_code = 2


class ValidationError(Afford3DError, ValueError):
    exit_code = 2


class IngestionError(Afford3DError):
    exit_code = 2


class ArtifactParseError(Afford3DError):
    """A persisted artifact could not be decoded."""

    exit_code = 2

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ParseError(Afford3DError):
    """A model response could not be parsed; ``raw`` keeps the payload."""

    exit_code = 3

    def __init__(self, message, raw=None):
        self.raw = raw
        super().__init__(message)


class BackendError(Afford3DError):
    exit_code = 3

    def __init__(self, message, attempts=None):
        self.attempts = attempts
        if attempts is not None:
            message = f"{message} (after {attempts} attempts)"
        super().__init__(message)


class SelectionError(Afford3DError):
    exit_code = 3


class ResolutionError(Afford3DError):
    """The deterministic spatial resolver could not produce an answer."""

    exit_code = 2


class LeakageError(Afford3DError):
    """The memory bank contains the scene being evaluated."""

    exit_code = 4

    def __init__(self, scene_id):
        self.scene_id = scene_id
        super().__init__(
            f"memory bank was built from target scene {scene_id!r}; refusing to run"
        )


class DependencyError(Afford3DError):
    """A later stage was run alone but an upstream stage has no cached artifact."""

    exit_code = 2

    def __init__(self, stage, detail=""):
        self.stage = stage
        msg = f"missing cached artifact for upstream stage {stage!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
