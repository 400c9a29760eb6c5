from typing import List, Optional, Tuple


class CrfRefineError(Exception):
    """Base class for every error raised by crfrefine."""


class InvalidInputError(CrfRefineError, ValueError):
    pass


class InvalidParameterError(CrfRefineError, ValueError):
    pass


class GridTooLargeError(InvalidInputError):
    pass


class UndefinedTestError(CrfRefineError):
    pass


class FormatError(CrfRefineError):
    """A binary file could not be parsed. `offset` is the byte offset of the problem."""

    def __init__(self, kind: str, message: str, offset: Optional[int] = None):
        self.kind = kind
        self.offset = offset
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{kind}: {message}{where}")


class ManifestError(CrfRefineError):
    """Manifest validation failed. `issues` holds (json_path, message) pairs."""

    def __init__(self, issues: List[Tuple[str, str]]):
        self.issues = list(issues)
        lines = [f"{path}: {msg}" for path, msg in self.issues]
        super().__init__("invalid manifest:\n  " + "\n  ".join(lines))

    @property
    def paths(self) -> List[str]:
        return [path for path, _ in self.issues]
