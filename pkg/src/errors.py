"""
Exception hierarchy shared by every module.

Each class carries the exit code the command-line entry point maps it to:
1 = I/O problem, 2 = user or configuration problem, 3 = numeric fault.
"""

from typing import Optional


class GenreError(Exception):
    exit_code = 2


# --- I/O (exit 1) -----------------------------------------------------------

class WavFormatError(GenreError):
    exit_code = 1

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class UnsupportedFormatError(WavFormatError):
    def __init__(self, path, field: str, value):
        self.field = field
        self.value = value
        super().__init__(path, f"unsupported {field} '{value}' (expected 16-bit PCM WAV, 1 or 2 channels)")


class CorruptFileError(GenreError):
    exit_code = 1

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path}: corrupt container at byte {offset}: {message}")


class MissingArtifactError(GenreError):
    exit_code = 1


class UnreadableClipsError(GenreError):
    exit_code = 1

    def __init__(self, failures):
        self.failures = list(failures)
        listing = "\n".join(f"  {path}: {reason}" for path, reason in self.failures)
        super().__init__(f"{len(self.failures)} clip(s) could not be read:\n{listing}")


class ArtifactWriteError(GenreError):
    exit_code = 1

    def __init__(self, path, cause: Exception):
        self.path = str(path)
        super().__init__(f"cannot write {self.path}: {cause}")


# --- user / configuration (exit 2) --------------------------------------------

class ConfigError(GenreError, ValueError):
    pass


class ContractError(GenreError, ValueError):
    pass


class DomainError(GenreError, ValueError):
    pass


class ResolutionError(GenreError, ValueError):
    pass


class ShapeError(GenreError, ValueError):
    pass


class LabelError(GenreError, ValueError):
    pass


class DataError(GenreError, ValueError):
    pass


class QuotaError(GenreError, ValueError):
    def __init__(self, genre: str, message: str):
        self.genre = genre
        super().__init__(f"genre '{genre}': {message}")


class GranularityError(GenreError, ValueError):
    def __init__(self, genre: str, message: str):
        self.genre = genre
        super().__init__(f"genre '{genre}': {message}")


class UninitializedStatsError(GenreError, RuntimeError):
    pass


class ArtifactMismatchError(GenreError):
    pass


# --- numeric (exit 3) ---------------------------------------------------------

class NumericFault(GenreError, ArithmeticError):
    exit_code = 3

    def __init__(self, message: str, epoch: Optional[int] = None, batch: Optional[int] = None):
        self.epoch = epoch
        self.batch = batch
        where = ""
        if epoch is not None:
            where = f" (epoch {epoch}" + (f", batch {batch})" if batch is not None else ")")
        super().__init__(message + where)
