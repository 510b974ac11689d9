"""
milforge error hierarchy
========================

Every failure raised by the toolkit derives from ``MilForgeError``. Each
class carries the process exit code the CLI reports for it:

    1  usage error    (bad flags, bad configuration values)
    2  data error     (unreadable / malformed / inconsistent inputs)
    3  internal error (violated library contract)
"""

from typing import Iterable, Optional


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class MilForgeError(Exception):
    """Base class for all milforge errors"""
    exit_code = EXIT_INTERNAL


# -- usage -----------------------------------------------------------------

class ConfigurationError(MilForgeError):
    """Configuration is inconsistent or refers to something unavailable"""
    exit_code = EXIT_USAGE


class ParameterError(MilForgeError, ValueError):
    """A numeric parameter is outside its allowed range"""
    exit_code = EXIT_USAGE


# -- data ------------------------------------------------------------------

class ShapeError(MilForgeError, ValueError):
    """Operand shapes do not agree"""
    exit_code = EXIT_DATA

    def __init__(self, message: str, *shapes: tuple):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class DimensionError(ShapeError):
    """Embedding dimension disagrees with the dataset or model"""


class EmptyBagError(MilForgeError, ValueError):
    """A bag with zero instances was passed where K >= 1 is required"""
    exit_code = EXIT_DATA


class FormatError(MilForgeError):
    """A file does not follow the expected binary or text layout"""
    exit_code = EXIT_DATA


class ChecksumError(FormatError):
    """Stored checksum or length does not match the payload"""


class SlideReadError(MilForgeError, OSError):
    """A slide image could not be opened or decoded"""
    exit_code = EXIT_DATA


class BoundsError(MilForgeError, IndexError):
    """A requested region lies outside the slide"""
    exit_code = EXIT_DATA


class AlignmentError(MilForgeError, ValueError):
    """Two sequences that must align 1:1 have different lengths"""
    exit_code = EXIT_DATA


class StratificationError(MilForgeError, ValueError):
    """A class has too few slides to be split into train/val/test"""
    exit_code = EXIT_DATA


class UndefinedMetricError(MilForgeError, ValueError):
    """A metric is undefined for the given labels (e.g. single-class AUC)"""
    exit_code = EXIT_DATA


class AggregationError(MilForgeError, ValueError):
    """Not enough fold reports to aggregate"""
    exit_code = EXIT_DATA


class MissingEmbeddingsError(MilForgeError):
    """Embedding files are missing for some slides"""
    exit_code = EXIT_DATA

    def __init__(self, slide_ids: Iterable[str], where: Optional[str] = None):
        self.slide_ids = sorted(slide_ids)
        listing = ", ".join(self.slide_ids)
        location = f" in {where}" if where else ""
        super().__init__(f"missing embeddings for {len(self.slide_ids)} slide(s){location}: {listing}")


class UnknownSlideError(MilForgeError, KeyError):
    """A slide id is not part of the project"""
    exit_code = EXIT_DATA

    def __init__(self, slide_id: str, available: Iterable[str]):
        self.slide_id = slide_id
        self.available = sorted(available)
        super().__init__(f"unknown slide '{slide_id}'; available: {', '.join(self.available)}")

    def __str__(self) -> str:
        return self.args[0]


# -- internal --------------------------------------------------------------

class ContractError(MilForgeError):
    """A caller violated a documented precondition"""
    exit_code = EXIT_INTERNAL


def exit_code_for(error: BaseException) -> int:
    """Map any exception to the CLI exit-code contract"""
    if isinstance(error, MilForgeError):
        return error.exit_code
    return EXIT_INTERNAL
