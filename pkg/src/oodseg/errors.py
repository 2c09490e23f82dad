"""Exception hierarchy shared across the package.

Every error raised on purpose by this library derives from
:class:`OodsegError`, so callers (and the CLI) can catch one type.
"""


class OodsegError(Exception):
    """Base class for all errors raised by oodseg."""


# --- raster / file I/O -----------------------------------------------------


class BadMagic(OodsegError):
    """File does not start with a valid CMAP header."""


class TruncatedFile(OodsegError):
    """File length does not match what the header promises."""


class ValueOutOfRange(OodsegError):
    """A stored value is non-finite or outside [0, 1]."""


class DimensionOverflow(OodsegError):
    """Declared dimensions are zero or exceed the supported range."""


class UnsupportedPng(OodsegError):
    """Label/image file is not an 8-bit PNG of a supported mode."""


class IllegalLabelCode(OodsegError):
    """Label mask contains a code other than 0, 1, 255."""


class OverlappingPatches(OodsegError):
    """Two patch rectangles cover a common pixel."""


class CoverageGap(OodsegError):
    """Patch rectangles leave part of the image uncovered."""


class MalformedLine(OodsegError):
    """A text-format line (manifest, schedule, sidecar) cannot be parsed."""


class IoFailure(OodsegError):
    """Underlying OS-level read/write failure."""


# --- tiling -----------------------------------------------------------------


class NotPerfectSquare(OodsegError):
    """Requested patch count is not a positive perfect square."""


class NotDivisible(OodsegError):
    """Image dimensions are not divisible by the requested layout."""


class DimensionMismatch(OodsegError):
    """Arrays or rectangles that must agree in size do not."""


# --- aggregation ------------------------------------------------------------


class ZeroScales(OodsegError):
    """A schedule or combination with no entries."""


class BadWeights(OodsegError):
    """Weight vector is negative, wrong length, or does not sum to 1."""


# --- fusion -----------------------------------------------------------------


class TooFewClasses(OodsegError):
    """Probability volume has fewer than 2 classes."""


class BadClassIndex(OodsegError):
    """Class index or name does not resolve within the volume."""


# --- metrics ----------------------------------------------------------------


class NoEvaluablePixels(OodsegError):
    """Every pixel is ignored; nothing to score."""


class NoPositives(OodsegError):
    """No OOD pixel present; curve metrics undefined."""


class NoNegatives(OodsegError):
    """No in-distribution pixel present; FPR undefined."""


class NoGtSegments(OodsegError):
    """Ground truth contains no OOD segment."""


# --- synthetic scenes -------------------------------------------------------


class PlacementFailure(OodsegError):
    """Could not place the requested objects without overlap."""


# --- reporting --------------------------------------------------------------


class MalformedReport(OodsegError):
    """An evaluation report file is missing fields or unreadable."""
