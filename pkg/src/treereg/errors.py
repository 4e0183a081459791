"""Typed errors shared across the package."""


class TreeregError(Exception):
    """Base class for all package-specific errors."""


class DegeneratePointmap(TreeregError, ValueError):
    """Pointmap has no usable geometry (no valid pixels, or zero spread)."""


class DegenerateConfiguration(TreeregError, ValueError):
    """Point configuration too degenerate for the requested fit."""


class InsufficientCorrespondences(TreeregError, ValueError):
    """Too few usable 2D-3D correspondences for pose recovery."""


class ShapeMismatch(TreeregError, ValueError):
    """Array shapes are inconsistent with each other or with the config."""


class InvalidPreset(TreeregError, ValueError):
    """Unknown synthetic scene preset name."""


class UnknownView(TreeregError, LookupError):
    """A view id the predictor does not serve."""


class ProtocolError(TreeregError, RuntimeError):
    """Wire-protocol violation or error frame from an external predictor."""


class TooFewPoses(TreeregError, ValueError):
    """Fewer than two valid poses, pairwise metrics undefined."""


class EmptyCloud(TreeregError, ValueError):
    """Point cloud with no points."""


class BadMagic(TreeregError, ValueError):
    """File does not start with the expected magic bytes."""


class TruncatedFile(TreeregError, ValueError):
    """File shorter than its header promises."""


class UnsupportedVersion(TreeregError, ValueError):
    """File version this reader does not understand."""


class NotSquare(TreeregError, ValueError):
    """Similarity matrix file is not square."""


class AsymmetryTooLarge(TreeregError, ValueError):
    """Similarity matrix asymmetry exceeds the symmetrization tolerance."""


class InvalidSimilarity(TreeregError, ValueError):
    """Similarity matrix violates range or diagonal constraints."""
