"""Exception types shared across the package.

Domain errors are deliberately fine-grained so callers (and the CLI) can map
them to exit codes and machine-parsable categories.  Divergences that can
legitimately be infinite (KL against a distribution with smaller support) are
NOT errors: those return ``math.inf`` so metric streams stay writable.
"""


class DamlabError(Exception):
    """Base class for all domain errors raised by this package."""

    #: short machine-parsable category used by the CLI error lines
    category = "error"


class InvalidTokenError(DamlabError):
    """A token, state vector, or state index is outside the space."""

    category = "invalid-token"


class InvalidLevelError(DamlabError):
    """A jump level outside {0, ..., N} (or an op's narrower range) was given."""

    category = "invalid-level"


class MalformedDistributionError(DamlabError):
    """Probabilities are negative, non-finite, or do not sum to 1 within 1e-9."""

    category = "malformed-distribution"


class SpaceTooLargeError(DamlabError):
    """An exact enumeration would exceed the configured state cap."""

    category = "space-too-large"


class RatioUndefinedError(DamlabError):
    """A path-probability ratio hit a zero denominator (support violation)."""

    category = "ratio-undefined"


class NoMaskedPositionError(DamlabError):
    """A jump distribution was requested at a fully unmasked state."""

    category = "no-masked-position"


class IncompleteEndpointError(DamlabError):
    """An endpoint that must be fully unmasked still contains masks."""

    category = "incomplete-endpoint"


class DegenerateDenominatorError(DamlabError):
    """All importance weights of a self-normalized average underflowed to 0."""

    category = "degenerate-denominator"


class InvalidTargetError(DamlabError):
    """A matching target that must be strictly positive is zero or negative."""

    category = "invalid-target"


class NonFiniteGradientError(DamlabError):
    """An optimizer step received a NaN or infinite gradient."""

    category = "non-finite-gradient"


class NumericalOverflowError(DamlabError):
    """A quantity overflowed despite log-space arithmetic."""

    category = "numerical-overflow"


class ConfigError(DamlabError):
    """A config file or CLI flag set is malformed (CLI exit code 2)."""

    category = "config"


class OracleCheckError(DamlabError):
    """A preflight oracle identity (value recursion, HJB, normalization) failed."""

    category = "oracle-check"
