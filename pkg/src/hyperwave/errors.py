"""Exception types shared across the package."""


class HyperwaveError(Exception):
    """Base class for package-specific failures."""


class CapExceeded(HyperwaveError):
    """A requested radius or time exceeds the configured safety cap."""


class RelatorViolated(HyperwaveError):
    """Group data does not satisfy the required surface relator."""


class NotTransitive(HyperwaveError):
    """A permutation assignment does not define a connected cover."""


class QuadratureFailure(HyperwaveError):
    """An adaptive quadrature did not reach the requested tolerance."""


class SingularConfiguration(HyperwaveError):
    """Input sits on a singular locus where the kernel is unbounded."""


class HypothesisViolated(HyperwaveError):
    """Arguments fall outside the hypothesis of the estimate being evaluated."""


class WindowUnreliable(HyperwaveError):
    """A spectral window reaches beyond the trusted part of the spectrum."""


class DisconnectedGraph(HyperwaveError):
    """The proximity graph of a sample has more than one component."""


class EmptyWindow(HyperwaveError):
    """No eigenvalues fall in the requested window."""


class UndefinedRho(HyperwaveError):
    """sqrt(lambda - 1/4) requested for an eigenvalue at or below 1/4."""


class DenominatorDegenerate(HyperwaveError):
    """A reconstruction denominator is too close to zero to divide by."""


class InvalidParams(HyperwaveError):
    """Parameters of a potential family fail their validity constraints."""


class MissingArtifact(HyperwaveError):
    """A pipeline stage needs an artifact that has not been produced."""


class ConfigError(HyperwaveError):
    """Invalid configuration; the message names the offending field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class LockHeld(HyperwaveError):
    """Another experiment already holds the output directory's lock file."""


class WindowEdgeWarning(UserWarning):
    """An eigenvalue lies within tolerance of a window edge."""
