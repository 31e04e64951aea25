"""Exception hierarchy shared by all modules."""


class KirkwoodError(Exception):
    """Base class for every error raised by this package."""


class NonIntegrableTail(KirkwoodError, ValueError):
    """The declared decay envelope does not certify a finite tail integral."""


class ZeroRegularity(KirkwoodError, ValueError):
    """C_beta(u) vanishes, so the convergence radius is unbounded."""


class NoAnchor(KirkwoodError):
    """No point of a configuration satisfies W(x_i | rest) >= -2B."""


class ModeUnsupported(KirkwoodError, TypeError):
    """Operation needs a grid-backed theta family."""


class OutsideDisk(KirkwoodError, ValueError):
    """|z| is not strictly inside the certified convergence disk.

    The radius z0 is a sufficient condition only; the series may well
    converge outside it, but nothing is certified there.
    """


class TailTooLarge(KirkwoodError):
    """The certified truncation tail exceeds the requested tolerance."""


class EnvelopeViolated(KirkwoodError):
    """A density estimate exceeded its rejection envelope by more than 5 sigma."""


class EmptyBatch(KirkwoodError, ValueError):
    """A sample batch without configurations was passed to an estimator."""


class DegenerateEnvironment(KirkwoodError):
    """The Janossy density of the conditioning environment vanishes."""


class KernelBoundViolated(KirkwoodError):
    """A Papangelou kernel estimate exceeded (z e^{2 beta B})^n by more than 5 sigma."""


class SubsetCapExceeded(KirkwoodError, ValueError):
    """Subset enumeration requested beyond the hard size cap."""


class HypothesisFailed(KirkwoodError):
    """A numerical hypothesis check of a multi-body family failed."""


class NormAssumptionViolated(KirkwoodError):
    """Neumann term norms grew, contradicting the user-supplied operator norm."""


class StabilityViolated(KirkwoodError):
    """A configuration with H < -B * n was found for the declared B."""


class NegativityViolated(KirkwoodError):
    """An estimate that must be nonnegative fell below -5 sigma."""
