"""Exception hierarchy shared by the library and the command line runner."""


class VarpgError(Exception):
    """Base class for all errors raised by :mod:`varpg`."""


class ConfigError(VarpgError):
    """Invalid configuration (bad schedule, bad policy spec, bad budgets)."""


class MdpParseError(ConfigError):
    """An MDP description file could not be parsed."""


class ValidationError(ConfigError):
    """An MDP failed its well-formedness checks.

    The offending entries are available on ``violations``.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations[:10])
        more = "" if len(self.violations) <= 10 else f" (+{len(self.violations) - 10} more)"
        super().__init__(f"invalid MDP: {lines}{more}")


class SimulationOnlyPolicyError(VarpgError):
    """The policy has no closed-form state-indexed probabilities."""


class NumericalError(VarpgError):
    """A numerical routine failed."""


class SingularChainError(NumericalError):
    """``I - P'`` is singular or too badly conditioned to solve with."""


class NegativeVarianceError(NumericalError):
    """A computed variance is negative beyond roundoff."""


class AssumptionViolation(VarpgError):
    """A modelling assumption guard fired at run time."""


class VarianceFloorError(AssumptionViolation):
    """The trajectory variance dropped below the configured floor."""


class TruncatedEpisodeError(AssumptionViolation):
    """A gradient estimate was requested from a truncated episode."""
