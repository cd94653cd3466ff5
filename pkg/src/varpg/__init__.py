"""Exact and simulation-based policy gradients for mean-variance criteria in
episodic MDPs."""
from .core import (
    DirectPolicy,
    EpsilonSigmoidPolicy,
    FiniteMdp,
    TabularSoftmaxPolicy,
    build_chain,
    validate_mdp,
)
from .errors import (
    AssumptionViolation,
    ConfigError,
    NumericalError,
    ValidationError,
    VarpgError,
)
from .exact_eval import EvalResult, evaluate
from .exact_optim import (
    AscentConfig,
    PenaltyConfig,
    exact_constrained_ascent,
    exact_sharpe_ascent,
    penalty_continuation,
)
from .simulation import Constrained, ScheduleConfig, Sharpe, rollout, run_two_timescale

__version__ = "0.1.0"
