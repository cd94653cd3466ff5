"""Model-based gradient ascent for the variance-penalized and Sharpe objectives."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import FiniteMdp, Policy
from .errors import ConfigError, VarianceFloorError, VarpgError
from .exact_eval import EvalResult, evaluate

log = logging.getLogger(__name__)


def penalty_g(x: float) -> float:
    return max(0.0, x) ** 2


def penalty_g_prime(x: float) -> float:
    return 2.0 * max(0.0, x)


@dataclass(frozen=True)
class PenaltyConfig:
    lam: float = 1.0
    b: float = 1.0
    continuation_factor: float = 10.0
    outer_iterations: int = 4

    def __post_init__(self):
        # lam == 0 is accepted as the unconstrained (pure mean) objective
        if self.lam < 0:
            raise ConfigError("penalty coefficient must be >= 0")
        if self.b < 0:
            raise ConfigError("variance bound b must be >= 0")
        if self.continuation_factor <= 1:
            raise ConfigError("continuation_factor must be > 1")
        if self.outer_iterations < 1:
            raise ConfigError("outer_iterations must be >= 1")


@dataclass(frozen=True)
class AscentConfig:
    """Step sizes ``a0 / (k + 1) ** a_exp`` or a fixed ``constant_step``.

    ``theta_bounds`` clips every iterate into a box; it is meant for direct
    probability parameterizations.
    """

    a0: float = 0.1
    a_exp: float = 0.6
    max_iterations: int = 1000
    gradient_tolerance: float = 1e-6
    constant_step: float | None = None
    theta_bounds: tuple | None = None

    def __post_init__(self):
        if self.a0 <= 0:
            raise ConfigError("a0 must be > 0")
        if not 0.5 < self.a_exp <= 1.0:
            raise ConfigError("a_exp must lie in (0.5, 1]")
        if self.constant_step is not None and self.constant_step <= 0:
            raise ConfigError("constant_step must be > 0")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")
        if self.theta_bounds is not None:
            lo, hi = self.theta_bounds
            if not lo < hi:
                raise ConfigError("theta_bounds must satisfy lo < hi")

    def step(self, k: int) -> float:
        if self.constant_step is not None:
            return self.constant_step
        return self.a0 / (k + 1) ** self.a_exp


@dataclass
class OptRecord:
    k: int
    theta: np.ndarray
    j: float
    v: float
    objective: float
    direction_norm: float
    lam: float | None = None
    j_tilde: float | None = None
    v_tilde: float | None = None


@dataclass
class OptTrace:
    records: list = field(default_factory=list)
    status: str = "running"
    error: Exception | None = None
    final_state: object = None

    @property
    def last(self) -> OptRecord:
        return self.records[-1]

    @property
    def final_theta(self) -> np.ndarray:
        return self.records[-1].theta

    def extend(self, other: "OptTrace") -> None:
        self.records.extend(other.records)
        self.status = other.status
        self.error = other.error

    def write_csv(self, path, header: dict | None = None) -> None:
        write_trace_csv(self, path, header)


def write_trace_csv(trace: OptTrace, path, header: dict | None = None) -> None:
    """Write a trace as CSV, preceded by ``#`` comment lines holding ``header``.

    Exact-ascent traces have columns ``k, J, V, objective, direction_norm``
    (plus ``lam`` for penalized runs); simulation traces have ``k, j_tilde,
    v_tilde, exact_J, exact_V, objective, exact_grad_norm``. Theta components
    follow in both cases.
    """
    recs = trace.records
    simulated = any(r.j_tilde is not None for r in recs)
    if simulated:
        cols = ["k", "j_tilde", "v_tilde", "exact_J", "exact_V", "objective", "exact_grad_norm"]
        attrs = ["k", "j_tilde", "v_tilde", "j", "v", "objective", "direction_norm"]
    else:
        cols = ["k", "J", "V", "objective", "direction_norm"]
        attrs = ["k", "j", "v", "objective", "direction_norm"]
        if any(r.lam is not None for r in recs):
            cols.append("lam")
            attrs.append("lam")
    ntheta = recs[0].theta.shape[0] if recs else 0
    with open(path, "w", newline="") as fh:
        if header is not None:
            fh.write(f"# {json.dumps(header, sort_keys=True, default=str)}\n")
        fh.write(f"# status: {trace.status}\n")
        w = csv.writer(fh)
        w.writerow(cols + [f"theta_{i}" for i in range(ntheta)])
        for r in recs:
            w.writerow(
                [_fmt(getattr(r, a)) for a in attrs] + [repr(float(t)) for t in r.theta]
            )


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def objective_constrained(res: EvalResult, cfg: PenaltyConfig) -> float:
    """``J(x*) - lam * g(V(x*) - b)``."""
    return res.j_star - cfg.lam * penalty_g(res.v_star - cfg.b)


def constrained_direction(res: EvalResult, lam: float, b: float) -> np.ndarray:
    return res.grad_j_star - lam * penalty_g_prime(res.v_star - b) * res.grad_v_star


def sharpe_ratio(res: EvalResult) -> float:
    return res.j_star / math.sqrt(res.v_star)


def sharpe_direction(res: EvalResult) -> np.ndarray:
    """Gradient of ``J / sqrt(V)`` at x*: ``(grad J - J / (2 V) grad V) / sqrt(V)``."""
    v = res.v_star
    return (res.grad_j_star - res.j_star / (2.0 * v) * res.grad_v_star) / math.sqrt(v)


def _project(theta, bounds):
    if bounds is None:
        return theta
    return np.clip(theta, bounds[0], bounds[1])


def _projected_norm(theta, direction, bounds) -> float:
    """Norm of the direction after dropping components pushing out of the box."""
    if bounds is None:
        return float(np.linalg.norm(direction))
    d = direction.copy()
    lo, hi = bounds
    d[(theta <= lo) & (d < 0)] = 0.0
    d[(theta >= hi) & (d > 0)] = 0.0
    return float(np.linalg.norm(d))


def _ascent(mdp, policy, ascent, direction_fn, objective_fn, lam=None, guard=None) -> OptTrace:
    trace = OptTrace()
    theta = _project(np.array(policy.theta, dtype=float), ascent.theta_bounds)
    k = 0
    while True:
        try:
            res = evaluate(mdp, policy.with_theta(theta))
            if guard is not None:
                guard(res)
        except VarpgError as exc:
            log.warning("ascent aborted at iteration %d: %s", k, exc)
            trace.status = "error"
            trace.error = exc
            return trace
        d = direction_fn(res)
        norm = _projected_norm(theta, d, ascent.theta_bounds)
        trace.records.append(
            OptRecord(k, theta.copy(), res.j_star, res.v_star, objective_fn(res), norm, lam)
        )
        if norm <= ascent.gradient_tolerance:
            trace.status = "converged"
            return trace
        if k >= ascent.max_iterations:
            trace.status = "max-iterations"
            return trace
        theta = _project(theta + ascent.step(k) * d, ascent.theta_bounds)
        k += 1


def exact_constrained_ascent(
    mdp: FiniteMdp, policy: Policy, penalty: PenaltyConfig, ascent: AscentConfig
) -> OptTrace:
    """Gradient ascent on ``J(x*) - lam g(V(x*) - b)`` with exact gradients."""
    lam, b = penalty.lam, penalty.b
    return _ascent(
        mdp,
        policy,
        ascent,
        lambda res: constrained_direction(res, lam, b),
        lambda res: res.j_star - lam * penalty_g(res.v_star - b),
        lam=lam,
    )


def exact_sharpe_ascent(
    mdp: FiniteMdp, policy: Policy, ascent: AscentConfig, variance_floor: float = 1e-3
) -> OptTrace:
    """Gradient ascent on the Sharpe ratio ``J(x*) / sqrt(V(x*))``.

    Stops with status ``"error"`` and a :class:`VarianceFloorError` as soon
    as an iterate has ``V(x*) < variance_floor``.
    """

    def guard(res):
        if res.v_star < variance_floor:
            raise VarianceFloorError(
                f"V(x*) = {res.v_star:.3g} below variance floor {variance_floor:g}"
            )

    return _ascent(mdp, policy, ascent, sharpe_direction, sharpe_ratio, guard=guard)


def penalty_continuation(
    mdp: FiniteMdp, policy: Policy, penalty: PenaltyConfig, ascent: AscentConfig
) -> OptTrace:
    """Solve the penalized problem for growing ``lam``, warm-starting each round."""
    trace = OptTrace()
    cfg = penalty
    for rnd in range(penalty.outer_iterations):
        sub = exact_constrained_ascent(mdp, policy, cfg, ascent)
        trace.extend(sub)
        if sub.status == "error" or not sub.records:
            return trace
        log.info(
            "continuation round %d: lam=%g J=%.6g V=%.6g status=%s",
            rnd, cfg.lam, sub.last.j, sub.last.v, sub.status,
        )
        policy = policy.with_theta(sub.final_theta)
        cfg = replace(cfg, lam=cfg.lam * cfg.continuation_factor)
    return trace
