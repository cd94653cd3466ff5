"""Episode rollouts, likelihood-ratio gradient estimates and the two-timescale
policy-gradient algorithms for the variance-penalized and Sharpe objectives."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import FiniteMdp, Policy
from .errors import ConfigError, TruncatedEpisodeError, VarpgError
from .exact_eval import evaluate
from .exact_optim import (
    OptRecord,
    OptTrace,
    constrained_direction,
    penalty_g,
    penalty_g_prime,
    sharpe_direction,
)

log = logging.getLogger(__name__)


class FiniteMdpEnv:
    """Episodes of a finite MDP from x* until the first return to x*.

    The reward emitted at step ``k`` is ``r(x_k)`` of the state the action is
    taken in, so an episode's total is the reward accumulated before return.
    """

    def __init__(self, mdp: FiniteMdp):
        self.mdp = mdp
        self._cum = mdp.cumulative_kernel
        self._reward = mdp.reward.tolist()
        self._x_star = mdp.recurrent_state
        self._n = mdp.n

    def reset(self, rng):
        return self._x_star

    def observe(self, state):
        return state

    def step(self, state, action, rng, t):
        cum = self._cum[action, state]
        y = min(int(np.searchsorted(cum, rng.random(), side="right")), self._n - 1)
        return y, self._reward[state], y == self._x_star, None


def as_env(env):
    return FiniteMdpEnv(env) if isinstance(env, FiniteMdp) else env


@dataclass
class Episode:
    states: list
    actions: list
    rewards: list
    total_reward: float
    score_sum: np.ndarray
    truncated: bool = False
    info: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.actions)


def rollout(env, policy: Policy, rng: np.random.Generator, max_steps: int = 10_000) -> Episode:
    """Run one episode from x* until first return (or the env's own horizon).

    If ``max_steps`` is reached first the episode is returned with
    ``truncated=True``.
    """
    if max_steps < 1:
        raise ConfigError("max_steps must be >= 1")
    env = as_env(env)
    state = env.reset(rng)
    states, actions, rewards, info = [], [], [], []
    z = np.zeros(policy.num_params)
    total = 0.0
    done = False
    t = 0
    while not done and t < max_steps:
        obs = env.observe(state)
        u = policy.sample_action(obs, rng)
        z = z + policy.score(obs, u)
        state, r, done, extra = env.step(state, u, rng, t)
        states.append(obs)
        actions.append(u)
        rewards.append(r)
        info.append(extra)
        total += r
        t += 1
    return Episode(states, actions, rewards, total, z, truncated=not done, info=info)


def estimate_grad_j(ep: Episode) -> np.ndarray:
    """Likelihood-ratio estimate ``R z`` of the gradient of J(x*)."""
    if ep.truncated:
        raise TruncatedEpisodeError("cannot estimate a gradient from a truncated episode")
    return ep.total_reward * ep.score_sum


def estimate_grad_v(ep: Episode, j_ref: float, grad_j_ref) -> np.ndarray:
    """``R^2 z - 2 J grad J`` with reference values for J(x*) and its gradient."""
    if ep.truncated:
        raise TruncatedEpisodeError("cannot estimate a gradient from a truncated episode")
    return ep.total_reward**2 * ep.score_sum - 2.0 * j_ref * np.asarray(grad_j_ref, dtype=float)


@dataclass(frozen=True)
class ScheduleConfig:
    """Power-law step sizes: fast ``a0/(k+1+k0)^a_exp`` and slow ``b0/(k+1+k0)^b_exp``.

    The exponent ranges make both sums diverge, both squared sums converge
    and the slow/fast ratio vanish. The offset ``k0`` (default 0) damps the
    first steps without changing any of these limits.
    """

    a0: float = 1.0
    a_exp: float = 0.6
    b0: float = 1.0
    b_exp: float = 0.9
    k0: int = 0

    def __post_init__(self):
        if self.a0 <= 0 or self.b0 <= 0:
            raise ConfigError("a0 and b0 must be > 0")
        if not 0.5 < self.a_exp <= 1.0:
            raise ConfigError(f"a_exp must lie in (0.5, 1], got {self.a_exp}")
        if not self.a_exp < self.b_exp <= 1.0:
            raise ConfigError(f"b_exp must lie in (a_exp, 1], got {self.b_exp}")
        if self.k0 < 0:
            raise ConfigError("k0 must be >= 0")

    def alpha(self, k: int) -> float:
        return self.a0 / (k + 1 + self.k0) ** self.a_exp

    def beta(self, k: int) -> float:
        return self.b0 / (k + 1 + self.k0) ** self.b_exp


@dataclass(frozen=True)
class TwoTimescaleState:
    j_tilde: float = 0.0
    v_tilde: float = 1.0
    theta: np.ndarray = None
    k: int = 0


def _track(st: TwoTimescaleState, r: float, a: float) -> tuple[float, float]:
    j = st.j_tilde + a * (r - st.j_tilde)
    v = st.v_tilde + a * (r * r - st.j_tilde**2 - st.v_tilde)
    return j, v


def constrained_update(
    st: TwoTimescaleState, ep: Episode, lam: float, b: float, schedule: ScheduleConfig
) -> TwoTimescaleState:
    """One episode of the two-timescale penalized algorithm.

    The slow step follows ``grad J - lam g'(V - b) grad V`` with the
    estimates ``R z`` and ``(R^2 - 2 J R) z`` built from the fast trackers.
    """
    k = st.k
    if ep.truncated:
        log.warning("episode %d truncated; update skipped", k)
        return replace(st, k=k + 1)
    r = ep.total_reward
    a, beta = schedule.alpha(k), schedule.beta(k)
    j_new, v_new = _track(st, r, a)
    weight = r - lam * penalty_g_prime(st.v_tilde - b) * (r * r - 2.0 * st.j_tilde * r)
    theta = st.theta + beta * weight * ep.score_sum
    return TwoTimescaleState(j_new, v_new, theta, k + 1)


def sharpe_update(
    st: TwoTimescaleState, ep: Episode, schedule: ScheduleConfig, v_floor: float = 1e-3
) -> TwoTimescaleState:
    """One episode of the two-timescale Sharpe-ratio algorithm.

    The variance tracker is clamped to ``v_floor`` both where it is used and
    where it is stored.
    """
    k = st.k
    if ep.truncated:
        log.warning("episode %d truncated; update skipped", k)
        return replace(st, k=k + 1)
    r = ep.total_reward
    a, beta = schedule.alpha(k), schedule.beta(k)
    v = st.v_tilde
    if v < v_floor:
        log.debug("episode %d: variance tracker %.3g clamped to %.3g", k, v, v_floor)
        v = v_floor
    j = st.j_tilde
    weight = (r - (j * r * r - 2.0 * r * j * j) / (2.0 * v)) / math.sqrt(v)
    theta = st.theta + beta * weight * ep.score_sum
    j_new, v_new = _track(st, r, a)
    if v_new < v_floor:
        log.debug("episode %d: variance tracker %.3g clamped to %.3g", k, v_new, v_floor)
        v_new = v_floor
    return TwoTimescaleState(j_new, v_new, theta, k + 1)


@dataclass(frozen=True)
class Constrained:
    lam: float
    b: float
    name = "constrained"


@dataclass(frozen=True)
class Sharpe:
    v_floor: float = 1e-3
    name = "sharpe"


def run_two_timescale(
    env,
    policy: Policy,
    variant,
    schedule: ScheduleConfig,
    episodes: int,
    rng: np.random.Generator,
    log_interval: int = 1000,
    max_steps: int = 10_000,
    init: TwoTimescaleState | None = None,
    tracker_warmup: int = 0,
    max_truncated_fraction: float = 0.01,
) -> OptTrace:
    """Simulation-based optimization; one parameter update per episode.

    Records a snapshot every ``log_interval`` episodes plus the initial and
    final state. For finite MDPs each snapshot also carries the exact J, V
    and the norm of the exact objective gradient at the current theta.

    ``tracker_warmup > 0`` first rolls out that many episodes at the initial
    theta and starts the trackers at their sample mean and variance.

    Truncated episodes are skipped; once more than
    ``max(10, max_truncated_fraction * episodes)`` of them occur the run stops
    with status ``"error"`` and a :class:`TruncatedEpisodeError`.
    """
    if not isinstance(schedule, ScheduleConfig):
        raise ConfigError("schedule must be a ScheduleConfig")
    if episodes < 0 or log_interval < 1:
        raise ConfigError("episodes must be >= 0 and log_interval >= 1")
    mdp = env if isinstance(env, FiniteMdp) else None
    env = as_env(env)
    st = init or TwoTimescaleState(theta=np.array(policy.theta, dtype=float))
    if st.theta is None:
        st = replace(st, theta=np.array(policy.theta, dtype=float))
    if tracker_warmup > 0:
        pilot = policy.with_theta(st.theta)
        returns = np.array(
            [rollout(env, pilot, rng, max_steps).total_reward for _ in range(tracker_warmup)]
        )
        st = replace(st, j_tilde=float(returns.mean()), v_tilde=float(returns.var()))
    trace = OptTrace()
    trace.records.append(_snapshot(mdp, policy, st, variant))
    allowed = max(10, int(max_truncated_fraction * episodes))
    truncated = 0
    for _ in range(episodes):
        current = policy.with_theta(st.theta)
        ep = rollout(env, current, rng, max_steps)
        if ep.truncated:
            truncated += 1
            if truncated > allowed:
                trace.records.append(_snapshot(mdp, policy, st, variant))
                trace.status = "error"
                trace.error = TruncatedEpisodeError(
                    f"{truncated} episodes hit max_steps={max_steps} within {st.k + 1} episodes"
                )
                trace.final_state = st
                log.error("%s", trace.error)
                return trace
        if isinstance(variant, Sharpe):
            st = sharpe_update(st, ep, schedule, variant.v_floor)
        else:
            st = constrained_update(st, ep, variant.lam, variant.b, schedule)
        if st.k % log_interval == 0 or st.k == episodes:
            trace.records.append(_snapshot(mdp, policy, st, variant))
    trace.status = "max-iterations"
    trace.final_state = st
    return trace


def _snapshot(mdp, policy, st: TwoTimescaleState, variant) -> OptRecord:
    theta = np.array(st.theta, dtype=float)
    j = v = obj = norm = math.nan
    if mdp is not None:
        try:
            res = evaluate(mdp, policy.with_theta(theta))
        except VarpgError as exc:
            log.warning("exact evaluation failed at snapshot k=%d: %s", st.k, exc)
        else:
            j, v = res.j_star, res.v_star
            if isinstance(variant, Sharpe):
                if v > 0:
                    obj = j / math.sqrt(v)
                    norm = float(np.linalg.norm(sharpe_direction(res)))
            else:
                obj = j - variant.lam * penalty_g(v - variant.b)
                norm = float(np.linalg.norm(constrained_direction(res, variant.lam, variant.b)))
    return OptRecord(st.k, theta, j, v, obj, norm, j_tilde=st.j_tilde, v_tilde=st.v_tilde)


def sample_episodes(env, policy: Policy, n: int, rng, max_steps: int = 10_000) -> list[Episode]:
    env = as_env(env)
    return [rollout(env, policy, rng, max_steps) for _ in range(n)]
