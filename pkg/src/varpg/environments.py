"""Test-bed environments: the 8-state non-convexity MDP, a geometric chain,
random MDP generators, MDP file I/O and the liquid/non-liquid portfolio."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .core import DirectPolicy, FiniteMdp, ensure_valid
from .errors import ConfigError, MdpParseError

log = logging.getLogger(__name__)

# 8-state example; actions 0 = u1 (reward +1), 1 = u2 (reward -1)
X_STAR, X1A, X1B, X2A, X2B, X2C, X2D, T_STATE = range(8)
NONCONVEX_STATE_NAMES = ("x*", "x1a", "x1b", "x2a", "x2b", "x2c", "x2d", "t")


def build_nonconvex_example() -> FiniteMdp:
    """Symmetric deterministic 8-state MDP whose (J, V) region is non-convex.

    Rewards of the chosen action are carried by its unique successor state.
    """
    succ = {
        X_STAR: (X1A, X1B),
        X1A: (X2A, X2B),
        X1B: (X2C, X2D),
        X2A: (T_STATE, T_STATE),
        X2B: (T_STATE, T_STATE),
        X2C: (T_STATE, T_STATE),
        X2D: (T_STATE, T_STATE),
        T_STATE: (X_STAR, X_STAR),
    }
    kernel = np.zeros((2, 8, 8))
    for x, (y0, y1) in succ.items():
        kernel[0, x, y0] = 1.0
        kernel[1, x, y1] = 1.0
    reward = np.zeros(8)
    reward[[X1A, X2A, X2C]] = 1.0
    reward[[X1B, X2B, X2D]] = -1.0
    return FiniteMdp(kernel, reward, X_STAR)


def nonconvex_direct_policy(theta1: float = 0.5, theta2: float = 0.5) -> DirectPolicy:
    """``mu(u1|x*) = theta1`` and ``mu(u1|x1a) = mu(u1|x1b) = theta2``."""
    return DirectPolicy((0, 1, 1, -1, -1, -1, -1, -1), [theta1, theta2])


def nonconvex_frontier(grid_resolution: int) -> np.ndarray:
    """Exact ``(theta1, theta2, J(x*), V(x*))`` over a square grid on ``[0, 1]^2``."""
    from .exact_eval import evaluate

    if grid_resolution < 2:
        raise ConfigError("grid_resolution must be >= 2")
    mdp = build_nonconvex_example()
    grid = np.linspace(0.0, 1.0, grid_resolution)
    rows = np.empty((grid_resolution * grid_resolution, 4))
    i = 0
    for t1 in grid:
        for t2 in grid:
            res = evaluate(mdp, nonconvex_direct_policy(t1, t2))
            rows[i] = (t1, t2, res.j_star, res.v_star)
            i += 1
    return rows


def build_geometric_chain() -> FiniteMdp:
    """Two states {x*, s}; x* always moves to s; in s action 0 stays, action 1 returns.

    r = (0, 1), so B counts visits to s. Pair with :func:`geometric_direct_policy`.
    """
    kernel = np.array(
        [
            [[0.0, 1.0], [0.0, 1.0]],
            [[0.0, 1.0], [1.0, 0.0]],
        ]
    )
    return FiniteMdp(kernel, [0.0, 1.0], 0)


def geometric_direct_policy(p_stay: float = 0.5) -> DirectPolicy:
    return DirectPolicy((-1, 0), [p_stay])


def random_mdp(
    rng: np.random.Generator,
    n: int,
    m: int,
    concentration: float = 1.0,
    reward_scale: float = 1.0,
) -> FiniteMdp:
    """Random MDP with strictly positive transition probabilities (hence ergodic)."""
    kernel = rng.dirichlet(np.full(n, concentration), size=(m, n))
    kernel = np.maximum(kernel, 1e-3)
    kernel /= kernel.sum(axis=2, keepdims=True)
    reward = rng.normal(0.0, reward_scale, n)
    return FiniteMdp(kernel, reward, int(rng.integers(n)))


def random_layered_mdp(
    rng: np.random.Generator, n: int, m: int, max_out: int = 3
) -> FiniteMdp:
    """Random MDP whose trajectories from x* = 0 strictly climb in index then return.

    From state ``x`` transitions go to a few states above ``x`` or back to 0;
    the last state always returns. Every x*-to-x* path therefore has length
    at most ``n`` and can be enumerated.
    """
    kernel = np.zeros((m, n, n))
    for u in range(m):
        for x in range(n):
            above = np.arange(x + 1, n)
            if above.size == 0:
                kernel[u, x, 0] = 1.0
                continue
            k = int(rng.integers(1, min(max_out, above.size) + 1))
            targets = rng.choice(above, size=k, replace=False)
            if x > 0 and rng.random() < 0.5:
                targets = np.append(targets, 0)
            w = rng.dirichlet(np.ones(targets.size))
            kernel[u, x, targets] += w
    kernel /= kernel.sum(axis=2, keepdims=True)
    reward = rng.normal(0.0, 1.0, n)
    return FiniteMdp(kernel, reward, 0)


# ---------------------------------------------------------------------------
# MDP files


def mdp_from_dict(data: dict) -> FiniteMdp:
    try:
        n = int(data["n"])
        m = int(data["m"])
        x_star = int(data["recurrent_state"])
        reward = np.array(data["reward"], dtype=float)
        kernel = np.array(data["kernel"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise MdpParseError(f"malformed MDP description: {exc!r}") from exc
    if kernel.shape != (m, n, n):
        raise MdpParseError(f"kernel has shape {kernel.shape}, expected {(m, n, n)}")
    if reward.shape != (n,):
        raise MdpParseError(f"reward has shape {reward.shape}, expected {(n,)}")
    return ensure_valid(FiniteMdp(kernel, reward, x_star))


def load_mdp(path) -> FiniteMdp:
    """Read and validate an MDP JSON file.

    Raises :class:`MdpParseError` for unreadable/malformed files and
    :class:`~varpg.errors.ValidationError` for stochasticity violations.
    """
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MdpParseError(f"cannot read MDP file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise MdpParseError(f"{path}: top level must be a JSON object")
    return mdp_from_dict(data)


def save_mdp(mdp: FiniteMdp, path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict(), indent=1))


# ---------------------------------------------------------------------------
# portfolio


@dataclass(frozen=True)
class PortfolioConfig:
    horizon: int = 50
    maturity: int = 4
    r_l: float = 0.005
    r_nl_high: float = 0.02
    r_nl_low: float = 0.002
    p_switch: float = 0.1
    p_risk: float = 0.01
    alpha_fraction: float = 0.2
    epsilon: float = 0.05

    def __post_init__(self):
        if not self.horizon >= self.maturity >= 1:
            raise ConfigError("need horizon >= maturity >= 1")
        if min(self.r_l, self.r_nl_high, self.r_nl_low) <= 0:
            raise ConfigError("interest rates must be positive")
        for name in ("p_switch", "p_risk"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.alpha_fraction < 1.0:
            raise ConfigError("alpha_fraction must lie in (0, 1)")
        if not 0.0 < self.epsilon < 0.5:
            raise ConfigError("epsilon must lie in (0, 0.5)")

    @property
    def mean_rate(self) -> float:
        # stationary mean of the symmetric two-state switching chain
        return 0.5 * (self.r_nl_high + self.r_nl_low)

    @property
    def num_features(self) -> int:
        return self.maturity + 2

    @classmethod
    def from_dict(cls, data: dict) -> "PortfolioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown portfolio config fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


INVEST, HOLD = 1, 0


@dataclass(frozen=True)
class PortfolioState:
    """Portfolio as fractions of total value.

    ``chunks[i]`` is the fraction held in the non-liquid chunk maturing in
    ``i + 1`` steps and ``chunk_rates[i]`` the per-step rate it was bought at.
    """

    liquid: float
    chunks: tuple
    chunk_rates: tuple
    rate_high: bool

    def features(self, cfg: PortfolioConfig) -> np.ndarray:
        rate = cfg.r_nl_high if self.rate_high else cfg.r_nl_low
        return np.array((self.liquid, *self.chunks, rate - cfg.mean_rate))

    def check(self, cfg: PortfolioConfig) -> None:
        if len(self.chunks) != cfg.maturity or len(self.chunk_rates) != cfg.maturity:
            raise ConfigError(f"portfolio state must carry {cfg.maturity} maturity slots")
        total = self.liquid + sum(self.chunks)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"portfolio fractions sum to {total}")
        if self.liquid < 0 or min(self.chunks) < 0:
            raise ConfigError("negative portfolio fraction")


def portfolio_initial_state(cfg: PortfolioConfig, rng: np.random.Generator) -> PortfolioState:
    """All-liquid portfolio; the non-liquid rate starts from its stationary law."""
    z = (0.0,) * cfg.maturity
    return PortfolioState(1.0, z, z, bool(rng.random() < 0.5))


def portfolio_step(
    state: PortfolioState, action: int, cfg: PortfolioConfig, rng: np.random.Generator
) -> tuple[PortfolioState, float, bool]:
    """Advance the portfolio one step.

    Returns ``(next_state, reward, invested)`` where ``reward`` is the log of
    the portfolio's gross one-step return and ``invested`` tells whether an
    investment was actually executed (investing needs at least ``alpha``
    in liquid assets; otherwise the action is treated as hold).
    """
    liquid = state.liquid
    chunks = list(state.chunks)
    rates = list(state.chunk_rates)
    rate_now = cfg.r_nl_high if state.rate_high else cfg.r_nl_low
    invested = False
    if action == INVEST:
        if liquid >= cfg.alpha_fraction - 1e-12:
            liquid = max(liquid - cfg.alpha_fraction, 0.0)
            chunks[-1] += cfg.alpha_fraction
            rates[-1] = rate_now
            invested = True
        else:
            log.debug("invest coerced to hold: liquid fraction %.4f < %.4f", liquid, cfg.alpha_fraction)

    liquid *= 1.0 + cfg.r_l
    chunks = [c * (1.0 + r) for c, r in zip(chunks, rates)]
    matured = chunks[0]
    if matured > 0.0 and rng.random() < cfg.p_risk:
        matured = 0.0
    liquid += matured
    chunks = chunks[1:] + [0.0]
    rates = rates[1:] + [0.0]

    total = liquid + sum(chunks)
    reward = math.log(total)
    nxt = PortfolioState(
        liquid / total,
        tuple(c / total for c in chunks),
        tuple(rates),
        state.rate_high != (rng.random() < cfg.p_switch),
    )
    return nxt, reward, invested


class PortfolioEnv:
    """Fixed-horizon episodic wrapper around :func:`portfolio_step`."""

    def __init__(self, cfg: PortfolioConfig):
        self.cfg = cfg
        self.max_steps = cfg.horizon

    def reset(self, rng):
        return portfolio_initial_state(self.cfg, rng)

    def observe(self, state):
        return state.features(self.cfg)

    def step(self, state, action, rng, t):
        nxt, reward, invested = portfolio_step(state, action, self.cfg, rng)
        return nxt, reward, t + 1 >= self.cfg.horizon, invested


def portfolio_episode(cfg: PortfolioConfig, policy, rng: np.random.Generator):
    """One fixed-horizon episode (``tau = horizon``) from the all-liquid state."""
    from .simulation import rollout

    return rollout(PortfolioEnv(cfg), policy, rng, max_steps=cfg.horizon)
