"""Finite MDP model, differentiable policies and the induced chain matrices.

States and actions are 0-based integers. The transition kernel is stored as an
array of shape ``(m, n, n)`` indexed ``[action, from, to]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, SimulationOnlyPolicyError, ValidationError

ROW_SUM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    """Finite MDP with state rewards and a designated recurrent state."""

    kernel: np.ndarray
    reward: np.ndarray
    recurrent_state: int = 0

    def __post_init__(self):
        kernel = np.array(self.kernel, dtype=float)
        reward = np.array(self.reward, dtype=float).reshape(-1)
        if kernel.ndim != 3 or kernel.shape[1] != kernel.shape[2]:
            raise ConfigError(f"kernel must have shape (m, n, n), got {kernel.shape}")
        if reward.shape[0] != kernel.shape[1]:
            raise ConfigError(
                f"reward has length {reward.shape[0]} but kernel has {kernel.shape[1]} states"
            )
        kernel.setflags(write=False)
        reward.setflags(write=False)
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "recurrent_state", int(self.recurrent_state))

    @property
    def n(self) -> int:
        return self.kernel.shape[1]

    @property
    def m(self) -> int:
        return self.kernel.shape[0]

    @cached_property
    def cumulative_kernel(self) -> np.ndarray:
        return np.cumsum(self.kernel, axis=2)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "recurrent_state": self.recurrent_state,
            "reward": self.reward.tolist(),
            "kernel": self.kernel.tolist(),
        }

    def same_as(self, other: "FiniteMdp") -> bool:
        return (
            self.recurrent_state == other.recurrent_state
            and self.kernel.shape == other.kernel.shape
            and np.array_equal(self.kernel, other.kernel)
            and np.array_equal(self.reward, other.reward)
        )


class Violation(NamedTuple):
    kind: str
    location: tuple
    detail: str

    def __str__(self):
        return f"{self.kind} at {self.location}: {self.detail}"


def validate_mdp(mdp: FiniteMdp) -> list[Violation]:
    """Return every well-formedness violation of ``mdp`` (empty if valid)."""
    report = []
    if mdp.n < 1 or mdp.m < 1:
        report.append(Violation("size", (mdp.m, mdp.n), "need at least one state and one action"))
    if not 0 <= mdp.recurrent_state < mdp.n:
        report.append(
            Violation("index", ("recurrent_state",), f"{mdp.recurrent_state} not in [0, {mdp.n})")
        )
    for u, x, y in zip(*np.nonzero(~np.isfinite(mdp.kernel))):
        report.append(Violation("non-finite", (int(u), int(x), int(y)), "transition probability"))
    for u, x, y in zip(*np.nonzero(mdp.kernel < 0)):
        report.append(
            Violation("negative", (int(u), int(x), int(y)), f"probability {mdp.kernel[u, x, y]!r}")
        )
    sums = mdp.kernel.sum(axis=2)
    for u, x in zip(*np.nonzero(~(np.abs(sums - 1.0) <= ROW_SUM_TOL))):
        s = sums[u, x]
        report.append(
            Violation("row-sum", (int(u), int(x)), f"sums to {s!r} (deficit {1.0 - s:.6g})")
        )
    for (x,) in zip(*np.nonzero(~np.isfinite(mdp.reward))):
        report.append(Violation("non-finite", ("reward", int(x)), f"reward {mdp.reward[x]!r}"))
    return report


def ensure_valid(mdp: FiniteMdp) -> FiniteMdp:
    report = validate_mdp(mdp)
    if report:
        raise ValidationError(report)
    return mdp


# ---------------------------------------------------------------------------
# policies


class Policy:
    """Differentiable stochastic policy ``mu_theta(u | x)``.

    Subclasses are frozen dataclasses carrying ``theta``; use
    :meth:`with_theta` to obtain an updated copy.
    """

    kind = "abstract"
    theta: np.ndarray

    @property
    def num_params(self) -> int:
        return self.theta.shape[0]

    def with_theta(self, theta) -> "Policy":
        raise NotImplementedError

    def action_probs(self, x) -> np.ndarray:
        raise NotImplementedError

    def score(self, x, u: int) -> np.ndarray:
        raise NotImplementedError

    def sample_action(self, x, rng: np.random.Generator) -> int:
        probs = self.action_probs(x)
        u = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
        return min(u, probs.shape[0] - 1)

    # exact path: only policies with state-indexed probabilities
    def table(self) -> np.ndarray:
        """Array ``(n, m)`` of action probabilities per state."""
        raise SimulationOnlyPolicyError(f"{self.kind} policy has no state-indexed table")

    def jacobian(self) -> np.ndarray:
        """Array ``(n, m, K)`` of derivatives of ``mu(u|x)`` with respect to theta."""
        raise SimulationOnlyPolicyError(f"{self.kind} policy has no state-indexed table")


def _freeze(a) -> np.ndarray:
    a = np.array(a, dtype=float).reshape(-1)
    a.setflags(write=False)
    return a


class _TabularMixin:
    """Shared sampling/score for policies with a probability table."""

    @cached_property
    def _cum_table(self):
        return np.cumsum(self.table(), axis=1)

    @cached_property
    def _score_table(self):
        tab = self.table()
        with np.errstate(divide="ignore", invalid="ignore"):
            s = self.jacobian() / tab[:, :, None]
        s[tab == 0] = np.nan
        return s

    def action_probs(self, x) -> np.ndarray:
        return self.table()[int(x)]

    def score(self, x, u: int) -> np.ndarray:
        s = self._score_table[int(x), int(u)]
        if np.isnan(s[0]):
            raise ValueError(f"action {u} has zero probability in state {x}")
        return s

    def sample_action(self, x, rng: np.random.Generator) -> int:
        cum = self._cum_table[int(x)]
        u = int(np.searchsorted(cum, rng.random(), side="right"))
        return min(u, cum.shape[0] - 1)


@dataclass(frozen=True, eq=False)
class TabularSoftmaxPolicy(_TabularMixin, Policy):
    """One parameter per (state, action); ``mu(u|x) ∝ exp(theta[x, u])``.

    ``theta`` is stored flat with index ``x * m + u``.
    """

    n_states: int
    n_actions: int
    theta: np.ndarray = None
    kind = "tabular-softmax"

    def __post_init__(self):
        k = self.n_states * self.n_actions
        theta = np.zeros(k) if self.theta is None else self.theta
        theta = _freeze(theta)
        if theta.shape[0] != k:
            raise ConfigError(f"tabular-softmax needs {k} parameters, got {theta.shape[0]}")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def for_mdp(cls, mdp: FiniteMdp, theta=None) -> "TabularSoftmaxPolicy":
        return cls(mdp.n, mdp.m, theta)

    def with_theta(self, theta) -> "TabularSoftmaxPolicy":
        return TabularSoftmaxPolicy(self.n_states, self.n_actions, theta)

    @cached_property
    def _table(self):
        logits = self.theta.reshape(self.n_states, self.n_actions)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        tab = e / e.sum(axis=1, keepdims=True)
        tab.setflags(write=False)
        return tab

    def table(self) -> np.ndarray:
        return self._table

    def jacobian(self) -> np.ndarray:
        n, m = self.n_states, self.n_actions
        tab = self._table
        jac = np.zeros((n, m, n * m))
        for x in range(n):
            block = np.diag(tab[x]) - np.outer(tab[x], tab[x])
            jac[x, :, x * m:(x + 1) * m] = block
        return jac

    @cached_property
    def _score_table(self):
        # d log mu(u|x) / d theta[x, u'] = delta(u, u') - mu(u'|x)
        n, m = self.n_states, self.n_actions
        s = np.zeros((n, m, n * m))
        eye = np.eye(m)
        for x in range(n):
            s[x, :, x * m:(x + 1) * m] = eye - self._table[x][None, :]
        return s


@dataclass(frozen=True, eq=False)
class DirectPolicy(_TabularMixin, Policy):
    """Two-action policy whose probability of action 0 *is* a parameter.

    ``state_params[x]`` is the index of the parameter giving ``mu(0|x)``;
    ``-1`` means the state uses the fixed ``default_prob`` instead. Several
    states may share one parameter. Parameters must lie in ``[0, 1]``.
    """

    state_params: tuple
    theta: np.ndarray = None
    default_prob: float = 0.5
    kind = "direct"

    def __post_init__(self):
        sp = tuple(int(i) for i in self.state_params)
        k = max(sp) + 1 if sp else 0
        theta = np.full(k, 0.5) if self.theta is None else self.theta
        theta = _freeze(theta)
        if theta.shape[0] != k:
            raise ConfigError(f"direct policy needs {k} parameters, got {theta.shape[0]}")
        if np.any(theta < 0) or np.any(theta > 1):
            raise ConfigError(f"direct policy parameters must lie in [0, 1], got {theta}")
        object.__setattr__(self, "state_params", sp)
        object.__setattr__(self, "theta", theta)

    def with_theta(self, theta) -> "DirectPolicy":
        return DirectPolicy(self.state_params, theta, self.default_prob)

    @cached_property
    def _table(self):
        tab = np.empty((len(self.state_params), 2))
        for x, i in enumerate(self.state_params):
            p = self.theta[i] if i >= 0 else self.default_prob
            tab[x] = (p, 1.0 - p)
        tab.setflags(write=False)
        return tab

    def table(self) -> np.ndarray:
        return self._table

    def jacobian(self) -> np.ndarray:
        jac = np.zeros((len(self.state_params), 2, self.num_params))
        for x, i in enumerate(self.state_params):
            if i >= 0:
                jac[x, 0, i] = 1.0
                jac[x, 1, i] = -1.0
        return jac


@dataclass(frozen=True, eq=False)
class EpsilonSigmoidPolicy(Policy):
    """Binary policy investing (action 1) w.p. ``eps + (1 - 2 eps) sigmoid(theta . x)``.

    ``x`` is a feature vector. When ``features`` (shape ``(n, d)``) is given,
    integer states are mapped through it and the exact path is available.
    """

    theta: np.ndarray
    epsilon: float = 0.05
    features: np.ndarray | None = None
    kind = "epsilon-sigmoid"

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ConfigError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")
        object.__setattr__(self, "theta", _freeze(self.theta))
        if self.features is not None:
            f = np.array(self.features, dtype=float)
            if f.ndim != 2 or f.shape[1] != self.theta.shape[0]:
                raise ConfigError(f"features must have shape (n, {self.theta.shape[0]})")
            f.setflags(write=False)
            object.__setattr__(self, "features", f)

    def with_theta(self, theta) -> "EpsilonSigmoidPolicy":
        return EpsilonSigmoidPolicy(theta, self.epsilon, self.features)

    def _features(self, x) -> np.ndarray:
        if isinstance(x, (int, np.integer)):
            if self.features is None:
                raise SimulationOnlyPolicyError("integer state given but no feature map")
            return self.features[x]
        x = np.asarray(x, dtype=float)
        if x.shape != self.theta.shape:
            raise ValueError(f"feature vector has shape {x.shape}, expected {self.theta.shape}")
        return x

    def _sigmoid(self, f) -> float:
        a = float(self.theta @ f)
        if a >= 0:
            return 1.0 / (1.0 + math.exp(-a))
        e = math.exp(a)
        return e / (1.0 + e)

    def invest_prob(self, x) -> float:
        return self.epsilon + (1.0 - 2.0 * self.epsilon) * self._sigmoid(self._features(x))

    def action_probs(self, x) -> np.ndarray:
        p = self.invest_prob(x)
        return np.array([1.0 - p, p])

    def score(self, x, u: int) -> np.ndarray:
        f = self._features(x)
        s = self._sigmoid(f)
        p1 = self.epsilon + (1.0 - 2.0 * self.epsilon) * s
        dp1 = (1.0 - 2.0 * self.epsilon) * s * (1.0 - s)
        if u == 1:
            return (dp1 / p1) * f
        if u == 0:
            return (-dp1 / (1.0 - p1)) * f
        raise ValueError(f"binary policy has no action {u}")

    def sample_action(self, x, rng: np.random.Generator) -> int:
        return 1 if rng.random() < self.invest_prob(x) else 0

    def table(self) -> np.ndarray:
        if self.features is None:
            raise SimulationOnlyPolicyError(
                "epsilon-sigmoid policy over continuous features is simulation-only"
            )
        return np.array([self.action_probs(x) for x in range(self.features.shape[0])])

    def jacobian(self) -> np.ndarray:
        if self.features is None:
            raise SimulationOnlyPolicyError(
                "epsilon-sigmoid policy over continuous features is simulation-only"
            )
        n = self.features.shape[0]
        jac = np.zeros((n, 2, self.num_params))
        for x in range(n):
            f = self.features[x]
            s = self._sigmoid(f)
            d = (1.0 - 2.0 * self.epsilon) * s * (1.0 - s) * f
            jac[x, 1] = d
            jac[x, 0] = -d
        return jac


def action_probs(policy: Policy, x) -> np.ndarray:
    return policy.action_probs(x)


def score(policy: Policy, x, u: int) -> np.ndarray:
    return policy.score(x, u)


def sample_action(policy: Policy, x, rng: np.random.Generator) -> int:
    return policy.sample_action(x, rng)


# ---------------------------------------------------------------------------
# induced chain


@dataclass(frozen=True, eq=False)
class ChainMatrices:
    """Induced chain ``P_theta``, its x*-column-zeroed copy ``P'`` and ``dP'/dtheta``."""

    p_theta: np.ndarray
    p_prime: np.ndarray
    grad_p_prime: np.ndarray  # shape (K, n, n)
    recurrent_state: int = 0

    @property
    def n(self) -> int:
        return self.p_theta.shape[0]

    @property
    def num_params(self) -> int:
        return self.grad_p_prime.shape[0]

    @cached_property
    def factorization(self):
        from .exact_eval import factorize

        return factorize(self.p_prime)


def chain_from_matrix(p: np.ndarray, recurrent_state: int = 0, grad_p=None) -> ChainMatrices:
    """Build :class:`ChainMatrices` directly from an induced matrix."""
    p = np.array(p, dtype=float)
    n = p.shape[0]
    grad_p = np.zeros((0, n, n)) if grad_p is None else np.array(grad_p, dtype=float)
    p_prime = p.copy()
    p_prime[:, recurrent_state] = 0.0
    grad_pp = grad_p.copy()
    grad_pp[:, :, recurrent_state] = 0.0
    return ChainMatrices(p, p_prime, grad_pp, recurrent_state)


def build_chain(mdp: FiniteMdp, policy: Policy) -> ChainMatrices:
    """Induced transition matrix and its parameter derivatives.

    Raises :class:`SimulationOnlyPolicyError` for policies without a
    state-indexed probability table.
    """
    tab = policy.table()
    jac = policy.jacobian()
    if tab.shape != (mdp.n, mdp.m):
        raise ConfigError(f"policy table has shape {tab.shape}, MDP needs {(mdp.n, mdp.m)}")
    p = np.einsum("xu,uxy->xy", tab, mdp.kernel)
    grad_p = np.einsum("xuk,uxy->kxy", jac, mdp.kernel)
    return chain_from_matrix(p, mdp.recurrent_state, grad_p)

