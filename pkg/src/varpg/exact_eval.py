"""Exact mean and variance of the reward accumulated until return to x*.

With ``P'`` the induced matrix whose x* column is zeroed, the value function
solves ``(I - P') J = r`` and the trajectory variance solves
``(I - P') V = rho`` with ``rho(x) = sum_y P'(y|x) J(y)^2 - (sum_y P'(y|x) J(y))^2``.
Differentiating both systems gives the gradients; every solve reuses one LU
factorization of ``I - P'``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.linalg.lapack import dgecon

from .core import ChainMatrices, FiniteMdp, Policy, build_chain
from .errors import NegativeVarianceError, SingularChainError

RCOND_MIN = 1e-12
VARIANCE_ROUNDOFF = 1e-9


@dataclass(frozen=True)
class Factorization:
    lu: np.ndarray
    piv: np.ndarray
    rcond: float

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return lu_solve((self.lu, self.piv), rhs)


def factorize(p_prime: np.ndarray) -> Factorization:
    """LU-factor ``I - P'``; refuse matrices with reciprocal condition below 1e-12."""
    a = np.eye(p_prime.shape[0]) - p_prime
    anorm = np.abs(a).sum(axis=0).max()
    if not np.all(np.isfinite(a)):
        raise SingularChainError("I - P' has non-finite entries")
    lu, piv, info = _lu(a)
    if info > 0:
        raise SingularChainError(f"I - P' is singular (zero pivot at {info - 1})")
    rcond, _ = dgecon(lu, anorm, norm="1")
    if not rcond >= RCOND_MIN:
        raise SingularChainError(
            f"I - P' is near-singular (rcond={rcond:.3g}); "
            "the chain does not return to the recurrent state"
        )
    return Factorization(lu, piv, float(rcond))


def _lu(a):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lu, piv = lu_factor(a, check_finite=False)
    diag = np.abs(np.diag(lu))
    zero = np.nonzero(diag == 0)[0]
    return lu, piv, int(zero[0]) + 1 if zero.size else 0


def solve_value(chain: ChainMatrices, reward) -> np.ndarray:
    """Expected reward-to-recurrence ``J = (I - P')^{-1} r``."""
    return chain.factorization.solve(np.asarray(reward, dtype=float))


def compute_rho(chain: ChainMatrices, j: np.ndarray) -> np.ndarray:
    pj = chain.p_prime @ j
    return chain.p_prime @ (j * j) - pj * pj


def solve_variance(chain: ChainMatrices, rho: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Trajectory variance ``V = (I - P')^{-1} rho``.

    Entries in ``[-1e-9, 0)`` are roundoff and are reported as 0; anything
    more negative raises :class:`NegativeVarianceError`.
    """
    v = chain.factorization.solve(rho)
    if not clamp:
        return v
    if np.any(v < -VARIANCE_ROUNDOFF):
        raise NegativeVarianceError(f"negative variance {v.min():.3g}")
    return np.where(v < 0, 0.0, v)


def grad_value(chain: ChainMatrices, j: np.ndarray) -> np.ndarray:
    """``K x n`` matrix whose row ``i`` is ``dJ/dtheta_i``."""
    if chain.num_params == 0:
        return np.zeros((0, chain.n))
    rhs = chain.grad_p_prime @ j  # (K, n)
    return chain.factorization.solve(rhs.T).T


def grad_rho(chain: ChainMatrices, j: np.ndarray, grad_j: np.ndarray) -> np.ndarray:
    gp = chain.grad_p_prime
    pp = chain.p_prime
    pj = pp @ j
    gp_j = gp @ j  # (K, n): dP' J
    p_gj = grad_j @ pp.T  # (K, n): P' dJ
    return gp @ (j * j) + 2.0 * (j[None, :] * grad_j) @ pp.T - 2.0 * pj[None, :] * (gp_j + p_gj)


def grad_variance(chain: ChainMatrices, v: np.ndarray, grad_rho_matrix: np.ndarray) -> np.ndarray:
    if chain.num_params == 0:
        return np.zeros((0, chain.n))
    rhs = grad_rho_matrix + chain.grad_p_prime @ v
    return chain.factorization.solve(rhs.T).T


@dataclass(frozen=True, eq=False)
class EvalResult:
    j: np.ndarray
    v: np.ndarray
    rho: np.ndarray
    grad_j: np.ndarray
    grad_v: np.ndarray
    recurrent_state: int = 0

    @property
    def j_star(self) -> float:
        return float(self.j[self.recurrent_state])

    @property
    def v_star(self) -> float:
        return float(self.v[self.recurrent_state])

    @property
    def grad_j_star(self) -> np.ndarray:
        return self.grad_j[:, self.recurrent_state]

    @property
    def grad_v_star(self) -> np.ndarray:
        return self.grad_v[:, self.recurrent_state]

    def to_dict(self) -> dict:
        return {
            "recurrent_state": self.recurrent_state,
            "j": self.j.tolist(),
            "v": self.v.tolist(),
            "rho": self.rho.tolist(),
            "grad_j_star": self.grad_j_star.tolist(),
            "grad_v_star": self.grad_v_star.tolist(),
        }


def evaluate_chain(chain: ChainMatrices, reward) -> EvalResult:
    j = solve_value(chain, reward)
    rho = compute_rho(chain, j)
    v = solve_variance(chain, rho)
    gj = grad_value(chain, j)
    gr = grad_rho(chain, j, gj)
    gv = grad_variance(chain, v, gr)
    return EvalResult(j, v, rho, gj, gv, chain.recurrent_state)


def evaluate(mdp: FiniteMdp, policy: Policy) -> EvalResult:
    """J, V, rho and the gradients of J(x*), V(x*) for ``policy`` on ``mdp``."""
    return evaluate_chain(build_chain(mdp, policy), mdp.reward)


def bellman_residual(chain: ChainMatrices, reward, j) -> float:
    return float(np.max(np.abs(j - reward - chain.p_prime @ j)))


def variance_residual(chain: ChainMatrices, rho, v) -> float:
    return float(np.max(np.abs(v - rho - chain.p_prime @ v)))
