"""Shared oracles and instance generators for the test-suite."""
import numpy as np

from varpg.core import TabularSoftmaxPolicy
from varpg.environments import random_mdp


def random_instance(seed, n=5, m=3, scale=1.0):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, n, m)
    policy = TabularSoftmaxPolicy.for_mdp(mdp, rng.normal(0.0, scale, n * m))
    return mdp, policy


def central_diff(f, theta, h=1e-6):
    """Central finite differences of a scalar or vector valued ``f`` at ``theta``."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for i in range(theta.shape[0]):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        cols.append((np.asarray(f(tp)) - np.asarray(f(tm))) / (2 * h))
    return np.array(cols)


def rel_err(a, b, floor=1e-4):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.abs(b), floor)


def enumerate_returns(mdp, policy, max_len=50):
    """(probability, accumulated reward) of every x*-to-x* trajectory, by DFS."""
    tab = policy.table()
    xs = mdp.recurrent_state
    out = []

    def walk(x, prob, acc, depth):
        if depth > max_len:
            raise RuntimeError("trajectory too long for enumeration")
        acc = acc + mdp.reward[x]
        for y in range(mdp.n):
            p = sum(tab[x, u] * mdp.kernel[u, x, y] for u in range(mdp.m))
            if p == 0.0:
                continue
            if y == xs:
                out.append((prob * p, acc))
            else:
                walk(y, prob * p, acc, depth + 1)

    walk(xs, 1.0, 0.0, 0)
    return out


def enumerated_moments(mdp, policy):
    traj = enumerate_returns(mdp, policy)
    probs = np.array([p for p, _ in traj])
    vals = np.array([b for _, b in traj])
    mean = probs @ vals
    return mean, probs @ (vals - mean) ** 2, len(traj)
