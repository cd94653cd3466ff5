import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import central_diff, random_instance, rel_err
from varpg.core import (
    DirectPolicy,
    EpsilonSigmoidPolicy,
    FiniteMdp,
    TabularSoftmaxPolicy,
    action_probs,
    build_chain,
    sample_action,
    score,
    validate_mdp,
)
from varpg.environments import build_nonconvex_example, nonconvex_direct_policy, random_mdp
from varpg.errors import ConfigError, SimulationOnlyPolicyError


def test_validate_trivial_mdp():
    assert validate_mdp(FiniteMdp([[[1.0]]], [0.0], 0)) == []


def test_validate_reports_row_deficit():
    kernel = np.array([[[0.5, 0.5], [0.4, 0.5]]])
    report = validate_mdp(FiniteMdp(kernel, [0.0, 0.0], 0))
    assert len(report) == 1
    v = report[0]
    assert v.kind == "row-sum"
    assert v.location == (0, 1)
    assert "deficit 0.1" in v.detail


def test_validate_reports_negative_nonfinite_and_index():
    kernel = np.array([[[1.2, -0.2], [0.0, 1.0]]])
    report = validate_mdp(FiniteMdp(kernel, [np.inf, 0.0], 5))
    kinds = {v.kind for v in report}
    assert kinds == {"negative", "non-finite", "index"}


def test_validate_nonconvex_example():
    assert validate_mdp(build_nonconvex_example()) == []


def test_mdp_shape_errors():
    with pytest.raises(ConfigError):
        FiniteMdp(np.ones((2, 3, 2)), [0, 0, 0])
    with pytest.raises(ConfigError):
        FiniteMdp(np.ones((1, 2, 2)) / 2, [0, 0, 0])


# --- action probabilities --------------------------------------------------


def test_softmax_uniform_when_logits_equal():
    pol = TabularSoftmaxPolicy(3, 4, np.tile([0.7, 0.7, 0.7, 0.7], 3))
    np.testing.assert_allclose(action_probs(pol, 1), np.full(4, 0.25))


def test_epsilon_sigmoid_midpoint_and_limit():
    pol = EpsilonSigmoidPolicy(np.array([1.0, -1.0]), epsilon=0.05)
    np.testing.assert_allclose(action_probs(pol, np.array([2.0, 2.0])), [0.5, 0.5])
    big = action_probs(pol, np.array([1e4, 0.0]))
    assert big[1] == pytest.approx(0.95, abs=1e-15)
    assert big[0] == pytest.approx(0.05, abs=1e-15)


def test_epsilon_sigmoid_dimension_mismatch():
    pol = EpsilonSigmoidPolicy(np.zeros(3))
    with pytest.raises(ValueError):
        pol.action_probs(np.zeros(2))


@pytest.mark.parametrize("eps", [0.0, 0.5, -0.1])
def test_epsilon_range(eps):
    with pytest.raises(ConfigError):
        EpsilonSigmoidPolicy(np.zeros(2), epsilon=eps)


@settings(max_examples=50, deadline=None)
@given(
    theta=st.lists(st.floats(-30, 30), min_size=12, max_size=12),
    x=st.integers(0, 3),
)
def test_softmax_probabilities_and_score_identity(theta, x):
    pol = TabularSoftmaxPolicy(4, 3, theta)
    p = pol.action_probs(x)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p > 0)
    weighted = sum(p[u] * pol.score(x, u) for u in range(3))
    np.testing.assert_allclose(weighted, 0.0, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(
    theta=st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    f=st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    eps=st.floats(0.01, 0.45),
)
def test_epsilon_sigmoid_bounds_and_score_identity(theta, f, eps):
    pol = EpsilonSigmoidPolicy(np.array(theta), epsilon=eps)
    f = np.array(f)
    p = pol.action_probs(f)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= eps - 1e-15) and np.all(p <= 1 - eps + 1e-15)
    np.testing.assert_allclose(p[0] * pol.score(f, 0) + p[1] * pol.score(f, 1), 0.0, atol=1e-10)


# --- scores ----------------------------------------------------------------


def test_softmax_score_uniform_two_actions():
    pol = TabularSoftmaxPolicy(3, 2)
    s = score(pol, 1, 0)
    np.testing.assert_allclose(s, [0, 0, 0.5, -0.5, 0, 0])


def _log_prob_fd(pol, x, u):
    return central_diff(lambda t: np.log(pol.with_theta(t).action_probs(x)[u]), pol.theta)


def test_softmax_score_matches_finite_differences():
    rng = np.random.default_rng(3)
    pol = TabularSoftmaxPolicy(4, 3, rng.normal(size=12))
    for x in range(4):
        for u in range(3):
            assert np.all(rel_err(pol.score(x, u), _log_prob_fd(pol, x, u)) <= 1e-6)


def test_epsilon_sigmoid_score_matches_finite_differences():
    rng = np.random.default_rng(4)
    pol = EpsilonSigmoidPolicy(rng.normal(size=5), epsilon=0.1)
    f = rng.normal(size=5)
    for u in (0, 1):
        fd = central_diff(lambda t: np.log(pol.with_theta(t).action_probs(f)[u]), pol.theta)
        assert np.all(rel_err(pol.score(f, u), fd) <= 1e-6)


def test_direct_score_matches_finite_differences():
    pol = nonconvex_direct_policy(0.3, 0.8)
    for x in (0, 1, 2):
        for u in (0, 1):
            assert np.all(rel_err(pol.score(x, u), _log_prob_fd(pol, x, u)) <= 1e-6)


def test_score_rejects_zero_probability_action():
    pol = nonconvex_direct_policy(1.0, 0.5)
    with pytest.raises(ValueError):
        pol.score(0, 1)


def test_log_prob_first_order_expansion():
    rng = np.random.default_rng(5)
    pol = TabularSoftmaxPolicy(3, 3, rng.normal(size=9))
    delta = rng.normal(size=9)
    delta *= 1e-4 / np.linalg.norm(delta)
    moved = pol.with_theta(pol.theta + delta)
    for x in range(3):
        for u in range(3):
            diff = np.log(moved.action_probs(x)[u]) - np.log(pol.action_probs(x)[u])
            assert abs(diff - pol.score(x, u) @ delta) <= 1e-7


# --- sampling --------------------------------------------------------------


def _binomial_check(pol, x, u, p, draws):
    rng = np.random.default_rng(77)
    hits = sum(sample_action(pol, x, rng) == u for _ in range(draws))
    se = np.sqrt(p * (1 - p) / draws)
    assert abs(hits / draws - p) <= 3 * se


def test_sample_action_frequency_near_one_minus_eps():
    pol = EpsilonSigmoidPolicy(np.array([50.0]), epsilon=0.05)
    _binomial_check(pol, np.array([1.0]), 1, 0.95, 1_000_000)


def test_sample_action_uniform_frequency():
    pol = TabularSoftmaxPolicy(1, 2)
    _binomial_check(pol, 0, 0, 0.5, 1_000_000)


def test_sample_action_deterministic_given_seed():
    pol = TabularSoftmaxPolicy(2, 5, np.arange(10.0) / 7)
    a = [sample_action(pol, 1, np.random.default_rng(9)) for _ in range(3)]
    b = [sample_action(pol, 1, np.random.default_rng(9)) for _ in range(3)]
    assert a == b


# --- chain construction ----------------------------------------------------


def test_build_chain_single_state():
    mdp = FiniteMdp([[[1.0]]], [0.0], 0)
    chain = build_chain(mdp, TabularSoftmaxPolicy.for_mdp(mdp))
    np.testing.assert_array_equal(chain.p_theta, [[1.0]])
    np.testing.assert_array_equal(chain.p_prime, [[0.0]])
    assert np.all(chain.grad_p_prime == 0)


def test_build_chain_nonconvex_first_branch():
    chain = build_chain(build_nonconvex_example(), nonconvex_direct_policy(0.3, 0.6))
    assert chain.p_theta[0, 1] == pytest.approx(0.3)
    assert chain.p_theta[0, 2] == pytest.approx(0.7)


def test_build_chain_rejects_simulation_only_policy():
    mdp = build_nonconvex_example()
    with pytest.raises(SimulationOnlyPolicyError):
        build_chain(mdp, EpsilonSigmoidPolicy(np.zeros(3)))


def test_build_chain_epsilon_sigmoid_with_feature_map():
    rng = np.random.default_rng(8)
    mdp = random_mdp(rng, 4, 2)
    pol = EpsilonSigmoidPolicy(rng.normal(size=3), 0.1, rng.normal(size=(4, 3)))
    chain = build_chain(mdp, pol)
    fd = central_diff(lambda t: build_chain(mdp, pol.with_theta(t)).p_prime, pol.theta)
    assert np.all(rel_err(chain.grad_p_prime, fd) <= 1e-6)


def _check_chain(mdp, pol):
    chain = build_chain(mdp, pol)
    xs = mdp.recurrent_state
    np.testing.assert_allclose(chain.p_theta.sum(axis=1), 1.0, atol=1e-12)
    expected = chain.p_theta.copy()
    expected[:, xs] = 0.0
    np.testing.assert_array_equal(chain.p_prime, expected)
    assert np.all(chain.grad_p_prime[:, :, xs] == 0)
    # before zeroing, derivative rows sum to zero
    grad_p = np.einsum("xuk,uxy->kxy", pol.jacobian(), mdp.kernel)
    np.testing.assert_allclose(grad_p.sum(axis=2), 0.0, atol=1e-12)
    fd = central_diff(lambda t: build_chain(mdp, pol.with_theta(t)).p_prime, pol.theta)
    assert np.all(rel_err(chain.grad_p_prime, fd) <= 1e-6)


def test_build_chain_random_5_state_3_action():
    _check_chain(*random_instance(11, 5, 3))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 20), m=st.integers(1, 4))
def test_build_chain_properties(seed, n, m):
    _check_chain(*random_instance(seed, n, m))


def test_direct_policy_range_checked():
    with pytest.raises(ConfigError):
        DirectPolicy((0,), [1.2])
