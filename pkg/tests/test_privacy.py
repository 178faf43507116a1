import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, optimize, stats

from dpfilter.exceptions import DimensionError, DomainError
from dpfilter.privacy import (AdjacencyPolicy, PrivacyBudget, dp_slack, dynamic_mechanism_sigma,
                              gaussian_sigma, kappa, perturbation_mse, q_function, q_inverse,
                              verify_dp_scalar)


def tail_quadrature(x):
    val, _ = integrate.quad(lambda u: math.exp(-u * u / 2) / math.sqrt(2 * math.pi),
                            x, np.inf, epsabs=1e-14, epsrel=1e-13)
    return val


def kappa_formula(eps, delta):
    K = optimize.brentq(lambda x: tail_quadrature(x) - delta, -10, 10, xtol=1e-14)
    return (K + math.sqrt(K * K + 2 * eps)) / (2 * eps)


# ---------------------------------------------------------------- Q function

def test_q_function_examples():
    assert q_function(0.0) == 0.5
    assert q_function(40.0) < 1e-300
    assert q_function(1.6449) == pytest.approx(tail_quadrature(1.6449), abs=1e-12)
    assert q_function(1.6449) == pytest.approx(0.05, abs=1e-5)


@pytest.mark.parametrize("x", [-3.0, -1.0, 0.3, 2.0, 5.0])
def test_q_function_against_quadrature(x):
    assert q_function(x) == pytest.approx(tail_quadrature(x), abs=1e-12)


def test_q_inverse_examples():
    assert q_inverse(0.5) == 0.0
    bisect = optimize.bisect(lambda x: q_function(x) - 0.05, 0, 5, xtol=1e-13)
    assert q_inverse(0.05) == pytest.approx(bisect, abs=1e-10)
    for x in np.arange(-3, 3.01, 0.5):
        assert q_inverse(q_function(x)) == pytest.approx(x, abs=1e-10)


def test_q_inverse_domain():
    for p in (0.0, 1.0, -0.1, 2.0):
        with pytest.raises(DomainError):
            q_inverse(p)


@given(st.floats(1e-12, 1 - 1e-12), st.floats(1e-12, 1 - 1e-12))
def test_q_inverse_monotone(p, q):
    if p < q:
        assert q_inverse(p) >= q_inverse(q)


# ---------------------------------------------------------------- kappa / budgets

def test_kappa_examples():
    assert kappa(PrivacyBudget(math.log(2), 0.05)) == pytest.approx(2.6457, abs=5e-5)
    k3 = kappa(PrivacyBudget(math.log(3), 0.05))
    assert k3 == pytest.approx(kappa_formula(math.log(3), 0.05), rel=1e-10)
    assert k3 == pytest.approx(1.7564, abs=1e-4)
    for eps in (0.1, 1.0, 2.5):
        assert kappa(PrivacyBudget(eps, 0.5)) == pytest.approx(1 / math.sqrt(2 * eps), rel=1e-12)


def test_kappa_recomputable():
    for eps, d in [(0.3, 1e-4), (1.0, 0.01), (2.0, 0.3)]:
        assert PrivacyBudget(eps, d).kappa == pytest.approx(kappa_formula(eps, d), rel=1e-9)


def test_kappa_strictly_decreasing():
    eps = np.linspace(0.05, 3, 25)
    deltas = np.geomspace(1e-6, 0.4, 25)
    K = np.array([[PrivacyBudget(e, d).kappa for d in deltas] for e in eps])
    assert np.all(np.diff(K, axis=0) < 0)
    assert np.all(np.diff(K, axis=1) < 0)
    assert np.all(K > 0)


@pytest.mark.parametrize("eps, delta", [(0, 0.1), (-1, 0.1), (math.inf, 0.1), (1, 0),
                                        (1, 0.6), (1, -0.1)])
def test_budget_rejects_invalid(eps, delta):
    with pytest.raises(DomainError):
        PrivacyBudget(eps, delta)


def test_gaussian_sigma():
    b = PrivacyBudget(math.log(2), 0.05)
    assert gaussian_sigma(0.0, b) == 0.0
    assert gaussian_sigma(1.0, b) == pytest.approx(2.6457, abs=5e-5)
    assert gaussian_sigma(3.0, b) == pytest.approx(3 * b.kappa, rel=1e-15)
    with pytest.raises(DomainError):
        gaussian_sigma(-1.0, b)


# ---------------------------------------------------------------- dynamic mechanism

def test_dynamic_sigma_examples():
    b = PrivacyBudget(1.0, 0.05)
    assert dynamic_mechanism_sigma([(1.0, 1.0)], b) == pytest.approx(b.kappa)
    E = 7.0
    assert dynamic_mechanism_sigma([(1.0, math.sqrt(E))] * 5, b) == pytest.approx(
        b.kappa * math.sqrt(E))
    assert dynamic_mechanism_sigma([(0.5, 3.0), (2.0, 1.0)], b) == pytest.approx(2 * b.kappa)
    with pytest.raises(DimensionError):
        dynamic_mechanism_sigma([], b)
    with pytest.raises(DomainError):
        dynamic_mechanism_sigma([(-1.0, 1.0)], b)


@given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10)), min_size=1, max_size=8),
       st.floats(0.01, 100), st.randoms())
def test_dynamic_sigma_permutation_and_scaling(pairs, scale, rnd):
    b = PrivacyBudget(0.7, 0.01)
    base = dynamic_mechanism_sigma(pairs, b)
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    assert dynamic_mechanism_sigma(shuffled, b) == base
    scaled = dynamic_mechanism_sigma([(g, scale * x) for g, x in pairs], b)
    assert scaled == pytest.approx(scale * base, rel=1e-12, abs=1e-300)


# ---------------------------------------------------------------- MSE trade-off

@pytest.mark.parametrize("l", [2, 4, 10])
def test_moving_average_tradeoff(l):
    b = PrivacyBudget(1.0, 0.05)
    E = 2.0
    for n in range(1, 3 * l):
        inp, out = perturbation_mse([1 / math.sqrt(l)] * n, [1.0] * n, E, b)
        assert inp == pytest.approx(b.kappa ** 2 * E * n / l)
        assert out == pytest.approx(b.kappa ** 2 * E)
        if n == l:
            assert inp == pytest.approx(out, rel=1e-12)
        else:
            assert (inp < out) == (n < l)


def test_perturbation_mse_trivial():
    b = PrivacyBudget(1.0, 0.05)
    assert perturbation_mse([1.0, 2.0], [3.0, 4.0], 0.0, b) == (0.0, 0.0)
    inp, out = perturbation_mse([1.3], [1.3], 2.0, b)
    assert inp == pytest.approx(out)
    with pytest.raises(DimensionError):
        perturbation_mse([1.0], [1.0, 2.0], 1.0, b)


# ---------------------------------------------------------------- DP verifier

def grid_slack(sigma, delta_s, eps, n=200_001):
    t = np.linspace(-10 * sigma, 10 * sigma + delta_s, n)
    return float(np.max(stats.norm.sf(t - delta_s, scale=sigma)
                        - math.exp(eps) * stats.norm.sf(t, scale=sigma)))


def test_verify_dp_zero_sensitivity():
    b = PrivacyBudget(1.0, 0.05)
    assert verify_dp_scalar(1.0, 0.0, b) == b.delta


def test_verify_dp_calibrated_matches_grid_oracle():
    b = PrivacyBudget(math.log(2), 0.05)
    sigma = gaussian_sigma(1.0, b)
    margin = verify_dp_scalar(sigma, 1.0, b)
    assert margin >= 0
    assert margin == pytest.approx(b.delta - max(grid_slack(sigma, 1.0, b.epsilon), 0.0),
                                   abs=1e-9)
    # the supremum has a closed form at this calibration
    K = q_inverse(b.delta)
    exact = math.exp(b.epsilon) * q_function(K + 1 / b.kappa)
    assert margin == pytest.approx(exact, rel=1e-9)


def test_verify_dp_monotone_in_sigma():
    b = PrivacyBudget(math.log(2), 0.05)
    s = gaussian_sigma(1.0, b)
    assert verify_dp_scalar(10 * s, 1.0, b) > verify_dp_scalar(s, 1.0, b)
    margins = [verify_dp_scalar(f * s, 1.0, b) for f in np.linspace(0.2, 3, 30)]
    assert np.all(np.diff(margins) > 0)
    # below the smallest private sigma the margin turns negative
    s0 = optimize.brentq(lambda x: verify_dp_scalar(x, 1.0, b), 0.1 * s, s, xtol=1e-12)
    assert s0 < s
    assert verify_dp_scalar(0.99 * s0, 1.0, b) < 0


def test_verify_dp_domain():
    b = PrivacyBudget(1.0, 0.05)
    with pytest.raises(DomainError):
        verify_dp_scalar(0.0, 1.0, b)


def test_calibration_soundness_random():
    rng = np.random.default_rng(11)
    for _ in range(50):
        b = PrivacyBudget(rng.uniform(0.05, 3), 10 ** rng.uniform(-6, math.log10(0.4)))
        d = rng.uniform(0.01, 10)
        assert verify_dp_scalar(gaussian_sigma(d, b), d, b) >= 0


@given(st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.2, 3), st.floats(0.1, 2))
def test_post_processing_preserves_margin(a_abs, shift, sigma, sens):
    b = PrivacyBudget(0.8, 0.05)
    base = verify_dp_scalar(sigma, sens, b)
    for a in (a_abs, -a_abs):
        # y = a m + c: threshold events in y are threshold events in m
        sig_y, sens_y = abs(a) * sigma, abs(a) * sens
        t = np.linspace(-12 * sig_y, 12 * sig_y, 40_001) + shift
        mean0, mean1 = shift, a * sens + shift
        if a > 0:
            slack = stats.norm.sf(t, mean1, sig_y) - math.exp(b.epsilon) * stats.norm.sf(t, mean0, sig_y)
        else:
            slack = stats.norm.cdf(t, mean1, sig_y) - math.exp(b.epsilon) * stats.norm.cdf(t, mean0, sig_y)
        assert b.delta - max(float(slack.max()), 0.0) == pytest.approx(base, abs=1e-6)
        assert verify_dp_scalar(sig_y, sens_y, b) == pytest.approx(base, abs=1e-12)


def test_dp_slack_vectorised():
    t = np.linspace(-3, 3, 7)
    v = dp_slack(1.0, 0.5, 0.3, t)
    assert v.shape == t.shape


# ---------------------------------------------------------------- adjacency

def test_adjacency_policy():
    pol = AdjacencyPolicy.uniform(3, 100.0, [0])
    assert len(pol) == 3
    T = pol.T(1, 2)
    assert np.array_equal(T @ T, T)
    assert np.array_equal(T, np.diag([1.0, 0.0]))
    with pytest.raises(DomainError):
        AdjacencyPolicy((-1.0,), ((0,),))
    with pytest.raises(DimensionError):
        AdjacencyPolicy((1.0, 2.0), ((0,),))
    with pytest.raises(DimensionError):
        pol.T(0, 0)
