import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import linalg

from conftest import random_stable_system
from dpfilter import control
from dpfilter.control import FilterRealization, StateSpaceSystem
from dpfilter.exceptions import DimensionError, DomainError
from dpfilter.kalman import (ParticipantModel, design_kalman, error_variance,
                             input_perturbation_plan, output_perturbation_plan)
from dpfilter.privacy import AdjacencyPolicy, PrivacyBudget
from dpfilter.traffic import build_traffic_model, to_kmh

BUDGET = PrivacyBudget(math.log(3), 0.05)


def traffic(n=200):
    pm = build_traffic_model(n_participants=n)
    return [pm] * n, AdjacencyPolicy.uniform(n, 100.0, [0])


def rmse_kmh(mse):
    return float(to_kmh(math.sqrt(mse)))


def generic_model(rng, nx=None):
    nx = int(rng.integers(1, 4)) if nx is None else nx
    sys = random_stable_system(rng, nx=nx, nu=nx + 1, ny=1)
    return ParticipantModel(sys, rng.standard_normal((1, nx)))


# ---------------------------------------------------------------- Kalman design

def test_traffic_mse_equals_error_system():
    parts, _ = traffic(1)
    pm = parts[0]
    for conv in ("predictor", "filter"):
        (f,), mse = design_kalman(parts, convention=conv)
        err = control.build_error_system(pm.system, pm.L, f)
        err = control.minimal_realization(err)
        assert control.h2_norm(err) ** 2 == pytest.approx(mse, rel=1e-6)
        assert error_variance(pm.system, pm.L, f) == pytest.approx(mse, rel=1e-6)


def test_traffic_riccati_values():
    parts, _ = traffic(1)
    (f,), pred = design_kalman(parts)
    _, filt = design_kalman(parts, convention="filter")
    assert pred == pytest.approx(2.0, rel=1e-9)
    assert filt == pytest.approx(1.0, rel=1e-9)
    assert np.allclose(f.G, [[1.25], [0.5]])


def test_white_noise_scalar():
    q, r = 2.0, 3.0
    sys = StateSpaceSystem([[0.0]], [[math.sqrt(q), 0.0]], [[1.0]], [[0.0, math.sqrt(r)]])
    pm = ParticipantModel(sys, [[1.0]])
    _, pred = design_kalman([pm])
    _, filt = design_kalman([pm], convention="filter")
    assert pred == pytest.approx(q, rel=1e-12)
    assert filt == pytest.approx(q * r / (q + r), rel=1e-12)


def test_averaging_halves_error():
    rng = np.random.default_rng(2)
    pm = generic_model(rng)
    avg = ParticipantModel(pm.system, pm.L / 2)
    _, one = design_kalman([pm])
    _, two = design_kalman([avg, avg])
    assert two == pytest.approx(one / 2, rel=1e-12)


def test_design_kalman_rejects():
    parts, _ = traffic(1)
    with pytest.raises(ValueError):
        design_kalman(parts, convention="smoother")
    with pytest.raises(DomainError):
        design_kalman(parts, extra_meas_noise_std=-1.0)


# ---------------------------------------------------------------- input perturbation

def test_input_plan_traffic():
    parts, pol = traffic()
    naive, comp = input_perturbation_plan(parts, pol, BUDGET)
    assert naive.input_noise_std[0] == pytest.approx(BUDGET.kappa * 100.0, rel=1e-12)
    assert naive.input_noise_std[0] == pytest.approx(175.63, abs=0.01)
    assert rmse_kmh(naive.predicted_mse) == pytest.approx(25.815, abs=5e-3)
    assert rmse_kmh(comp.predicted_mse) == pytest.approx(1.1168, abs=5e-4)
    assert comp.predicted_mse < naive.predicted_mse


def test_naive_input_lyapunov_oracle():
    parts, pol = traffic(1)
    pm = parts[0]
    naive, _ = input_perturbation_plan(parts, pol, BUDGET)
    s = naive.input_noise_std[0]
    G = naive.filters[0].G
    A, B, C, D = pm.system.A, pm.system.B, pm.system.C, pm.system.D
    # error e = x - xh obeys e+ = (A - GC) e + B w - G (D w + s v)
    Ae = A - G @ C
    Q = (B - G @ D) @ (B - G @ D).T + s ** 2 * G @ G.T
    P = linalg.solve_discrete_lyapunov(Ae, Q)
    assert naive.predicted_mse == pytest.approx((pm.L @ P @ pm.L.T)[0, 0], rel=1e-9)


def test_plan_parts_recomputable():
    parts, pol = traffic(3)
    naive, comp = input_perturbation_plan(parts, pol, BUDGET)
    for plan in (naive, comp):
        assert plan.predicted_mse == pytest.approx(math.fsum(plan.error_parts), rel=1e-12)
        for pm, f, e in zip(parts, plan.filters, plan.error_parts):
            s = plan.input_noise_std[0]
            sys = StateSpaceSystem(pm.system.A, np.hstack([pm.system.B, np.zeros((2, 1))]),
                                   pm.system.C, np.hstack([pm.system.D, [[s]]]))
            assert error_variance(sys, pm.L, f) == pytest.approx(e, rel=1e-9)


def test_compensated_never_worse():
    rng = np.random.default_rng(4)
    for _ in range(20):
        pm = generic_model(rng)
        pol = AdjacencyPolicy.uniform(1, float(rng.uniform(0.1, 5)), [0])
        naive, comp = input_perturbation_plan([pm], pol, BUDGET)
        assert comp.predicted_mse <= naive.predicted_mse * (1 + 1e-9)


def test_input_plan_length_mismatch():
    parts, _ = traffic(2)
    with pytest.raises(DimensionError):
        input_perturbation_plan(parts, AdjacencyPolicy.uniform(3, 1.0, [0]), BUDGET)


# ---------------------------------------------------------------- output perturbation

def test_output_plan_traffic():
    parts, pol = traffic()
    plan = output_perturbation_plan(parts, pol, BUDGET)
    g = 200 * plan.gamma[0]
    assert g == pytest.approx(math.sqrt(4 / 7), rel=1e-6)
    assert 200 * plan.gamma_filter[0] == pytest.approx(math.sqrt(4 / 7), rel=1e-6)
    assert rmse_kmh(plan.predicted_mse) == pytest.approx(2.4168, abs=5e-4)
    assert plan.output_noise_std == pytest.approx(BUDGET.kappa * 100.0 * plan.gamma[0], rel=1e-12)
    assert plan.recompute_output_noise_std(pol) == pytest.approx(plan.output_noise_std, rel=1e-12)


def test_output_plan_zero_rho():
    parts, _ = traffic(4)
    plan = output_perturbation_plan(parts, AdjacencyPolicy.uniform(4, 0.0, [0]), BUDGET)
    assert plan.output_noise_std == 0.0


@given(st.permutations(range(4)), st.floats(0.1, 10.0))
def test_output_plan_permutation_and_rho(perm, scale):
    rng = np.random.default_rng(9)
    parts = [generic_model(rng, nx=2) for _ in range(4)]
    rho = [0.5, 1.0, 2.0, 3.0]
    base = output_perturbation_plan(parts, AdjacencyPolicy(tuple(rho), ((0,),) * 4), BUDGET)
    shuffled = output_perturbation_plan([parts[i] for i in perm],
                                        AdjacencyPolicy(tuple(rho[i] for i in perm), ((0,),) * 4),
                                        BUDGET)
    assert shuffled.predicted_mse == pytest.approx(base.predicted_mse, rel=1e-12)
    bigger = output_perturbation_plan(
        parts, AdjacencyPolicy(tuple(r * (1 + scale) for r in rho), ((0,),) * 4), BUDGET)
    assert bigger.output_noise_std >= base.output_noise_std
    assert bigger.predicted_mse >= base.predicted_mse


def test_output_plan_rejects_unstable_filter():
    parts, pol = traffic(1)
    bad = FilterRealization([[1.0, 1.0], [0.0, 1.0]], [[0.0], [0.0]], [[0.0, 1.0]], [[0.0]])
    with pytest.raises(DomainError):
        output_perturbation_plan(parts, pol, BUDGET, filters=[bad])


# ---------------------------------------------------------------- model invariants

def test_participant_model_invariants():
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    with pytest.raises(DomainError):
        ParticipantModel(StateSpaceSystem(A, [[0.5, 0.0], [1.0, 0.0]], [[1.0, 0.0]], [[0.0, 0.0]]),
                         [[0.0, 1.0]])
    with pytest.raises(DomainError):
        ParticipantModel(StateSpaceSystem(A, [[0.5, 0.0], [1.0, 0.0]], [[0.0, 1.0]], [[0.0, 1.0]]),
                         [[0.0, 1.0]])
    with pytest.raises(DomainError):
        ParticipantModel(StateSpaceSystem(A, [[0.0, 0.0], [0.0, 0.0]], [[1.0, 0.0]], [[0.0, 1.0]]),
                         [[0.0, 1.0]])
    with pytest.raises(DimensionError):
        ParticipantModel(StateSpaceSystem(A, [[0.5, 0.0], [1.0, 0.0]], [[1.0, 0.0]], [[0.0, 1.0]]),
                         [[1.0]])
