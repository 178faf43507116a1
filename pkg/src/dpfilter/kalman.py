"""Differentially private estimation pipelines built on steady-state Kalman filters.

Participants are independent, so every mean-squared error below is a sum of
per-participant error variances plus, for output perturbation, the variance
of the single released noise vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import control
from .control import FilterRealization, StateSpaceSystem
from .exceptions import DimensionError, DomainError
from .privacy import AdjacencyPolicy, PrivacyBudget

__all__ = [
    "ParticipantModel",
    "MechanismPlan",
    "design_kalman",
    "input_perturbation_plan",
    "output_perturbation_plan",
    "synthesized_plan",
    "error_variance",
    "sensitivity_gain",
]


@dataclass(frozen=True)
class ParticipantModel:
    system: StateSpaceSystem
    L: np.ndarray
    x0_mean: np.ndarray | None = None

    def __post_init__(self):
        sys = self.system
        L = np.atleast_2d(np.asarray(self.L, dtype=float))
        if L.shape[1] != sys.n_states:
            raise DimensionError(f"L has {L.shape[1]} columns, system has {sys.n_states} states")
        x0 = np.zeros(sys.n_states) if self.x0_mean is None else \
            np.asarray(self.x0_mean, dtype=float).reshape(-1)
        if x0.shape != (sys.n_states,):
            raise DimensionError("x0_mean must have one entry per state")
        if np.linalg.matrix_rank(sys.D) < sys.n_outputs:
            raise DomainError("D must have full row rank")
        if not control.is_detectable(sys.A, sys.C):
            raise DomainError("(A, C) is not detectable")
        if not control.is_stabilizable(sys.A, sys.B):
            raise DomainError("(A, B) is not stabilizable")
        L.setflags(write=False)
        x0.setflags(write=False)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "x0_mean", x0)


@dataclass(frozen=True)
class MechanismPlan:
    """A privacy mechanism together with the filters that post-process it.

    ``error_parts[i]`` is participant ``i``'s contribution to the error
    variance before any output noise; ``predicted_mse`` equals
    ``sum(error_parts) + output_noise_std**2 * n_z``.
    """

    scheme: str
    filters: list
    error_parts: tuple
    input_noise_std: tuple
    output_noise_std: float
    n_z: int
    kappa: float
    gamma: tuple = ()
    gamma_filter: tuple = ()
    variant: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(s < 0 for s in self.input_noise_std) or self.output_noise_std < 0:
            raise DomainError("noise standard deviations must be nonnegative")

    @property
    def predicted_mse(self) -> float:
        return math.fsum(self.error_parts) + self.output_noise_std ** 2 * self.n_z

    def recompute_output_noise_std(self, policy: AdjacencyPolicy) -> float:
        if not self.gamma:
            return 0.0
        return self.kappa * max(g * r for g, r in zip(self.gamma, policy.rho))


# ---------------------------------------------------------------------------
# helpers

def _noise_cov(sys: StateSpaceSystem, extra_std=0.0):
    Q = sys.B @ sys.B.T
    R = sys.D @ sys.D.T + extra_std ** 2 * np.eye(sys.n_outputs)
    S = sys.B @ sys.D.T
    return Q, R, S


def _riccati(sys, extra_std=0.0):
    Q, R, S = _noise_cov(sys, extra_std)
    return control.solve_dare(sys.A, sys.C, Q, R, S)


def _with_measurement_noise(sys: StateSpaceSystem, std: float) -> StateSpaceSystem:
    """Plant whose disturbance input also drives white measurement noise of ``std``."""
    p = sys.n_outputs
    B = np.hstack([sys.B, np.zeros((sys.n_states, p))])
    D = np.hstack([sys.D, std * np.eye(p)])
    return StateSpaceSystem(sys.A, B, sys.C, D)


def _is_observer_form(sys, L, filt, tol=1e-12):
    if filt.n_states != sys.n_states or filt.H.shape != L.shape:
        return False
    scale = max(1.0, float(np.abs(sys.A).max()))
    return (np.allclose(filt.F, sys.A - filt.G @ sys.C, atol=tol * scale, rtol=0)
            and np.allclose(filt.H, L, atol=tol, rtol=0) and not np.any(filt.K))


def error_variance(sys: StateSpaceSystem, L, filt: FilterRealization) -> float:
    """Steady-state variance of ``L x - zh`` for a filter driven by ``y``.

    Observer-form filters use the error dynamics ``x - xh``, which stay
    stable even when the plant is not; other filters use the full
    plant/filter interconnection and drop unobservable or unreachable
    unstable modes.
    """
    L = np.atleast_2d(np.asarray(L, dtype=float))
    if _is_observer_form(sys, L, filt):
        err = control.restricted_error_system(sys, L, filt.G)
    else:
        err = control.build_error_system(sys, L, filt)
        if control.spectral_radius(err.A) >= 1.0:
            err = control.minimal_realization(err)
    if err.n_states and control.spectral_radius(err.A) >= 1.0:
        raise DomainError("error system is not stable")
    return control.h2_norm(err) ** 2


def sensitivity_gain(sys: StateSpaceSystem, filt: FilterRealization, T) -> float:
    """H-infinity norm of the map from a protected state deviation to ``zh``."""
    if not filt.is_stable():
        raise DomainError("filter is not Schur stable")
    return control.hinf_norm(control.build_sensitivity_system(filt, sys.C, T))


# ---------------------------------------------------------------------------
# operations

def design_kalman(participants, extra_meas_noise_std=None, convention="predictor"):
    """Steady-state Kalman filters, one per participant.

    ``extra_meas_noise_std[i]`` adds white noise of that standard deviation
    to every measurement of participant ``i`` (used by the compensated
    input-perturbation design). Returns ``(filters, predicted_mse)``; the
    MSE comes from the Riccati covariances, ``sum_i L_i P_i L_i^T``.
    """
    parts = list(participants)
    extra = [0.0] * len(parts) if extra_meas_noise_std is None else \
        [float(s) for s in np.broadcast_to(extra_meas_noise_std, (len(parts),))]
    if any(s < 0 for s in extra):
        raise DomainError("extra measurement noise std must be nonnegative")
    cache = {}
    filters, mse = [], []
    for pm, s in zip(parts, extra):
        key = (id(pm), s)
        if key not in cache:
            sys, L = pm.system, pm.L
            ric = _riccati(sys, s)
            if convention == "predictor":
                filt = control.predictor_filter(sys, L, ric)
                v = float(np.trace(L @ ric.P @ L.T))
            elif convention == "filter":
                filt = control.current_filter(sys, L, ric)
                v = float(np.trace(L @ ric.P_filtered @ L.T))
            else:
                raise ValueError(f"unknown convention {convention!r}")
            cache[key] = (filt, v)
        filt, v = cache[key]
        filters.append(filt)
        mse.append(v)
    return filters, math.fsum(mse)


def _input_noise_std(participants, policy, budget):
    out = []
    for i, pm in enumerate(participants):
        T = policy.T(i, pm.system.n_states)
        smax = float(np.linalg.norm(pm.system.C @ T, 2)) if T.any() else 0.0
        out.append(budget.kappa * policy.rho[i] * smax)
    return tuple(out)


def input_perturbation_plan(participants, policy: AdjacencyPolicy, budget: PrivacyBudget,
                            convention="predictor"):
    """Privacy noise added to each participant's measurements.

    Returns ``(naive, compensated)``. The naive filters ignore the privacy
    noise; their error is evaluated under the true noise model. The
    compensated filters treat it as extra measurement noise.
    """
    parts = list(participants)
    if len(parts) != len(policy):
        raise DimensionError("policy and participants disagree in length")
    stds = _input_noise_std(parts, policy, budget)
    naive_f, _ = design_kalman(parts, None, convention)
    comp_f, _ = design_kalman(parts, stds, convention)
    true_sys = {}

    def noisy(pm, s):
        k = (id(pm), s)
        if k not in true_sys:
            true_sys[k] = _with_measurement_noise(pm.system, s)
        return true_sys[k]

    cache = {}
    naive_err, comp_err = [], []
    for pm, s, fn, fc in zip(parts, stds, naive_f, comp_f):
        k = (id(pm), s, id(fn), id(fc))
        if k not in cache:
            sysn = noisy(pm, s)
            # the filters act on y, so the privacy noise passes through G and K
            cache[k] = (error_variance(sysn, pm.L, fn), error_variance(sysn, pm.L, fc))
        a, b = cache[k]
        naive_err.append(a)
        comp_err.append(b)
    nz = parts[0].L.shape[0]
    naive = MechanismPlan("input-perturbation", naive_f, tuple(naive_err), stds, 0.0,
                          nz, budget.kappa, variant="naive")
    comp = MechanismPlan("input-perturbation", comp_f, tuple(comp_err), stds, 0.0,
                         nz, budget.kappa, variant="compensated")
    return naive, comp


def output_perturbation_plan(participants, policy: AdjacencyPolicy, budget: PrivacyBudget,
                             filters=None, scheme="output-perturbation"):
    """Single Gaussian noise added to the aggregate filter output.

    ``filters`` defaults to the predictor-form Kalman filters. The noise std
    is ``kappa * max_i gamma_i rho_i`` with ``gamma_i`` the H-infinity norm
    of participant ``i``'s sensitivity system. When Kalman filters are used
    the current-estimate (filter-form) gains are reported as well.
    """
    parts = list(participants)
    if len(parts) != len(policy):
        raise DimensionError("policy and participants disagree in length")
    kalman = filters is None
    if kalman:
        filters, _ = design_kalman(parts)
    if len(filters) != len(parts):
        raise DimensionError("one filter per participant is required")
    cache = {}
    gam, err = [], []
    for i, (pm, f) in enumerate(zip(parts, filters)):
        T = policy.T(i, pm.system.n_states)
        k = (id(pm), id(f), T.tobytes())
        if k not in cache:
            if not f.is_stable():
                raise DomainError(f"filter {i} is not Schur stable")
            cache[k] = (sensitivity_gain(pm.system, f, T), error_variance(pm.system, pm.L, f))
        g, e = cache[k]
        gam.append(g)
        err.append(e)
    gam_f = ()
    if kalman:
        ff, _ = design_kalman(parts, convention="filter")
        gcache = {}
        gam_f = []
        for i, (pm, f) in enumerate(zip(parts, ff)):
            T = policy.T(i, pm.system.n_states)
            k = (id(pm), id(f), T.tobytes())
            if k not in gcache:
                gcache[k] = sensitivity_gain(pm.system, f, T)
            gam_f.append(gcache[k])
        gam_f = tuple(gam_f)
    std = budget.kappa * max(g * r for g, r in zip(gam, policy.rho))
    nz = parts[0].L.shape[0]
    return MechanismPlan(scheme, list(filters), tuple(err), (), std, nz, budget.kappa,
                         gamma=tuple(gam), gamma_filter=gam_f,
                         variant="kalman" if kalman else "given")


def synthesized_plan(participants, policy, budget, result) -> MechanismPlan:
    """Output perturbation with filters from :mod:`dpfilter.synthesis`."""
    plan = output_perturbation_plan(participants, policy, budget, result.filters,
                                    scheme="synthesized")
    return MechanismPlan(plan.scheme, plan.filters, plan.error_parts, (), plan.output_noise_std,
                         plan.n_z, plan.kappa, gamma=plan.gamma, variant=result.kind,
                         extra={"lambda": result.lam, "lambda_cap": result.lambda_cap})
