"""Privacy-aware filter synthesis by semidefinite programming.

Two filter classes are supported:

* ``synth_stable``: full-order filters ``(F, G, H, K)`` for Schur-stable
  plants, parametrised through the usual change of variables
  ``(Z, Y, F^, G^, H^, K^)`` and recovered by :func:`recover_filter`.
* ``synth_unstable``: observer-form filters ``F = A - G C, H = L, K = 0``
  whose error dynamics do not depend on the plant state, so the plant may
  be unstable. The only design variable is ``G = X^{-1} G^``.

Both trade the steady-state error variance of every participant (``mu_i``)
against a shared bound ``lambda`` on ``rho_i^2 ||sensitivity_i||_inf^2``.
With ``lambda_cap=None`` the objective is ``sum mu_i + kappa^2 lambda``;
with a finite cap the objective is ``sum mu_i`` subject to
``lambda <= lambda_cap``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import control
from .control import FilterRealization, StateSpaceSystem
from .exceptions import DimensionError, DomainError
from .privacy import AdjacencyPolicy, PrivacyBudget
from .sdp import SdpInfeasible, SdpProblem, bmat, solve_sdp

__all__ = [
    "SynthesisResult",
    "VerificationReport",
    "hinf_norm_lmi",
    "recover_filter",
    "synth_stable",
    "synth_unstable",
    "verify_synthesis",
    "sweep_lambda_cap",
    "predicted_output_mse",
]


# ---------------------------------------------------------------------------
# Bounded real lemma

def _brl_problem(sys: StateSpaceSystem, gamma=None):
    """BRL LMI for ``||G||_inf < gamma`` (or with ``gamma^2`` as a variable)."""
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    n, m = sys.n_states, sys.n_inputs
    prob = SdpProblem()
    P = prob.variable("P", n, symmetric=True)
    CD = np.hstack([C, D])
    if gamma is None:
        g2 = prob.scalar("g2")
        upper = bmat([[A.T @ P @ A - P, A.T @ P @ B],
                      [B.T @ P @ A, B.T @ P @ B - g2 * np.eye(m)]])
        prob.psd(-(upper + CD.T @ CD), strict=False, name="brl")
        prob.psd(P, strict=False, name="P")
        prob.minimize(g2)
        return prob
    # normalised by gamma so P stays O(1) when gamma is large
    t = prob.scalar("t")
    upper = bmat([[A.T @ P @ A - P, A.T @ P @ B],
                  [B.T @ P @ A, B.T @ P @ B - np.eye(m)]])
    prob.psd(-(upper + CD.T @ CD / gamma ** 2) - t * np.eye(n + m),
             strict=False, name="brl")
    prob.psd(P - t * np.eye(n), strict=False, name="P")
    prob.le(t, 1.0, name="t_cap")
    prob.minimize(-t)
    return prob


def _brl_feasible(sys, gamma, tol):
    sol = solve_sdp(_brl_problem(sys, gamma))
    return -sol.objective > tol


def hinf_norm_lmi(sys: StateSpaceSystem, rtol=1e-6, feas_tol=1e-10) -> float:
    """H-infinity norm certified by bounded-real-lemma bisection.

    A first SDP minimises ``gamma^2`` subject to the bounded real lemma;
    the result only seeds the bracket. The bracket is then bisected with
    strict-feasibility tests until its relative width is below ``rtol``.
    """
    if sys.n_states and control.spectral_radius(sys.A) >= 1.0:
        raise DomainError("system is not Schur stable")
    dnorm = float(np.linalg.norm(sys.D, 2)) if sys.D.size else 0.0
    if sys.n_states == 0:
        return dnorm
    if not np.any(sys.B) or not np.any(sys.C):
        return dnorm
    seed = math.sqrt(max(solve_sdp(_brl_problem(sys)).objective, 0.0))
    seed = max(seed, dnorm, 1e-300)
    lo, hi = seed * (1 - 1e-3), seed * (1 + 1e-3)
    while lo > dnorm and _brl_feasible(sys, lo, feas_tol):
        hi, lo = lo, max(dnorm, lo * 0.5)
    while not _brl_feasible(sys, hi, feas_tol):
        lo, hi = hi, hi * 2.0
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if _brl_feasible(sys, mid, feas_tol):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Result types

@dataclass
class VerificationReport:
    """Independent recomputation of the synthesis constraints.

    ``h2_sq[i]`` is the squared H2 norm of participant ``i``'s error system
    and ``sens_sq[i]`` is ``rho_i^2 ||sensitivity_i||_inf^2``. Slacks are
    relative: ``(bound - value) / max(|bound|, |value|)``.
    """

    h2_sq: list
    hinf: list
    sens_sq: list
    h2_slack: list
    hinf_slack: list
    spectral_radius: list
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return (all(s >= -self.tol for s in self.h2_slack)
                and all(s >= -self.tol for s in self.hinf_slack))


@dataclass
class SynthesisResult:
    filters: list
    mu: list
    lam: float
    objective: float
    kind: str
    lambda_cap: float | None
    certificates: list = field(default_factory=list)
    verified: VerificationReport | None = None

    @property
    def filter(self) -> FilterRealization:
        return self.filters[0]

    @property
    def mu_total(self) -> float:
        return float(sum(self.mu))


# ---------------------------------------------------------------------------
# Participant bookkeeping

def _participants(plant, L, policy):
    n = len(policy)
    plants = list(plant) if isinstance(plant, (list, tuple)) else [plant] * n
    if isinstance(L, (list, tuple)) and len(L) and np.ndim(L[0]) == 2:
        Ls = [np.atleast_2d(np.asarray(x, dtype=float)) for x in L]
    else:
        Ls = [np.atleast_2d(np.asarray(L, dtype=float))] * n
    if len(plants) != n or len(Ls) != n:
        raise DimensionError("plants, L and policy must describe the same participants")
    out = []
    for i, (p, Li) in enumerate(zip(plants, Ls)):
        if Li.shape[1] != p.n_states:
            raise DimensionError(f"L[{i}] has {Li.shape[1]} columns, plant has "
                                 f"{p.n_states} states")
        out.append((p, Li, policy.rho[i], policy.T(i, p.n_states)))
    return out


def _group(parts):
    """Group identical participants; returns ``[(indices, part)]``."""
    groups = {}
    for i, (p, Li, rho, T) in enumerate(parts):
        key = (p.A.tobytes(), p.B.tobytes(), p.C.tobytes(), p.D.tobytes(),
               p.A.shape, p.B.shape, p.C.shape, Li.tobytes(), Li.shape,
               rho, T.tobytes())
        groups.setdefault(key, ([], (p, Li, rho, T)))[0].append(i)
    return list(groups.values())


# ---------------------------------------------------------------------------
# Filter recovery

def recover_filter(Z, Y, Fhat, Ghat, Hhat, Khat, U=None, cond_max=1e12) -> FilterRealization:
    """Undo the change of variables for the full-order filter.

    Picks ``U`` (default ``Z``) and ``V = (I - Y Z^{-1}) U^{-T}`` so that
    ``V U^T = I - Y Z^{-1}``, then returns ``F = V^{-1} F^ Z^{-1} U^{-T}``,
    ``G = V^{-1} G^``, ``H = H^ Z^{-1} U^{-T}``, ``K = K^``.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = Z.shape[0]
    U = Z if U is None else np.atleast_2d(np.asarray(U, dtype=float))
    Zi = np.linalg.inv(Z)
    M = np.eye(n) - Y @ Zi
    if np.linalg.cond(M) > cond_max or np.linalg.cond(U) > cond_max:
        raise DomainError("degenerate certificate; perturb and re-solve")
    V = M @ np.linalg.inv(U).T
    Vi = np.linalg.inv(V)
    UiT = np.linalg.inv(U).T
    F = Vi @ np.asarray(Fhat, dtype=float) @ Zi @ UiT
    G = Vi @ np.atleast_2d(np.asarray(Ghat, dtype=float))
    H = np.atleast_2d(np.asarray(Hhat, dtype=float)) @ Zi @ UiT
    K = np.atleast_2d(np.asarray(Khat, dtype=float))
    return FilterRealization(F, G, H, K)


# ---------------------------------------------------------------------------
# LMIs

def _stable_blocks(prob, tag, plant, Lbar, T, inv_rho2, lam, strictly_causal):
    A, B, C, D = plant.A, plant.B, plant.C, plant.D
    n, p, nw, nz = plant.n_states, plant.n_outputs, plant.n_inputs, Lbar.shape[0]
    W = prob.variable(f"W{tag}", nz, symmetric=True)
    Y = prob.variable(f"Y{tag}", n, symmetric=True)
    Z = prob.variable(f"Z{tag}", n, symmetric=True)
    Fh = prob.variable(f"Fhat{tag}", (n, n))
    Gh = prob.variable(f"Ghat{tag}", (n, p))
    Hh = prob.variable(f"Hhat{tag}", (nz, n))
    Kh = np.zeros((nz, p)) if strictly_causal else prob.variable(f"Khat{tag}", (nz, p))
    mu = prob.scalar(f"mu{tag}")
    prob.le(W.trace(), mu, name=f"trW{tag}")
    LKC = Lbar - Kh @ C
    prob.psd(bmat([[W, (LKC - Hh), LKC, -(Kh @ D)],
                   [(LKC - Hh).T, Z, Z, None],
                   [LKC.T, Z, Y, None],
                   [-(Kh @ D).T, None, None, np.eye(nw)]]), name=f"h2{tag}")
    ZA, ZB = Z @ A, Z @ B
    YAGC = Y @ A + Gh @ C
    prob.psd(bmat([[Z, Z, ZA, ZA, ZB],
                   [Z, Y, YAGC + Fh, YAGC, Y @ B + Gh @ D],
                   [ZA.T, (YAGC + Fh).T, Z, Z, None],
                   [ZA.T, YAGC.T, Z, Y, None],
                   [ZB.T, (Y @ B + Gh @ D).T, None, None, np.eye(nw)]]),
             name=f"lyap{tag}")
    if lam is not None:
        CT = C @ T
        zn = np.zeros((n, n))
        prob.psd(bmat([[Z, Z, None, zn, zn, zn],
                       [Z, Y, None, Fh, zn, Gh @ CT],
                       [None, None, lam * (inv_rho2 * np.eye(nz)), Hh, None, Kh @ CT],
                       [zn, Fh.T, Hh.T, Z, Z, zn],
                       [zn, zn, None, Z, Y, zn],
                       [zn, (Gh @ CT).T, (Kh @ CT).T, zn, zn, np.eye(n)]]),
                 name=f"hinf{tag}")
    return mu


def _unstable_blocks(prob, tag, plant, Lbar, T, inv_rho2, lam):
    A, B, C, D = plant.A, plant.B, plant.C, plant.D
    n, p, nw, nz = plant.n_states, plant.n_outputs, plant.n_inputs, Lbar.shape[0]
    X = prob.variable(f"X{tag}", n, symmetric=True)
    Y = prob.variable(f"Y{tag}", n, symmetric=True)
    Gh = prob.variable(f"Ghat{tag}", (n, p))
    mu = prob.scalar(f"mu{tag}")
    prob.le((Y @ (Lbar.T @ Lbar)).trace(), mu, name=f"trY{tag}")
    prob.psd(bmat([[Y, np.eye(n)], [np.eye(n), X]]), name=f"YX{tag}")
    XAGC = X @ A - Gh @ C
    XBGD = X @ B - Gh @ D
    prob.psd(bmat([[X, XAGC, XBGD],
                   [XAGC.T, X, np.zeros((n, nw))],
                   [XBGD.T, np.zeros((nw, n)), np.eye(nw)]]), name=f"h2{tag}")
    if lam is not None:
        GCT = Gh @ (C @ T)
        prob.psd(bmat([[X, None, XAGC, GCT],
                       [None, lam * (inv_rho2 * np.eye(nz)), Lbar, None],
                       [XAGC.T, Lbar.T, X, None],
                       [GCT.T, None, None, np.eye(n)]]),
                 name=f"hinf{tag}")
    return mu


def _synthesize(kind, plant, L, policy, budget, lambda_cap, strictly_causal=False,
                minimize_lambda=False):
    parts = _participants(plant, L, policy)
    if kind == "stable":
        for p, *_ in parts:
            if control.spectral_radius(p.A) >= 1.0:
                raise DomainError("plant is not Schur stable; use synth_unstable")
    else:
        for p, *_ in parts:
            if not control.is_detectable(p.A, p.C):
                raise DomainError("(A, C) is not detectable")
    groups = _group(parts)
    with_hinf = lambda_cap is None or math.isfinite(lambda_cap) or minimize_lambda
    prob = SdpProblem()
    lam = prob.scalar("lambda") if with_hinf else None
    k2 = budget.kappa ** 2
    objective = 0.0 if lam is None else (k2 * lam if lambda_cap is None else 0.0 * lam)
    active = []
    for g, (idx, (p, Li, rho, T)) in enumerate(groups):
        c = float(np.linalg.norm(Li))
        if c == 0.0:
            continue
        Lbar = Li / c
        use_hinf = lam is not None and rho > 0
        inv_rho2 = 1.0 / (rho * c) ** 2 if use_hinf else 0.0
        args = (prob, f"_{g}", p, Lbar, T, inv_rho2, lam if use_hinf else None)
        if kind == "stable":
            mu = _stable_blocks(*args, strictly_causal)
        else:
            mu = _unstable_blocks(*args)
        objective = objective + (len(idx) * c ** 2) * mu
        active.append((g, c))
    if lam is not None:
        prob.le(0.0, lam, name="lambda_nonneg")
        if lambda_cap is not None and math.isfinite(lambda_cap):
            prob.le(lam, lambda_cap, name="lambda_cap")
    if minimize_lambda:
        objective = lam
    if not active:
        return None, groups, {}
    prob.minimize(objective)
    sol = solve_sdp(prob)
    return sol, groups, dict(active)


def _finish(kind, sol, groups, scales, plant, L, policy, budget, lambda_cap):
    parts = _participants(plant, L, policy)
    filters = [None] * len(parts)
    mu = [0.0] * len(parts)
    certs = []
    for g, (idx, (p, Li, rho, T)) in enumerate(groups):
        tag = f"_{g}"
        n, ny, nz = p.n_states, p.n_outputs, Li.shape[0]
        if g not in scales:
            if kind == "stable":
                filt = FilterRealization(np.zeros((n, n)), np.zeros((n, ny)),
                                         np.zeros((nz, n)), np.zeros((nz, ny)))
            else:
                filt = FilterRealization(p.A, np.zeros((n, ny)), Li, np.zeros((nz, ny)))
            mu_g = 0.0
            certs.append({"participants": idx})
        else:
            c = scales[g]
            v = sol.values
            mu_g = c ** 2 * float(v[f"mu{tag}"][0, 0])
            if kind == "stable":
                Kh = v.get(f"Khat{tag}", np.zeros((nz, ny)))
                filt = recover_filter(v[f"Z{tag}"], v[f"Y{tag}"], v[f"Fhat{tag}"],
                                      v[f"Ghat{tag}"], c * v[f"Hhat{tag}"], c * Kh)
                certs.append({"participants": idx, "W": c ** 2 * v[f"W{tag}"],
                              "Y": v[f"Y{tag}"], "Z": v[f"Z{tag}"],
                              "Fhat": v[f"Fhat{tag}"], "Ghat": v[f"Ghat{tag}"],
                              "Hhat": c * v[f"Hhat{tag}"], "Khat": c * Kh,
                              "mu": mu_g})
            else:
                X = v[f"X{tag}"]
                G = np.linalg.solve(X, v[f"Ghat{tag}"])
                filt = FilterRealization(p.A - G @ p.C, G, Li, np.zeros((nz, ny)))
                certs.append({"participants": idx, "X": X, "Y": v[f"Y{tag}"],
                              "Ghat": v[f"Ghat{tag}"], "mu": mu_g})
        for i in idx:
            filters[i] = filt
            mu[i] = mu_g
    lam = 0.0
    if sol is not None and "lambda" in sol.values:
        lam = float(sol.values["lambda"][0, 0])
    result = SynthesisResult(filters=filters, mu=mu, lam=lam, objective=0.0,
                             kind=kind, lambda_cap=lambda_cap, certificates=certs)
    report = verify_synthesis(result, plant, L, policy)
    if sol is None or "lambda" not in sol.values:
        # no H-infinity constraint was imposed: report the achieved level
        result.lam = max(report.sens_sq, default=0.0)
        report = verify_synthesis(result, plant, L, policy)
    result.verified = report
    result.objective = result.mu_total + budget.kappa ** 2 * result.lam
    return result


def synth_stable(plant, L, policy: AdjacencyPolicy, budget: PrivacyBudget,
                 lambda_cap=None, strictly_causal=False) -> SynthesisResult:
    """Full-order privacy-aware filters for Schur-stable plants.

    ``lambda_cap`` selects the objective (see module docstring);
    ``math.inf`` drops the sensitivity LMI altogether. ``strictly_causal``
    fixes ``K = 0`` (one-step predictor class).
    """
    sol, groups, scales = _synthesize("stable", plant, L, policy, budget,
                                      lambda_cap, strictly_causal)
    return _finish("stable", sol, groups, scales, plant, L, policy, budget, lambda_cap)


def synth_unstable(plant, L, policy: AdjacencyPolicy, budget: PrivacyBudget,
                   lambda_cap=None) -> SynthesisResult:
    """Observer-form privacy-aware filters; the plant need not be stable."""
    sol, groups, scales = _synthesize("unstable", plant, L, policy, budget, lambda_cap)
    return _finish("unstable", sol, groups, scales, plant, L, policy, budget, lambda_cap)


def min_lambda(kind, plant, L, policy, budget, strictly_causal=False) -> float:
    """Smallest sensitivity level for which the LMIs are feasible."""
    sol, _, _ = _synthesize(kind, plant, L, policy, budget, None,
                            strictly_causal, minimize_lambda=True)
    return 0.0 if sol is None else float(sol.values["lambda"][0, 0])


# ---------------------------------------------------------------------------
# Verification

def _error_h2_sq(plant, Li, filt):
    err = control.build_error_system(plant, Li, filt)
    if control.spectral_radius(err.A) >= 1.0:
        err = control.minimal_realization(err)
        if err.n_states and control.spectral_radius(err.A) >= 1.0:
            return math.inf
    return control.h2_norm(err) ** 2


def _sensitivity_hinf(plant, filt, T):
    sens = control.build_sensitivity_system(filt, plant.C, T)
    if control.spectral_radius(sens.A) >= 1.0:
        sens = control.minimal_realization(sens)
        if sens.n_states and control.spectral_radius(sens.A) >= 1.0:
            return math.inf
    return control.hinf_norm(sens)


def _rel_slack(bound, value):
    den = max(abs(bound), abs(value), 1e-300)
    if math.isinf(value):
        return -math.inf
    return (bound - value) / den if den > 1e-14 else 0.0


def verify_synthesis(result: SynthesisResult, plant, L, policy) -> VerificationReport:
    """Recompute both constraints from the filters alone (no certificates)."""
    parts = _participants(plant, L, policy)
    h2_sq, hinf, sens_sq, h2_slack, hinf_slack, srad = [], [], [], [], [], []
    cache = {}
    for i, (p, Li, rho, T) in enumerate(parts):
        filt = result.filters[i]
        key = (id(filt), id(p), Li.tobytes(), rho, T.tobytes())
        if key not in cache:
            e2 = _error_h2_sq(p, Li, filt)
            hi = _sensitivity_hinf(p, filt, T)
            cache[key] = (e2, hi, control.spectral_radius(filt.F))
        e2, hi, sr = cache[key]
        s2 = rho ** 2 * hi ** 2 if rho > 0 else 0.0
        h2_sq.append(e2)
        hinf.append(hi)
        sens_sq.append(s2)
        h2_slack.append(_rel_slack(result.mu[i], e2))
        hinf_slack.append(_rel_slack(result.lam, s2))
        srad.append(sr)
    return VerificationReport(h2_sq, hinf, sens_sq, h2_slack, hinf_slack, srad)


def predicted_output_mse(result: SynthesisResult, budget: PrivacyBudget, n_z=None) -> float:
    """Exact output-perturbation MSE of the synthesized filters.

    Error variances plus ``kappa^2 max_i rho_i^2 gamma_i^2`` per output
    coordinate, all from the independent verification.
    """
    v = result.verified
    nz = result.filters[0].H.shape[0] if n_z is None else n_z
    return float(sum(v.h2_sq)) + budget.kappa ** 2 * max(v.sens_sq, default=0.0) * nz


def sweep_lambda_cap(kind, plant, L, policy, budget, n_grid=24, span=1e4,
                     strictly_causal=False):
    """Pick the sensitivity cap whose filter has the smallest true MSE.

    Minimises ``sum mu`` under ``lambda <= cap`` for a log-spaced set of
    caps above the smallest feasible one, evaluates each recovered filter
    with :func:`predicted_output_mse`, and polishes the best cap with a
    bounded search in ``log(cap)``. Returns ``(best_result, table)`` where
    ``table`` lists ``(cap, predicted_mse)`` pairs.
    """
    lam_min = min_lambda(kind, plant, L, policy, budget, strictly_causal)
    if lam_min <= 0:
        lam_min = 1e-12
    table = []
    cache = {}

    def run(log_cap):
        cap = float(np.exp(log_cap))
        if cap in cache:
            return cache[cap]
        try:
            if kind == "stable":
                res = synth_stable(plant, L, policy, budget, lambda_cap=cap,
                                   strictly_causal=strictly_causal)
            else:
                res = synth_unstable(plant, L, policy, budget, lambda_cap=cap)
            mse = predicted_output_mse(res, budget)
        except (SdpInfeasible, DomainError):
            res, mse = None, math.inf
        cache[cap] = (res, mse)
        table.append((cap, mse))
        return res, mse

    logs = np.log(lam_min) + np.log(np.geomspace(1.0 + 1e-3, span, n_grid))
    vals = [run(x)[1] for x in logs]
    k = int(np.argmin(vals))
    lo, hi = logs[max(k - 1, 0)], logs[min(k + 1, len(logs) - 1)]
    if hi > lo:
        optimize.minimize_scalar(lambda x: run(x)[1], bounds=(lo, hi),
                                 method="bounded", options={"xatol": 1e-3})
    best_cap = min(cache, key=lambda c: cache[c][1])
    table.sort()
    return cache[best_cap][0], table
