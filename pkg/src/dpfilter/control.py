"""Discrete-time linear systems: stability, Gramians, Riccati, H2/H-infinity norms.

Everything here works on small dense matrices. Systems are immutable
``StateSpaceSystem`` values; all functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
from scipy import optimize

from .exceptions import ConvergenceError, DimensionError, DomainError

__all__ = [
    "StateSpaceSystem",
    "FilterRealization",
    "RiccatiSolution",
    "spectral_radius",
    "is_detectable",
    "is_stabilizable",
    "solve_discrete_lyapunov",
    "freqresp",
    "h2_norm",
    "h2_norm_frequency",
    "hinf_norm",
    "solve_dare",
    "predictor_filter",
    "current_filter",
    "build_error_system",
    "build_sensitivity_system",
    "restricted_error_system",
    "selection_matrix",
    "minimal_realization",
    "fir_system",
]


def _as_matrix(M, name):
    M = np.array(M, dtype=float, copy=True)
    if M.ndim == 0:
        M = M.reshape(1, 1)
    if M.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D matrix, got ndim={M.ndim}")
    if not np.all(np.isfinite(M)):
        raise DomainError(f"{name} has non-finite entries")
    M.setflags(write=False)
    return M


@dataclass(frozen=True)
class StateSpaceSystem:
    """Discrete-time LTI system ``x+ = A x + B w``, ``y = C x + D w``.

    A system without states (pure feedthrough) is built with
    :meth:`static`.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C = _as_matrix(self.C, "C")
        D = _as_matrix(self.D, "D")
        nx = A.shape[0]
        if A.shape != (nx, nx):
            raise DimensionError(f"A must be square, got {A.shape}")
        if B.shape[0] != nx:
            raise DimensionError(f"B has {B.shape[0]} rows, A has {nx}")
        if C.shape[1] != nx:
            raise DimensionError(f"C has {C.shape[1]} columns, A has {nx}")
        if D.shape != (C.shape[0], B.shape[1]):
            raise DimensionError(
                f"D must be {C.shape[0]}x{B.shape[1]}, got {D.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)

    @classmethod
    def static(cls, D):
        D = np.atleast_2d(np.asarray(D, dtype=float))
        ny, nw = D.shape
        return cls(np.zeros((0, 0)), np.zeros((0, nw)), np.zeros((ny, 0)), D)

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.C.shape[0]

    def similarity(self, T) -> "StateSpaceSystem":
        """Realization in coordinates ``x = T xi``."""
        T = np.asarray(T, dtype=float)
        Ti = np.linalg.inv(T)
        return StateSpaceSystem(Ti @ self.A @ T, Ti @ self.B, self.C @ T, self.D)

    def freqresp(self, omega) -> np.ndarray:
        return freqresp(self, omega)


@dataclass(frozen=True)
class FilterRealization:
    """Linear filter ``xh+ = F xh + G y``, ``zh = H xh + K y``."""

    F: np.ndarray
    G: np.ndarray
    H: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        F = _as_matrix(self.F, "F")
        G = _as_matrix(self.G, "G")
        H = _as_matrix(self.H, "H")
        K = _as_matrix(self.K, "K")
        nf = F.shape[0]
        if F.shape != (nf, nf):
            raise DimensionError(f"F must be square, got {F.shape}")
        if G.shape[0] != nf or H.shape[1] != nf:
            raise DimensionError("G rows / H columns must match F")
        if K.shape != (H.shape[0], G.shape[1]):
            raise DimensionError(
                f"K must be {H.shape[0]}x{G.shape[1]}, got {K.shape}")
        for name, M in zip("FGHK", (F, G, H, K)):
            object.__setattr__(self, name, M)

    @property
    def n_states(self) -> int:
        return self.F.shape[0]

    def as_system(self) -> StateSpaceSystem:
        """The map from measurements ``y`` to the estimate ``zh``."""
        return StateSpaceSystem(self.F, self.G, self.H, self.K)

    def is_stable(self) -> bool:
        return spectral_radius(self.F) < 1.0

    def scaled_output(self, c) -> "FilterRealization":
        return FilterRealization(self.F, self.G, c * self.H, c * self.K)


@dataclass(frozen=True)
class RiccatiSolution:
    """Steady-state Kalman quantities.

    ``P`` is the one-step prediction error covariance, ``gain`` the
    predictor gain (``xh+ = A xh + gain (y - C xh)``). ``filter_gain`` and
    ``P_filtered`` belong to the current-time estimate
    ``x(t|t) = xh + filter_gain (y - C xh)``.
    """

    P: np.ndarray
    gain: np.ndarray
    iterations: int
    residual: float
    filter_gain: np.ndarray
    P_filtered: np.ndarray


def _check_square(A, name="A"):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {A.shape}")
    return A


def spectral_radius(A) -> float:
    A = _check_square(A)
    if A.size == 0:
        return 0.0
    if not np.all(np.isfinite(A)):
        raise DomainError("matrix has non-finite entries")
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def _pbh_ok(A, M, tol, by_rows):
    # PBH test on every eigenvalue outside the open unit disc
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) < 1.0 - tol:
            continue
        if by_rows:
            test = np.vstack([lam * np.eye(n) - A, M])
        else:
            test = np.hstack([lam * np.eye(n) - A, M])
        s = np.linalg.svd(test, compute_uv=False)
        if s[n - 1] <= tol * max(1.0, s[0]):
            return False
    return True


def is_detectable(A, C, tol=1e-9) -> bool:
    A = _check_square(A)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    return _pbh_ok(A, C, tol, by_rows=True)


def is_stabilizable(A, B, tol=1e-9) -> bool:
    A = _check_square(A)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    return _pbh_ok(A, B, tol, by_rows=False)


def solve_discrete_lyapunov(A, Q, rtol=1e-10) -> np.ndarray:
    """Solve ``A P A^T - P + Q = 0`` for Schur-stable ``A``."""
    A = _check_square(A)
    Q = _check_square(Q, "Q")
    if Q.shape != A.shape:
        raise DimensionError(f"Q must be {A.shape}, got {Q.shape}")
    if A.size == 0:
        return np.zeros((0, 0))
    if spectral_radius(A) >= 1.0:
        raise DomainError("Lyapunov requires Schur stability")
    P = la.solve_discrete_lyapunov(A, Q)
    P = 0.5 * (P + P.T)
    res = np.linalg.norm(A @ P @ A.T - P + Q)
    if res > rtol * max(1.0, np.linalg.norm(Q)) * max(1.0, np.linalg.norm(P)):
        raise ConvergenceError(f"Lyapunov residual {res:.3e} too large",
                               residual=res)
    return P


def freqresp(sys: StateSpaceSystem, omega) -> np.ndarray:
    """Evaluate ``G(e^{j omega})`` on an array of frequencies.

    Returns a complex array of shape ``(len(omega), n_outputs, n_inputs)``.
    """
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    n = sys.n_states
    out = np.broadcast_to(sys.D.astype(complex),
                          (omega.size,) + sys.D.shape).copy()
    if n == 0:
        return out
    z = np.exp(1j * omega)
    M = z[:, None, None] * np.eye(n) - sys.A
    X = np.linalg.solve(M, np.broadcast_to(sys.B, (omega.size,) + sys.B.shape))
    return out + sys.C @ X


def _require_stable(sys):
    if sys.n_states and spectral_radius(sys.A) >= 1.0:
        raise DomainError("system is not Schur stable")


def h2_norm(sys: StateSpaceSystem) -> float:
    """H2 norm from the controllability Gramian."""
    _require_stable(sys)
    val = np.trace(sys.D @ sys.D.T)
    if sys.n_states:
        W = solve_discrete_lyapunov(sys.A, sys.B @ sys.B.T)
        val += np.trace(sys.C @ W @ sys.C.T)
    return float(np.sqrt(max(val, 0.0)))


def h2_norm_frequency(sys: StateSpaceSystem, n_points=8192) -> float:
    """H2 norm by periodic trapezoidal quadrature of ``Tr G* G``.

    Uniform nodes over a full period; the error decays like
    ``spectral_radius(A) ** n_points``.
    """
    _require_stable(sys)
    omega = 2.0 * np.pi * np.arange(n_points) / n_points
    G = freqresp(sys, omega)
    vals = np.sum(np.abs(G) ** 2, axis=(1, 2))
    return float(np.sqrt(np.mean(vals)))


def _sigma_max(sys, omega):
    G = freqresp(sys, omega)
    if G.shape[1] == 0 or G.shape[2] == 0:
        return np.zeros(np.size(omega))
    return np.linalg.svd(G, compute_uv=False)[:, 0]


def hinf_norm(sys: StateSpaceSystem, n_grid=4096, n_peaks=5,
              return_frequency=False):
    """H-infinity norm by frequency sweep and local refinement.

    The largest singular value is sampled on ``n_grid`` points of
    ``[0, pi]`` (real systems are conjugate symmetric) and the best
    ``n_peaks`` local maxima are polished with a bounded scalar search.
    """
    _require_stable(sys)
    if sys.n_states == 0:
        val = float(np.linalg.norm(sys.D, 2)) if sys.D.size else 0.0
        return (val, 0.0) if return_frequency else val
    grid = np.linspace(0.0, np.pi, n_grid)
    s = _sigma_max(sys, grid)
    left = np.r_[-np.inf, s[:-1]]
    right = np.r_[s[1:], -np.inf]
    peaks = np.flatnonzero((s >= left) & (s >= right))
    peaks = peaks[np.argsort(s[peaks])[::-1][:n_peaks]]
    best, best_w = float(s[peaks[0]]), float(grid[peaks[0]])
    h = grid[1] - grid[0]
    for i in peaks:
        lo, hi = max(grid[i] - h, 0.0), min(grid[i] + h, np.pi)
        res = optimize.minimize_scalar(
            lambda w: -_sigma_max(sys, w)[0], bounds=(lo, hi),
            method="bounded", options={"xatol": 1e-13})
        for w, v in ((res.x, -res.fun), (lo, None), (hi, None)):
            v = _sigma_max(sys, w)[0] if v is None else v
            if v > best:
                best, best_w = float(v), float(w)
    return (best, best_w) if return_frequency else best


def _riccati_map(P, A, C, Q, R, S):
    M = A @ P @ C.T + S
    V = C @ P @ C.T + R
    return A @ P @ A.T + Q - M @ np.linalg.solve(V, M.T)


def solve_dare(A, C, Q, R, S=None, tol=1e-12, max_iter=100_000) -> RiccatiSolution:
    """Steady-state filtering Riccati equation.

    Solves ``P = A P A' + Q - (A P C' + S)(C P C' + R)^{-1}(A P C' + S)'``
    by the structure-preserving doubling iteration. ``Q = B B'``,
    ``R = D D'`` and ``S = B D'`` for the noise model ``x+ = Ax + Bw``,
    ``y = Cx + Dw``.
    """
    A = _check_square(A)
    n = A.shape[0]
    C = np.atleast_2d(np.asarray(C, dtype=float))
    Q = _check_square(Q, "Q")
    R = _check_square(R, "R")
    p = C.shape[0]
    if C.shape[1] != n or Q.shape != (n, n) or R.shape != (p, p):
        raise DimensionError("inconsistent DARE dimensions")
    S = np.zeros((n, p)) if S is None else np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape != (n, p):
        raise DimensionError(f"S must be {n}x{p}, got {S.shape}")
    try:
        np.linalg.cholesky(0.5 * (R + R.T))
    except np.linalg.LinAlgError:
        raise DomainError("measurement noise must be full rank") from None
    if not is_detectable(A, C):
        raise DomainError("(A, C) is not detectable")

    Rinv_C = np.linalg.solve(R, C)
    Abar = A - S @ Rinv_C
    Qbar = Q - S @ np.linalg.solve(R, S.T)
    Qbar = 0.5 * (Qbar + Qbar.T)
    Ak = Abar.T.copy()
    Gk = C.T @ Rinv_C
    Gk = 0.5 * (Gk + Gk.T)
    Hk = Qbar.copy()
    eye = np.eye(n)
    it = 0
    rel = np.inf
    while it < max_iter:
        it += 1
        W = eye + Gk @ Hk
        WA = np.linalg.solve(W, Ak)
        WG = np.linalg.solve(W, Gk)
        H_next = Hk + Ak.T @ Hk @ WA
        Gk = Gk + Ak @ WG @ Ak.T
        Ak = Ak @ WA
        H_next = 0.5 * (H_next + H_next.T)
        Gk = 0.5 * (Gk + Gk.T)
        scale = max(np.linalg.norm(H_next), np.finfo(float).tiny)
        rel = np.linalg.norm(H_next - Hk) / scale
        Hk = H_next
        if not np.all(np.isfinite(Hk)):
            break
        if rel <= tol:
            break
    P = Hk
    if not np.all(np.isfinite(P)) or rel > tol:
        res = np.nan if not np.all(np.isfinite(P)) else float(
            np.linalg.norm(_riccati_map(P, A, C, Q, R, S) - P)
            / max(np.linalg.norm(P), 1e-300))
        raise ConvergenceError(
            f"DARE iteration did not converge after {it} steps "
            f"(residual {res:.3e})", iterations=it, residual=res)
    residual = float(np.linalg.norm(_riccati_map(P, A, C, Q, R, S) - P)
                     / max(np.linalg.norm(P), 1e-300))
    V = C @ P @ C.T + R
    gain = np.linalg.solve(V.T, (A @ P @ C.T + S).T).T
    filter_gain = np.linalg.solve(V.T, (P @ C.T).T).T
    Pf = P - filter_gain @ C @ P
    Pf = 0.5 * (Pf + Pf.T)
    return RiccatiSolution(P=P, gain=gain, iterations=it, residual=residual,
                           filter_gain=filter_gain, P_filtered=Pf)


def predictor_filter(plant: StateSpaceSystem, L, ric: RiccatiSolution) -> FilterRealization:
    """One-step predictor: ``zh_t = L xh(t|t-1)``, no feedthrough."""
    L = np.atleast_2d(np.asarray(L, dtype=float))
    F = plant.A - ric.gain @ plant.C
    return FilterRealization(F, ric.gain, L, np.zeros((L.shape[0], plant.n_outputs)))


def current_filter(plant: StateSpaceSystem, L, ric: RiccatiSolution) -> FilterRealization:
    """Current-time estimator: ``zh_t = L x(t|t)`` with ``K = L Kf``."""
    L = np.atleast_2d(np.asarray(L, dtype=float))
    Kf = ric.filter_gain
    F = plant.A - ric.gain @ plant.C
    H = L @ (np.eye(plant.n_states) - Kf @ plant.C)
    return FilterRealization(F, ric.gain, H, L @ Kf)


def build_error_system(plant: StateSpaceSystem, L, filt: FilterRealization) -> StateSpaceSystem:
    """Map from process noise ``w`` to the error ``L x - zh``.

    State ordering is ``[x; xh]``.
    """
    L = np.atleast_2d(np.asarray(L, dtype=float))
    A, B, C, D = plant.A, plant.B, plant.C, plant.D
    F, G, H, K = filt.F, filt.G, filt.H, filt.K
    if L.shape[1] != plant.n_states:
        raise DimensionError("L columns must equal the plant state dimension")
    if G.shape[1] != plant.n_outputs or H.shape[0] != L.shape[0]:
        raise DimensionError("filter does not fit the plant / L dimensions")
    nx, nf = plant.n_states, filt.n_states
    At = np.block([[A, np.zeros((nx, nf))], [G @ C, F]])
    Bt = np.vstack([B, G @ D])
    Ct = np.hstack([L - K @ C, -H])
    Dt = -K @ D
    return StateSpaceSystem(At, Bt, Ct, Dt)


def selection_matrix(mask, n=None) -> np.ndarray:
    """Diagonal 0/1 matrix from a 0/1 mask vector or a diagonal matrix."""
    m = np.asarray(mask, dtype=float)
    if m.ndim == 2:
        if m.shape[0] != m.shape[1] or np.any(m != np.diag(np.diag(m))):
            raise DomainError("selection matrix must be diagonal")
        d = np.diag(m)
    else:
        d = np.atleast_1d(m).ravel()
    if n is not None and d.size != n:
        raise DimensionError(f"selection has size {d.size}, expected {n}")
    if np.any((d != 0) & (d != 1)):
        raise DomainError("selection must be 0/1")
    return np.diag(d)


def build_sensitivity_system(filt: FilterRealization, C, T) -> StateSpaceSystem:
    """System ``(F, G C T, H, K C T)`` from a protected-state deviation to ``zh``."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    T = selection_matrix(T, C.shape[1])
    if C.shape[0] != filt.G.shape[1] or T.shape[0] != C.shape[1]:
        raise DimensionError("C / T do not match the filter input dimension")
    CT = C @ T
    return StateSpaceSystem(filt.F, filt.G @ CT, filt.H, filt.K @ CT)


def restricted_error_system(plant: StateSpaceSystem, L, G) -> StateSpaceSystem:
    """Error dynamics of the observer-form filter ``F = A - G C, H = L, K = 0``."""
    L = np.atleast_2d(np.asarray(L, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    A, B, C, D = plant.A, plant.B, plant.C, plant.D
    return StateSpaceSystem(A - G @ C, B - G @ D, L,
                            np.zeros((L.shape[0], plant.n_inputs)))


def _reachable_basis(A, B, tol):
    n = A.shape[0]
    if n == 0 or B.size == 0:
        return np.zeros((n, 0))
    scale = max(1.0, np.linalg.norm(A), np.linalg.norm(B))
    V = np.zeros((n, 0))
    block = B
    for _ in range(n):
        U, s, _ = np.linalg.svd(np.hstack([V, block]), full_matrices=False)
        r = int(np.sum(s > tol * scale))
        if r == V.shape[1]:
            break
        V = U[:, :r]
        block = A @ V
    return V


def minimal_realization(sys: StateSpaceSystem, tol=1e-9) -> StateSpaceSystem:
    """Drop unreachable, then unobservable, states by orthogonal projection."""
    V = _reachable_basis(sys.A, sys.B, tol)
    s1 = StateSpaceSystem(V.T @ sys.A @ V, V.T @ sys.B, sys.C @ V, sys.D)
    W = _reachable_basis(s1.A.T, s1.C.T, tol)
    return StateSpaceSystem(W.T @ s1.A @ W, W.T @ s1.B, s1.C @ W, s1.D)


def fir_system(taps) -> StateSpaceSystem:
    """SISO FIR filter ``sum_k taps[k] z^{-k}`` as a shift-register realization."""
    h = np.asarray(taps, dtype=float).ravel()
    if h.size == 0:
        raise DimensionError("at least one tap is required")
    m = h.size - 1
    A = np.eye(m, k=-1)
    B = np.zeros((m, 1))
    if m:
        B[0, 0] = 1.0
    return StateSpaceSystem(A, B, h[1:].reshape(1, m), h[:1].reshape(1, 1))
