"""Gaussian-mechanism calibration for static queries and dynamic channels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from .exceptions import DimensionError, DomainError

__all__ = [
    "PrivacyBudget",
    "AdjacencyPolicy",
    "q_function",
    "q_inverse",
    "kappa",
    "gaussian_sigma",
    "dynamic_mechanism_sigma",
    "perturbation_mse",
    "dp_slack",
    "verify_dp_scalar",
]


def q_function(x):
    """Standard normal upper-tail probability ``P(N(0,1) > x)``."""
    out = 0.5 * special.erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))
    return float(out) if np.ndim(x) == 0 else out


def q_inverse(p):
    """Inverse of :func:`q_function` on ``(0, 1)``."""
    arr = np.asarray(p, dtype=float)
    if np.any(~((arr > 0.0) & (arr < 1.0))):
        raise DomainError("q_inverse requires 0 < p < 1")
    out = -special.ndtri(arr)
    return float(out) if np.ndim(p) == 0 else out


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float
    kappa: float = field(init=False, repr=False)

    def __post_init__(self):
        eps, delta = float(self.epsilon), float(self.delta)
        if not (eps > 0.0 and math.isfinite(eps)):
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")
        if not (0.0 < delta <= 0.5):
            raise DomainError(f"delta must lie in (0, 0.5], got {self.delta}")
        object.__setattr__(self, "epsilon", eps)
        object.__setattr__(self, "delta", delta)
        K = q_inverse(delta)
        object.__setattr__(self, "kappa",
                           (K + math.sqrt(K * K + 2.0 * eps)) / (2.0 * eps))


def kappa(budget: PrivacyBudget) -> float:
    """Noise multiplier: Gaussian std per unit of l2-sensitivity."""
    return budget.kappa


def gaussian_sigma(sensitivity_l2: float, budget: PrivacyBudget) -> float:
    if sensitivity_l2 < 0:
        raise DomainError("sensitivity must be nonnegative")
    return budget.kappa * float(sensitivity_l2)


def dynamic_mechanism_sigma(channel_gains: Sequence[tuple[float, float]],
                            budget: PrivacyBudget) -> float:
    """White-noise std for releasing a sum of dynamic channels.

    ``channel_gains`` holds ``(gain_i, b_i)`` pairs: the l2-to-l2
    (incremental) gain of channel ``i`` and the bound on the deviation of
    its input signal. For linear channels the gain is the H-infinity norm.
    """
    pairs = list(channel_gains)
    if not pairs:
        raise DimensionError("at least one channel is required")
    worst = 0.0
    for g, b in pairs:
        if g < 0 or b < 0:
            raise DomainError("gains and bounds must be nonnegative")
        worst = max(worst, g * b)
    return budget.kappa * worst


def perturbation_mse(h2_norms, hinf_norms, energy_bound, budget: PrivacyBudget):
    """MSE of input vs output perturbation for a sum of linear channels.

    Returns ``(input_scheme_mse, output_scheme_mse)`` where the input
    scheme perturbs every channel input and the output scheme adds a
    single noise source calibrated to the worst channel.
    """
    h2 = np.asarray(h2_norms, dtype=float)
    hi = np.asarray(hinf_norms, dtype=float)
    if h2.shape != hi.shape or h2.ndim != 1:
        raise DimensionError("h2_norms and hinf_norms must be equal-length lists")
    if np.any(h2 < 0) or np.any(hi < 0) or energy_bound < 0:
        raise DomainError("norms and energy bound must be nonnegative")
    k2E = budget.kappa ** 2 * energy_bound
    inp = k2E * float(np.sum(h2 ** 2))
    out = k2E * float(np.max(hi ** 2)) if hi.size else 0.0
    return inp, out


@dataclass(frozen=True)
class AdjacencyPolicy:
    """Per-participant deviation bounds and protected state coordinates.

    ``selections[i]`` lists the protected coordinate indices of participant
    ``i``; the corresponding diagonal 0/1 matrix is :meth:`T`.
    """

    rho: tuple
    selections: tuple

    def __post_init__(self):
        rho = tuple(float(r) for r in self.rho)
        sel = tuple(tuple(int(j) for j in s) for s in self.selections)
        if len(rho) != len(sel):
            raise DimensionError("rho and selections must have equal length")
        if any(r < 0 or not math.isfinite(r) for r in rho):
            raise DomainError("rho must be finite and nonnegative")
        if any(j < 0 for s in sel for j in s):
            raise DomainError("selection indices must be nonnegative")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "selections", sel)

    @classmethod
    def uniform(cls, n, rho, selection):
        return cls((rho,) * n, (tuple(selection),) * n)

    def __len__(self):
        return len(self.rho)

    def T(self, i, n_states) -> np.ndarray:
        sel = self.selections[i]
        if any(j >= n_states for j in sel):
            raise DimensionError(
                f"selection {sel} out of range for state dimension {n_states}")
        d = np.zeros(n_states)
        d[list(sel)] = 1.0
        return np.diag(d)


def dp_slack(sigma, sensitivity, epsilon, t):
    """``Q((t - Delta)/sigma) - e^eps Q(t/sigma)`` for threshold events ``[t, inf)``."""
    t = np.asarray(t, dtype=float)
    return (special.erfc((t - sensitivity) / (sigma * math.sqrt(2.0)))
            - math.exp(epsilon) * special.erfc(t / (sigma * math.sqrt(2.0)))) * 0.5


def verify_dp_scalar(sigma: float, sensitivity: float, budget: PrivacyBudget,
                     n_grid: int = 4001) -> float:
    """Worst-case DP slack of the scalar Gaussian mechanism over half-lines.

    Returns ``delta - sup_t [Q((t-Delta)/sigma) - e^eps Q(t/sigma)]``. The
    supremum is attained where the privacy-loss density ratio equals
    ``e^eps``, i.e. at ``t* = sigma^2 eps / Delta + Delta / 2``; a grid
    over ``[-10 sigma, 10 sigma]`` around ``t*`` guards the closed form.
    A nonnegative margin certifies every threshold event.
    """
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    if sensitivity < 0:
        raise DomainError("sensitivity must be nonnegative")
    eps = budget.epsilon
    if sensitivity == 0:
        # identical output laws: slack (1 - e^eps) Q(t/sigma) -> 0 as t -> inf
        return budget.delta
    t_star = sigma ** 2 * eps / sensitivity + sensitivity / 2.0
    grid = np.concatenate([np.linspace(-10 * sigma, 10 * sigma, n_grid),
                           t_star + sigma * np.linspace(-1e-2, 1e-2, 201)])
    sup = max(float(dp_slack(sigma, sensitivity, eps, t_star)),
              float(np.max(dp_slack(sigma, sensitivity, eps, grid))), 0.0)
    return budget.delta - sup
