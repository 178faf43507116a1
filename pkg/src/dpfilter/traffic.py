"""Average-velocity estimation for a fleet of vehicles under differential privacy.

Each vehicle is a noisy double integrator that reports its position. The
released quantity is the fleet's average velocity. Internally everything
is SI (m, m/s); every velocity that leaves this module is in km/h.

Random numbers come from numpy's counter-based Philox generator. Trial
``k`` uses the key ``SeedSequence(seed, spawn_key=(k, stream))`` where
stream 0 drives the vehicles and each scheme has its own fixed stream, so
results do not depend on thread count or on which schemes are selected.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import synthesis
from .control import FilterRealization, StateSpaceSystem
from .exceptions import DomainError
from .kalman import (MechanismPlan, ParticipantModel, input_perturbation_plan,
                     output_perturbation_plan, synthesized_plan)
from .privacy import AdjacencyPolicy, PrivacyBudget

KMH_PER_MS = 3.6

SCHEMES = ("naive-input", "compensated-input", "output-kalman", "output-synthesized")
_STREAM = {name: k + 1 for k, name in enumerate(SCHEMES)}

__all__ = [
    "SCHEMES",
    "ConfigError",
    "SimulationConfig",
    "SimulationResult",
    "build_traffic_model",
    "build_plans",
    "run_simulation",
    "convergence_report",
    "write_traces_csv",
    "summary_dict",
    "write_summary_json",
    "to_kmh",
    "from_kmh",
]


def to_kmh(v):
    return np.asarray(v, dtype=float) * KMH_PER_MS


def from_kmh(v):
    return np.asarray(v, dtype=float) / KMH_PER_MS


def build_traffic_model(T_s=1.0, sigma1=1.0, sigma2=1.0, n_participants=1) -> ParticipantModel:
    """Double-integrator vehicle with position measurements.

    ``L = [0, 1/n]`` so that summing over the fleet gives the average
    velocity; the protected coordinate is position.
    """
    for name, v in (("T_s", T_s), ("sigma1", sigma1), ("sigma2", sigma2)):
        if not v > 0:
            raise DomainError(f"{name} must be positive, got {v}")
    if n_participants < 1:
        raise DomainError("n_participants must be at least 1")
    A = np.array([[1.0, T_s], [0.0, 1.0]])
    B = sigma1 * np.array([[T_s ** 2 / 2.0, 0.0], [T_s, 0.0]])
    C = np.array([[1.0, 0.0]])
    D = sigma2 * np.array([[0.0, 1.0]])
    return ParticipantModel(StateSpaceSystem(A, B, C, D),
                            np.array([[0.0, 1.0 / n_participants]]))


# ---------------------------------------------------------------------------
# configuration

class ConfigError(ValueError):
    """Invalid configuration; ``field`` and ``line`` locate the problem."""

    def __init__(self, message, field=None, line=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.field = field
        self.line = line


@dataclass(frozen=True)
class SimulationConfig:
    n_participants: int = 200
    horizon: int = 600
    trials: int = 50
    seed: int = 0
    T_s: float = 1.0
    sigma1: float = 1.0
    sigma2: float = 1.0
    rho: float = 100.0
    epsilon: float = math.log(3.0)
    delta: float = 0.05
    mean_initial_velocity: float = 45.0
    initial_velocity_std: float = 5.0
    initial_position_std: float = 50.0
    schemes: tuple = SCHEMES
    filter_init_velocity: float | None = None
    lambda_cap: float | None = None

    def __post_init__(self):
        ints = ("n_participants", "horizon", "trials", "seed")
        for name in ints:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ConfigError(f"expected an integer, got {v!r}", name)
        for name in ("n_participants", "horizon", "trials"):
            if getattr(self, name) < 1:
                raise ConfigError("must be at least 1", name)
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("must be a 64-bit unsigned integer", "seed")
        for f in dataclasses.fields(self):
            if f.name in ints or f.name == "schemes":
                continue
            v = getattr(self, f.name)
            if v is None and f.name in ("filter_init_velocity", "lambda_cap"):
                continue
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ConfigError(f"expected a finite number, got {v!r}", f.name)
            object.__setattr__(self, f.name, float(v))
        for name in ("T_s", "sigma1", "sigma2", "epsilon"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be positive", name)
        for name in ("rho", "initial_velocity_std", "initial_position_std"):
            if getattr(self, name) < 0:
                raise ConfigError("must be nonnegative", name)
        if not 0 < self.delta <= 0.5:
            raise ConfigError("must lie in (0, 0.5]", "delta")
        if self.lambda_cap is not None and not self.lambda_cap > 0:
            raise ConfigError("must be positive or null", "lambda_cap")
        if isinstance(self.schemes, str) or not all(isinstance(s, str) for s in self.schemes):
            raise ConfigError("expected a list of scheme names", "schemes")
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad or not self.schemes or len(set(self.schemes)) != len(self.schemes):
            raise ConfigError(f"expected distinct names from {list(SCHEMES)}, got "
                              f"{list(self.schemes)}", "schemes")
        # canonical order keeps CSV columns independent of how the list was written
        object.__setattr__(self, "schemes", tuple(s for s in SCHEMES if s in self.schemes))

    @property
    def init_velocity(self) -> float:
        """Velocity (km/h) used to initialise the filters."""
        if self.filter_init_velocity is None:
            return self.mean_initial_velocity
        return self.filter_init_velocity

    @classmethod
    def from_dict(cls, data: dict, text: str | None = None) -> "SimulationConfig":
        if not isinstance(data, dict):
            raise ConfigError("top level must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError("unknown field", key, field_line(text, key))
        kwargs = dict(data)
        if "schemes" in kwargs and isinstance(kwargs["schemes"], list):
            kwargs["schemes"] = tuple(kwargs["schemes"])
        try:
            return cls(**kwargs)
        except ConfigError as exc:
            if exc.field is not None and exc.line is None and text is not None:
                raise ConfigError(str(exc).split(": ", 1)[-1], exc.field,
                                  field_line(text, exc.field)) from None
            raise

    @classmethod
    def from_json(cls, text: str) -> "SimulationConfig":
        return cls.from_dict(parse_json(text), text)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schemes"] = list(self.schemes)
        return d


def parse_json(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg} (column {exc.colno})",
                          line=exc.lineno) from None


def field_line(text, key):
    if text is None:
        return None
    needle = f'"{key}"'
    for k, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return k
    return None


# ---------------------------------------------------------------------------
# mechanisms

@dataclass
class SchemeSetup:
    """What the simulator needs to run one scheme on the fleet average."""

    plan: MechanismPlan
    aggregate: FilterRealization   # one filter run on the averaged measurement
    input_noise_std: float = 0.0
    output_noise_std: float = 0.0


def _aggregate(filters, n):
    f = filters[0]
    if any(g is not f for g in filters):
        raise DomainError("the fleet simulator requires identical filters")
    return f.scaled_output(n)


def build_plans(config: SimulationConfig):
    """Mechanism plans for the configured schemes.

    Returns ``(setups, errors)``: ``setups[name]`` is a :class:`SchemeSetup`
    and ``errors[name]`` a message for any scheme whose design failed.
    """
    n = config.n_participants
    pm = build_traffic_model(config.T_s, config.sigma1, config.sigma2, n)
    parts = [pm] * n
    policy = AdjacencyPolicy.uniform(n, config.rho, (0,))
    budget = PrivacyBudget(config.epsilon, config.delta)
    setups, errors = {}, {}
    want = set(config.schemes)
    if want & {"naive-input", "compensated-input"}:
        naive, comp = input_perturbation_plan(parts, policy, budget)
        for name, plan in (("naive-input", naive), ("compensated-input", comp)):
            if name in want:
                setups[name] = SchemeSetup(plan, _aggregate(plan.filters, n),
                                           input_noise_std=plan.input_noise_std[0])
    if "output-kalman" in want:
        plan = output_perturbation_plan(parts, policy, budget)
        setups["output-kalman"] = SchemeSetup(plan, _aggregate(plan.filters, n),
                                              output_noise_std=plan.output_noise_std)
    if "output-synthesized" in want:
        try:
            if config.lambda_cap is None:
                res, _ = synthesis.sweep_lambda_cap("unstable", pm.system, pm.L, policy, budget)
            else:
                res = synthesis.synth_unstable(pm.system, pm.L, policy, budget,
                                               lambda_cap=config.lambda_cap)
            if res is None:
                raise DomainError("no feasible sensitivity cap found")
            plan = synthesized_plan(parts, policy, budget, res)
            setups["output-synthesized"] = SchemeSetup(plan, _aggregate(plan.filters, n),
                                                       output_noise_std=plan.output_noise_std)
        except Exception as exc:  # reported per scheme; other schemes still run
            errors["output-synthesized"] = f"{type(exc).__name__}: {exc}"
    return setups, errors


# ---------------------------------------------------------------------------
# simulation

@dataclass
class SimulationResult:
    config: SimulationConfig
    z_true: np.ndarray                  # (trials, horizon), km/h
    estimates: dict                     # scheme -> (trials, horizon), km/h
    setups: dict
    errors: dict
    stats: dict = field(default_factory=dict)

    @property
    def schemes(self):
        return [s for s in self.config.schemes if s in self.estimates]


def _rng(seed, trial, stream):
    ss = np.random.SeedSequence(seed, spawn_key=(trial, stream))
    return np.random.Generator(np.random.Philox(ss))


def _run_filter(f: FilterRealization, y, x0):
    """Outputs of ``xh+ = F xh + G y, zh = H xh + K y`` for a (T, p) input."""
    T = y.shape[0]
    x = np.array(x0, dtype=float)
    out = np.empty((T, f.H.shape[0]))
    for t in range(T):
        out[t] = f.H @ x + f.K @ y[t]
        x = f.F @ x + f.G @ y[t]
    return out


def _simulate_trial(config: SimulationConfig, setups: dict, trial: int):
    pm = build_traffic_model(config.T_s, config.sigma1, config.sigma2, config.n_participants)
    sys, L = pm.system, pm.L
    n, T = config.n_participants, config.horizon
    rng = _rng(config.seed, trial, 0)
    X = np.empty((n, 2))
    X[:, 0] = config.initial_position_std * rng.standard_normal(n)
    X[:, 1] = from_kmh(config.mean_initial_velocity
                       + config.initial_velocity_std * rng.standard_normal(n))
    W = rng.standard_normal((T, n, sys.n_inputs))
    z = np.empty((T, L.shape[0]))
    ybar = np.empty((T, sys.n_outputs))
    for t in range(T):
        z[t] = (X @ L.T).sum(axis=0)
        ybar[t] = (X @ sys.C.T + W[t] @ sys.D.T).mean(axis=0)
        X = X @ sys.A.T + W[t] @ sys.B.T
    xh0 = np.array([0.0, float(from_kmh(config.init_velocity))])
    est = {}
    for name in config.schemes:
        if name not in setups:
            continue
        s = setups[name]
        srng = _rng(config.seed, trial, _STREAM[name])
        y = ybar
        if s.input_noise_std > 0:
            v = srng.standard_normal((T, n, sys.n_outputs))
            y = ybar + s.input_noise_std * v.mean(axis=1)
        zh = _run_filter(s.aggregate, y, xh0)
        if s.output_noise_std > 0:
            zh = zh + s.output_noise_std * srng.standard_normal(zh.shape)
        est[name] = to_kmh(zh[:, 0])
    return to_kmh(z[:, 0]), est


def _steady_stats(z, zh, start):
    """RMSE over ``[start, T)`` and its delta-method standard error."""
    per_trial = np.mean((zh[:, start:] - z[:, start:]) ** 2, axis=1)
    k = per_trial.size
    mse = float(np.mean(per_trial))
    se_mse = float(np.std(per_trial, ddof=1) / math.sqrt(k)) if k > 1 else math.nan
    rmse = math.sqrt(mse)
    se = se_mse / (2.0 * rmse) if rmse > 0 else 0.0
    return {"rmse": rmse, "stderr": se, "mse": mse, "mse_stderr": se_mse}


def run_simulation(config: SimulationConfig, workers: int = 1, setups=None) -> SimulationResult:
    """Monte Carlo run of every configured scheme with common random numbers."""
    errors = {}
    if setups is None:
        setups, errors = build_plans(config)
    trials = range(config.trials)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(lambda k: _simulate_trial(config, setups, k), trials))
    else:
        outs = [_simulate_trial(config, setups, k) for k in trials]
    z = np.stack([o[0] for o in outs])
    est = {name: np.stack([o[1][name] for o in outs])
           for name in config.schemes if name in setups}
    result = SimulationResult(config, z, est, setups, errors)
    start = config.horizon // 2
    for name, zh in est.items():
        st = _steady_stats(z, zh, start)
        plan = setups[name].plan
        st["predicted_mse"] = plan.predicted_mse * KMH_PER_MS ** 2
        st["predicted_rmse"] = math.sqrt(st["predicted_mse"])
        n = config.n_participants
        # gain of the shared filter from the fleet-average position to the estimate
        st["gamma"] = n * max(plan.gamma) if plan.gamma else None
        st["gamma_filter"] = n * max(plan.gamma_filter) if plan.gamma_filter else None
        st["kappa"] = plan.kappa
        result.stats[name] = st
    return result


def convergence_report(result: SimulationResult, window: int = 20, factor: float = 2.0):
    """Settling time per scheme.

    For each trial, the settling time is the first step ``t`` such that
    ``|zh - z| < factor * RMSE`` on all of ``t, ..., t + window - 1``.
    Trials with no such step inside the horizon are censored and count as
    ``horizon``. The reported value is the median over trials, ``None``
    when that median is censored.
    """
    out = {}
    T = result.config.horizon
    for name, zh in result.estimates.items():
        thr = factor * result.stats[name]["rmse"]
        below = (np.abs(zh - result.z_true) < thr).astype(int)
        times = np.full(below.shape[0], T)
        if T >= window:
            csum = np.concatenate([np.zeros((below.shape[0], 1), int),
                                   np.cumsum(below, axis=1)], axis=1)
            runs = csum[:, window:] - csum[:, :-window]
            for k in range(below.shape[0]):
                hit = np.flatnonzero(runs[k] == window)
                if hit.size:
                    times[k] = hit[0]
        med = float(np.median(times))
        out[name] = {"settling_time": None if med >= T else med,
                     "censored": med >= T,
                     "censored_trials": int(np.sum(times >= T)),
                     "per_trial": times.tolist()}
    return out


# ---------------------------------------------------------------------------
# output files

def write_traces_csv(result: SimulationResult, fh) -> None:
    """Columns: ``trial, t, z_true`` then one column per scheme (km/h)."""
    names = result.schemes
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["trial", "t", "z_true", *names])
    cols = [result.z_true] + [result.estimates[s] for s in names]
    for k in range(result.z_true.shape[0]):
        for t in range(result.z_true.shape[1]):
            w.writerow([k, t, *("%.17g" % c[k, t] for c in cols)])


def summary_dict(result: SimulationResult, convergence=None) -> dict:
    conv = convergence_report(result) if convergence is None else convergence
    schemes = {}
    for name in result.config.schemes:
        if name in result.errors:
            schemes[name] = {"error": result.errors[name]}
            continue
        st = result.stats[name]
        s = result.setups[name]
        schemes[name] = {
            "rmse": st["rmse"],
            "stderr": st["stderr"] if math.isfinite(st["stderr"]) else None,
            "settling_time": conv[name]["settling_time"],
            "settling_censored": conv[name]["censored"],
            "predicted_mse": st["predicted_mse"],
            "predicted_rmse": st["predicted_rmse"],
            "gamma": st["gamma"],
            "gamma_filter": st["gamma_filter"],
            "kappa": st["kappa"],
            "input_noise_std": s.input_noise_std,
            "output_noise_std": s.output_noise_std,
        }
    return {"units": "km/h", "config": result.config.to_dict(), "schemes": schemes}


def write_summary_json(result: SimulationResult, fh, convergence=None) -> None:
    json.dump(summary_dict(result, convergence), fh, indent=2, sort_keys=True, allow_nan=False)
    fh.write("\n")


def traces_csv_text(result: SimulationResult) -> str:
    buf = io.StringIO()
    write_traces_csv(result, buf)
    return buf.getvalue()
