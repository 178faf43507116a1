"""Command-line entry point.

Every subcommand accepts ``--config FILE`` (a JSON object whose keys match
the long option names) and ``--out DIR``; explicit flags override the
config file. Results are printed and, with ``--out``, written to
``summary.json`` (plus ``traces.csv`` for ``simulate``).

Exit status: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import control, synthesis
from .control import StateSpaceSystem
from .exceptions import ConvergenceError, DimensionError, DomainError
from .kalman import ParticipantModel, design_kalman
from .privacy import AdjacencyPolicy, PrivacyBudget, gaussian_sigma, verify_dp_scalar
from .sdp import SdpInfeasible, SdpNumericalError
from .traffic import (ConfigError, SimulationConfig, field_line, convergence_report,
                      parse_json, run_simulation, write_summary_json, write_traces_csv)

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


def _load_config(path):
    if path is None:
        return {}, None
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    data = parse_json(text)
    if not isinstance(data, dict):
        raise ConfigError("top level must be a JSON object", line=1)
    return data, text


def _merged(args, keys, defaults=None):
    """Config-file values overridden by flags that were given explicitly."""
    data, text = _load_config(args.config)
    out = dict(defaults or {})
    for k in keys:
        if k in data:
            out[k] = data[k]
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    extra = set(data) - set(keys)
    if extra:
        key = sorted(extra)[0]
        raise ConfigError("unknown field", key, field_line(text, key))
    return out, text


def _need(cfg, *keys):
    for k in keys:
        if k not in cfg or cfg[k] is None:
            raise ConfigError("required", k)


def _number(cfg, key):
    v = cfg[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"expected a number, got {v!r}", key)
    return float(v)


def _matrix(cfg, key):
    try:
        M = np.atleast_2d(np.asarray(cfg[key], dtype=float))
    except (TypeError, ValueError):
        raise ConfigError("expected a matrix (list of rows)", key) from None
    if M.ndim != 2:
        raise ConfigError("expected a matrix (list of rows)", key)
    return M


def _system(cfg, key="system"):
    s = cfg.get(key)
    if not isinstance(s, dict):
        raise ConfigError("expected an object with A, B, C, D", key)
    try:
        return StateSpaceSystem(*(_matrix(s, k) for k in "ABCD"))
    except KeyError as exc:
        raise ConfigError("missing matrix", f"{key}.{exc.args[0]}") from None


def _emit(summary, out):
    print(json.dumps(summary, indent=2, sort_keys=True))
    if out is not None:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _budget(cfg):
    _need(cfg, "epsilon", "delta")
    return PrivacyBudget(_number(cfg, "epsilon"), _number(cfg, "delta"))


# ---------------------------------------------------------------------------

def cmd_calibrate(args):
    cfg, _ = _merged(args, ["epsilon", "delta", "sensitivity"], {"sensitivity": 1.0})
    b = _budget(cfg)
    s = _number(cfg, "sensitivity")
    _emit({"kappa": b.kappa, "sigma": gaussian_sigma(s, b), "epsilon": b.epsilon,
           "delta": b.delta, "sensitivity": s}, args.out)


def cmd_verify_dp(args):
    cfg, _ = _merged(args, ["epsilon", "delta", "sensitivity", "sigma"], {"sensitivity": 1.0})
    b = _budget(cfg)
    s = _number(cfg, "sensitivity")
    sigma = _number(cfg, "sigma") if cfg.get("sigma") is not None else gaussian_sigma(s, b)
    margin = verify_dp_scalar(sigma, s, b)
    _emit({"sigma": sigma, "sensitivity": s, "epsilon": b.epsilon, "delta": b.delta,
           "margin": margin, "private": margin >= 0}, args.out)


def cmd_norms(args):
    cfg, _ = _merged(args, ["system", "lmi"])
    sys_ = _system(cfg)
    out = {"spectral_radius": control.spectral_radius(sys_.A) if sys_.n_states else 0.0}
    if sys_.n_states and out["spectral_radius"] >= 1.0:
        out.update(h2=None, hinf=None, stable=False)
    else:
        out.update(stable=True, h2=control.h2_norm(sys_), hinf=control.hinf_norm(sys_))
        if cfg.get("lmi"):
            out["hinf_lmi"] = synthesis.hinf_norm_lmi(sys_)
    _emit(out, args.out)


def cmd_kalman(args):
    cfg, _ = _merged(args, ["system", "L", "extra_meas_noise_std", "convention"],
                     {"extra_meas_noise_std": 0.0, "convention": "predictor"})
    sys_ = _system(cfg)
    _need(cfg, "L")
    pm = ParticipantModel(sys_, _matrix(cfg, "L"))
    if cfg["convention"] not in ("predictor", "filter"):
        raise ConfigError("expected 'predictor' or 'filter'", "convention")
    filters, mse = design_kalman([pm], [_number(cfg, "extra_meas_noise_std")],
                                 cfg["convention"])
    f = filters[0]
    _emit({"predicted_mse": mse, "F": f.F.tolist(), "G": f.G.tolist(), "H": f.H.tolist(),
           "K": f.K.tolist(), "convention": cfg["convention"]}, args.out)


def cmd_synth(args):
    keys = ["system", "L", "n_participants", "rho", "selection", "epsilon", "delta",
            "kind", "lambda_cap", "strictly_causal"]
    cfg, _ = _merged(args, keys, {"n_participants": 1, "selection": [0], "kind": "auto",
                                  "lambda_cap": None, "strictly_causal": False})
    sys_ = _system(cfg)
    _need(cfg, "L", "rho")
    L = _matrix(cfg, "L")
    b = _budget(cfg)
    n = cfg["n_participants"]
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise ConfigError("expected a positive integer", "n_participants")
    policy = AdjacencyPolicy.uniform(n, _number(cfg, "rho"), cfg["selection"])
    kind = cfg["kind"]
    if kind == "auto":
        kind = "stable" if control.spectral_radius(sys_.A) < 1.0 else "unstable"
    if kind not in ("stable", "unstable"):
        raise ConfigError("expected 'auto', 'stable' or 'unstable'", "kind")
    cap = cfg["lambda_cap"]
    sc = bool(cfg["strictly_causal"])
    if cap == "sweep":
        res, _ = synthesis.sweep_lambda_cap(kind, sys_, L, policy, b, strictly_causal=sc)
    else:
        if cap is not None:
            cap = _number(cfg, "lambda_cap")
        if kind == "stable":
            res = synthesis.synth_stable(sys_, L, policy, b, lambda_cap=cap, strictly_causal=sc)
        else:
            res = synthesis.synth_unstable(sys_, L, policy, b, lambda_cap=cap)
    v = res.verified
    f = res.filter
    _emit({"kind": res.kind, "mu": res.mu_total, "lambda": res.lam,
           "objective": res.objective,
           "predicted_mse": synthesis.predicted_output_mse(res, b),
           "verification": {"passed": v.passed, "h2_sq": sum(v.h2_sq),
                            "min_h2_slack": min(v.h2_slack),
                            "min_hinf_slack": min(v.hinf_slack),
                            "filter_spectral_radius": max(v.spectral_radius)},
           "filter": {"F": f.F.tolist(), "G": f.G.tolist(), "H": f.H.tolist(),
                      "K": f.K.tolist()}}, args.out)
    if not v.passed:
        raise SdpNumericalError("independent verification failed", v)


def cmd_simulate(args):
    data, text = _load_config(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.trials is not None:
        data["trials"] = args.trials
    if args.horizon is not None:
        data["horizon"] = args.horizon
    cfg = SimulationConfig.from_dict(data, text)
    result = run_simulation(cfg, workers=args.workers)
    conv = convergence_report(result)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "traces.csv", "w", newline="") as fh:
        write_traces_csv(result, fh)
    with open(out / "summary.json", "w") as fh:
        write_summary_json(result, fh, conv)
    for name in cfg.schemes:
        if name in result.errors:
            print(f"{name:20s} ERROR {result.errors[name]}")
            continue
        st = result.stats[name]
        t = conv[name]["settling_time"]
        print(f"{name:20s} rmse {st['rmse']:8.4f} +- {st['stderr']:.4f} km/h  "
              f"predicted {st['predicted_rmse']:8.4f}  settling "
              f"{'censored' if t is None else f'{t:g}'}")
    if result.errors:
        return EXIT_NUMERICAL
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="dpfilter",
                                description="Differentially private filtering toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--out", help="output directory")
        return sp

    sp = common(sub.add_parser("calibrate", help="Gaussian noise multiplier and std"))
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--sensitivity", type=float)
    sp.set_defaults(func=cmd_calibrate)

    sp = common(sub.add_parser("verify-dp", help="half-line DP margin of a scalar mechanism"))
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--sensitivity", type=float)
    sp.add_argument("--sigma", type=float, help="defaults to the calibrated value")
    sp.set_defaults(func=cmd_verify_dp)

    sp = common(sub.add_parser("norms", help="H2 and H-infinity norms of a system"))
    sp.add_argument("--lmi", action="store_const", const=True,
                    help="also certify the H-infinity norm by LMI bisection")
    sp.set_defaults(func=cmd_norms)

    sp = common(sub.add_parser("kalman", help="steady-state Kalman design"))
    sp.add_argument("--extra-meas-noise-std", dest="extra_meas_noise_std", type=float)
    sp.add_argument("--convention", choices=["predictor", "filter"])
    sp.set_defaults(func=cmd_kalman)

    sp = common(sub.add_parser("synth", help="privacy-aware filter synthesis"))
    sp.add_argument("--kind", choices=["auto", "stable", "unstable"])
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--rho", type=float)
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("simulate", help="fleet average-velocity Monte Carlo"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code = args.func(args)
    except (ConfigError, DimensionError, DomainError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SdpInfeasible, SdpNumericalError, ConvergenceError, np.linalg.LinAlgError,
            ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
