"""``te-meanvar`` command line.

Subcommands: ``solve``, ``frontier``, ``simulate``, ``study``, ``backtest``,
``verify``.  Settings resolve as flags > ``--config`` JSON > defaults, and
every artifact carries the resolved settings in its metadata.

Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import backtest as bt
from .control import ClassicalStrategy, PenalizedStrategy, ReferenceStrategy
from .errors import NumericalFault, TEMeanVarError, ValidationError
from .expansion import efficient_frontier_expanded, expansion_terms, terminal_moments
from .market import (
    PenaltySpec,
    ReferenceKind,
    build_market,
    covariance_from_vols_corr,
    market_from_covariance,
    reference_weights,
    risk_aversion_for_target,
    study_market,
)
from .montecarlo import (
    MisspecConfig,
    SimConfig,
    daily_returns,
    misspecification_study,
    simulate_wealth,
    terminal_moments_mc,
    verify_weak_optimality,
)
from .riccati import TimeGrid, solve_riccati

COMMANDS = ("solve", "frontier", "simulate", "study", "backtest", "verify")

DEFAULTS = {
    "model": None,
    "reference": "equal-weights",
    "mu": None,
    "gamma": None,
    "gamma_over_mu": 0.01,
    "target_return": 0.20,
    "T": 1.0,
    "x0": 1.0,
    "steps": 2520,
    "paths": 10_000,
    "scenarios": 2000,
    "epsilons": "0:1:0.1",
    "seed": 0,
    "out": None,
    "json_errors": False,
    "threads": None,
    "prices": None,
    "synthetic_days": 1090,
    "strategy": "penalized",
    "perturb": "covariance",
    "psd_repair": "eigen-clip",
    "antithetic": False,
}
# backtest calibrates to a 25% target and compares gamma = mu and mu/100
COMMAND_DEFAULTS = {"backtest": {"target_return": 0.25, "gamma_over_mu": [1.0, 0.01]}}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"error: {message}")


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON file with settings (flags override it)")
    common.add_argument("--model", help="JSON market file: b with Sigma, sigma, or vols+corr")
    common.add_argument("--reference", choices=[k.value for k in ReferenceKind])
    common.add_argument("--mu", type=float)
    common.add_argument("--gamma", type=float)
    common.add_argument("--gamma-over-mu", type=float, nargs="+")
    common.add_argument("--target-return", type=float)
    common.add_argument("--T", type=float)
    common.add_argument("--x0", type=float)
    common.add_argument("--steps", type=int, help="Riccati grid size")
    common.add_argument("--paths", type=int)
    common.add_argument("--scenarios", type=int)
    common.add_argument("--epsilons", help="grid A:B:STEP")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output file (stdout when absent)")
    common.add_argument("--json-errors", action="store_true")
    common.add_argument("--threads", type=int)
    common.add_argument("--prices", help="price CSV for backtest")
    common.add_argument("--synthetic-days", type=int, help="backtest on GBM prices of this length")
    common.add_argument("--strategy", choices=["penalized", "classical", "reference"])
    common.add_argument("--perturb", choices=["covariance", "volatility"])
    common.add_argument("--psd-repair", choices=["eigen-clip", "reject"])
    common.add_argument("--antithetic", action="store_true")

    parser = _Parser(prog="te-meanvar", description="Mean-variance allocation with tracking-error penalty")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "solve": "solve the Riccati system and write its grid as CSV",
        "frontier": "first-order frontier coefficients and a gamma sweep",
        "simulate": "simulate wealth under one strategy",
        "study": "misspecification study (JSON + CSV)",
        "backtest": "daily backtest on a price CSV or synthetic prices",
        "verify": "Monte Carlo check of the value function",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], argument_default=argparse.SUPPRESS)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, the optional config file and explicit flags."""
    given = vars(args).copy()
    command = given.pop("command")
    cfg = dict(DEFAULTS)
    cfg.update(COMMAND_DEFAULTS.get(command, {}))
    path = given.pop("config", None)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise ValidationError("config file must hold a JSON object")
        for key, value in file_cfg.items():
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise ValidationError(f"unknown config key {key!r}")
            cfg[key] = value
    cfg.update(given)
    if cfg["threads"] is None and os.environ.get("TE_MEANVAR_THREADS"):
        cfg["threads"] = int(os.environ["TE_MEANVAR_THREADS"])
    cfg["command"] = command
    return cfg


def parse_epsilons(text) -> list:
    """``"A:B:STEP"`` to an inclusive grid; a list passes through."""
    if isinstance(text, (list, tuple)):
        return [float(e) for e in text]
    try:
        a, b, step = (float(p) for p in str(text).split(":"))
    except ValueError:
        raise ValidationError(f"epsilon grid must be A:B:STEP, got {text!r}") from None
    if not step > 0 or b < a:
        raise ValidationError("epsilon grid needs STEP > 0 and B >= A")
    n = int(math.floor((b - a) / step + 1e-9))
    return [round(a + i * step, 12) for i in range(n + 1)]


def load_model(path):
    """Market from JSON: ``b`` plus ``Sigma``, ``sigma`` or ``vols`` and ``corr``."""
    if path is None:
        return study_market()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read model {path}: {exc}") from None
    if not isinstance(doc, dict) or "b" not in doc:
        raise ValidationError("model file needs a drift vector 'b'")
    if "Sigma" in doc:
        return market_from_covariance(doc["b"], doc["Sigma"])
    if "sigma" in doc:
        return build_market(doc["b"], doc["sigma"])
    if "vols" in doc and "corr" in doc:
        return market_from_covariance(doc["b"], covariance_from_vols_corr(doc["vols"], doc["corr"]))
    raise ValidationError("model file needs 'Sigma', 'sigma' or 'vols' and 'corr'")


def _positive(cfg, *names):
    for n in names:
        v = cfg[n]
        if v is None or not v > 0:
            raise ValidationError(f"{n} must be positive")


def _preferences(cfg, model):
    """``(mu, gamma, w_r)`` from explicit values or the calibration policy."""
    _positive(cfg, "T", "x0")
    mu = cfg["mu"]
    if mu is None:
        mu = risk_aversion_for_target(model, cfg["x0"], cfg["target_return"], cfg["T"])
    gamma = cfg["gamma"]
    if gamma is None:
        ratio = cfg["gamma_over_mu"]
        ratio = ratio[0] if isinstance(ratio, (list, tuple)) else ratio
        gamma = ratio * mu
    w_r = reference_weights(cfg["reference"], model)
    return float(mu), float(gamma), w_r


def _emit(cfg, text, suffix=None):
    out = cfg["out"]
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    if suffix is not None:
        path = path.with_suffix(suffix)
    path.write_text(text, encoding="utf-8")


def _meta_line(cfg, extra=None) -> str:
    meta = {k: v for k, v in cfg.items() if k != "json_errors"}
    if extra:
        meta.update(extra)
    return "# " + json.dumps(meta, sort_keys=True, default=float) + "\n"


def _fmt(x) -> str:
    return format(float(x), ".17g")


def cmd_solve(cfg, model):
    mu, gamma, w_r = _preferences(cfg, model)
    spec = PenaltySpec.scalar(gamma, w_r, mu, T=cfg["T"], x0=cfg["x0"])
    sol = solve_riccati(model, spec, TimeGrid(cfg["steps"], cfg["T"]))
    rows = ["t,K,Lambda,Y,R,C0t,H"]
    for k in range(sol.grid.n_steps + 1):
        vals = (sol.t[k], sol.K[k], sol.Lambda[k], sol.Y[k], sol.R[k], sol.C_origin[k], sol.H[k])
        rows.append(",".join(_fmt(v) for v in vals))
    _emit(cfg, _meta_line(cfg, {"mu_resolved": mu, "gamma_resolved": gamma}) + "\n".join(rows) + "\n")


def cmd_frontier(cfg, model):
    mu, gamma, w_r = _preferences(cfg, model)
    T, x0 = cfg["T"], cfg["x0"]
    steps = cfg["steps"] + (cfg["steps"] % 2)
    grid = TimeGrid(steps, T)
    terms = expansion_terms(model, PenaltySpec.scalar(0.0, w_r, mu, T=T, x0=x0), grid)
    var0, var1 = efficient_frontier_expanded(terms)
    rows = ["gamma_over_mu,gamma,mean_XT,var_XT,var_first_order"]
    for ratio in (0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0):
        g = ratio * mu
        sol = solve_riccati(model, PenaltySpec.scalar(g, w_r, mu, T=T, x0=x0), grid)
        m, v = terminal_moments(sol)
        rows.append(",".join(_fmt(x) for x in (ratio, g, m, v, var0 + g * var1)))
    extra = {"mu_resolved": mu, "var0": var0, "var1": var1}
    _emit(cfg, _meta_line(cfg, extra) + "\n".join(rows) + "\n")


def _strategy(cfg, model):
    mu, gamma, w_r = _preferences(cfg, model)
    T, x0 = cfg["T"], cfg["x0"]
    kind = cfg["strategy"]
    if kind == "classical":
        return ClassicalStrategy(model, mu, T, x0), mu, gamma
    if kind == "reference":
        return ReferenceStrategy(w_r, T), mu, gamma
    spec = PenaltySpec.scalar(gamma, w_r, mu, T=T, x0=x0)
    return PenalizedStrategy(solve_riccati(model, spec, TimeGrid(cfg["steps"], T))), mu, gamma


def cmd_simulate(cfg, model):
    strat, mu, gamma = _strategy(cfg, model)
    sim = SimConfig(cfg["paths"], 252, cfg["T"], cfg["seed"], bool(cfg["antithetic"]))
    W = simulate_wealth(model, strat, sim, x0=cfg["x0"])
    mean, se, var, se_var = terminal_moments_mc(W[:, -1], sim.antithetic)
    R = daily_returns(W)
    s = R.std(axis=1, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sh = np.where(s > 0, R.mean(axis=1) / s, np.nan)
    sh = sh[np.isfinite(sh)]
    doc = {
        "metadata": {**{k: v for k, v in cfg.items() if k != "json_errors"}, "mu_resolved": mu, "gamma_resolved": gamma},
        "mean_XT": mean,
        "se_mean_XT": se,
        "var_XT": var,
        "se_var_XT": se_var,
        "quantiles_XT": dict(zip(["5%", "50%", "95%"], np.quantile(W[:, -1], [0.05, 0.5, 0.95]).tolist())),
        "mean_sharpe": float(sh.mean()) if sh.size else None,
        "se_sharpe": float(sh.std(ddof=1) / math.sqrt(sh.size)) if sh.size > 1 else None,
    }
    _emit(cfg, json.dumps(doc, indent=2) + "\n")


def cmd_study(cfg, model):
    _positive(cfg, "T", "x0")
    mcfg = MisspecConfig(
        model,
        parse_epsilons(cfg["epsilons"]),
        cfg["scenarios"],
        cfg["seed"],
        cfg["psd_repair"],
        cfg["perturb"],
    )
    sim = SimConfig(2, 252, cfg["T"], cfg["seed"])
    mu = cfg["mu"] if cfg["mu"] is not None else (
        lambda m, x0, T: risk_aversion_for_target(m, x0, cfg["target_return"], T)
    )
    if cfg["gamma"] is not None:
        gamma_policy = cfg["gamma"]
    else:
        ratio = cfg["gamma_over_mu"]
        ratio = ratio[0] if isinstance(ratio, (list, tuple)) else ratio
        gamma_policy = lambda m: ratio * m  # noqa: E731
    res = misspecification_study(mcfg, sim, cfg["reference"], mu, gamma_policy, cfg["x0"], cfg["threads"])
    res.metadata["config"] = {k: v for k, v in cfg.items() if k != "json_errors"}
    if cfg["out"] is None:
        sys.stdout.write(res.to_json() + "\n")
        return
    _emit(cfg, res.to_json() + "\n", ".json")
    _emit(cfg, _meta_line(cfg) + res.to_csv(), ".csv")


def cmd_backtest(cfg, model):
    if cfg["prices"]:
        series = bt.load_prices(cfg["prices"])
    else:
        series = bt.synthetic_prices(model, cfg["synthetic_days"], seed=cfg["seed"])
    ratios = cfg["gamma_over_mu"]
    ratios = ratios if isinstance(ratios, (list, tuple)) else [ratios]
    _positive(cfg, "x0")
    rep = bt.run_backtest(series, cfg["reference"], cfg["target_return"], ratios, cfg["x0"])
    extra = {"sharpe": rep.sharpe, "estimated": {k: rep.metadata.get(k) for k in ("b", "Sigma", "mu", "gamma", "T")}}
    _emit(cfg, _meta_line(cfg, extra) + bt.report_to_csv(rep))


def cmd_verify(cfg, model):
    mu, gamma, w_r = _preferences(cfg, model)
    T, x0 = cfg["T"], cfg["x0"]
    spec = PenaltySpec.scalar(gamma, w_r, mu, T=T, x0=x0)
    sol = solve_riccati(model, spec, TimeGrid(cfg["steps"], T))
    sim = SimConfig(cfg["paths"], 252, T, cfg["seed"], bool(cfg["antithetic"]))
    rep = verify_weak_optimality(model, spec, sol, sim)
    text = rep.table() + "\n"
    text += f"optimal terminal check: {'pass' if rep.optimal.terminal_matches_value else 'fail'}\n"
    sys.stdout.write(text)
    if cfg["out"] is not None:
        doc = {
            "metadata": {k: v for k, v in cfg.items() if k != "json_errors"},
            "curves": [
                {"name": c.name, "t": c.times.tolist(), "mean": c.mean.tolist(), "se": c.se.tolist(), "value0": c.value0}
                for c in [rep.optimal] + rep.perturbed
            ],
            "passed": rep.passed,
        }
        _emit(cfg, json.dumps(doc, indent=2) + "\n")


HANDLERS = {
    "solve": cmd_solve,
    "frontier": cmd_frontier,
    "simulate": cmd_simulate,
    "study": cmd_study,
    "backtest": cmd_backtest,
    "verify": cmd_verify,
}


def _report(exc, code, json_errors):
    if json_errors:
        doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        sys.stderr.write(json.dumps(doc) + "\n")
    else:
        sys.stderr.write(f"te-meanvar: {exc}\n")
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    json_errors = "--json-errors" in argv
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        return _report(exc, 1, json_errors)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        model = load_model(cfg["model"])
        HANDLERS[cfg["command"]](cfg, model)
    except (ValidationError, ValueError) as exc:
        return _report(exc, 1, json_errors)
    except (NumericalFault, ArithmeticError) as exc:
        return _report(exc, 2, json_errors)
    except TEMeanVarError as exc:
        return _report(exc, 1, json_errors)
    except OSError as exc:
        return _report(exc, 1, json_errors)
    return 0


if __name__ == "__main__":
    sys.exit(main())
