"""Monte Carlo simulation of wealth, the misspecification study and the
weak-optimality check of the value function.

All strategies are affine in wealth, so a simulation step for many paths is
``alpha = P[k] + X Q[k]`` followed by the Euler update with exact Gaussian
increments.  Per-row arithmetic is written with explicit elementwise
products and short reductions so results do not depend on how rows are
batched (thread count, chunk size).
"""

from __future__ import annotations

import enum
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .control import ClassicalStrategy, PenalizedStrategy, ReferenceStrategy, Strategy
from .errors import NonFinitePath, OutOfHorizon, PsdRepairFailure, ValidationError, ZeroVolatility
from .market import MarketModel, PenaltySpec, ReferenceKind, reference_weights, risk_aversion_for_target
from .riccati import RiccatiSolution, TimeGrid, solve_riccati

PSD_CLIP = 1e-8


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings; ``steps = round(n_steps_per_year * T)``."""

    n_paths: int = 10_000
    n_steps_per_year: int = 252
    T: float = 1.0
    seed: int = 0
    antithetic: bool = False

    def __post_init__(self):
        if int(self.n_paths) != self.n_paths or self.n_paths < 2:
            raise ValidationError("n_paths must be an integer >= 2")
        if int(self.n_steps_per_year) != self.n_steps_per_year or self.n_steps_per_year < 1:
            raise ValidationError("n_steps_per_year must be a positive integer")
        if not self.T > 0:
            raise ValidationError("T must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.n_steps_per_year * self.T)))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.T
        return t


class PsdRepair(enum.Enum):
    EIGEN_CLIP = "eigen-clip"
    REJECT = "reject"


class Perturbation(enum.Enum):
    COVARIANCE = "covariance"
    VOLATILITY = "volatility"


@dataclass(frozen=True, eq=False)
class MisspecConfig:
    """Noise model ``b = b0 + eps N_b`` and ``Sigma = Sigma0 + eps sym(N_S)``.

    With ``perturb = VOLATILITY`` the factor is perturbed instead,
    ``sigma = sigma0 + eps N_S``.
    """

    model0: MarketModel
    epsilon_grid: tuple = tuple(np.round(np.arange(11) * 0.1, 10))
    n_scenarios: int = 2000
    noise_seed: int = 0
    psd_repair: PsdRepair = PsdRepair.EIGEN_CLIP
    perturb: Perturbation = Perturbation.COVARIANCE

    def __post_init__(self):
        eps = np.asarray(self.epsilon_grid, dtype=float).ravel()
        if eps.size == 0 or np.any(eps < 0) or np.any(eps > 1) or not np.all(np.isfinite(eps)):
            raise ValidationError("epsilon values must lie in [0, 1]")
        object.__setattr__(self, "epsilon_grid", tuple(float(e) for e in eps))
        if int(self.n_scenarios) != self.n_scenarios or self.n_scenarios < 2:
            raise ValidationError("n_scenarios must be an integer >= 2")
        object.__setattr__(self, "psd_repair", PsdRepair(self.psd_repair))
        object.__setattr__(self, "perturb", Perturbation(self.perturb))


# ---------------------------------------------------------------- simulation


def _step(X, P, Q, b, sig, Z, dt, sqdt):
    """One Euler step for every row; returns ``(X_next, alpha)``.

    Overflow is left to :func:`_check_finite`.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        alpha = P + X[:, None] * Q
        if sig.ndim == 2:
            # one market for all rows
            return X + (alpha @ b) * dt + ((alpha @ sig) * Z).sum(axis=-1) * sqdt, alpha
        drift = (alpha * b).sum(axis=-1)
        load = (alpha[:, :, None] * sig).sum(axis=1)
        shock = (load * Z).sum(axis=-1)
        return X + drift * dt + shock * sqdt, alpha


def _check_finite(X, k):
    bad = ~np.isfinite(X)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise NonFinitePath(f"wealth became non-finite at step {k}", path_index=idx)


def _step_normals(rng, n, d, antithetic):
    if not antithetic:
        return rng.standard_normal((n, d))
    half = (n + 1) // 2
    z = rng.standard_normal((half, d))
    return np.concatenate([z, -z])[:n]


def _strategy_horizon(strategy: Strategy, T):
    if getattr(strategy, "T", np.inf) < T * (1 - 1e-12):
        raise OutOfHorizon(f"strategy horizon {strategy.T} shorter than simulation horizon {T}")


def _wealth_steps(model_real: MarketModel, strategy: Strategy, cfg: SimConfig, x0):
    """Yield ``(k, X_k, alpha_{k-1})`` for ``k = 0..n_steps``."""
    _strategy_horizon(strategy, cfg.T)
    d = model_real.n_assets
    P, Q = strategy.coefficient_path(cfg.times[:-1])
    if P.shape[1] != d:
        raise ValidationError("strategy and market dimensions differ")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(cfg.seed))))
    sig = np.asarray(model_real.sigma, dtype=float)
    dt, sqdt = cfg.dt, math.sqrt(cfg.dt)
    X = np.full(cfg.n_paths, float(x0))
    yield 0, X, None
    for k in range(cfg.n_steps):
        Z = _step_normals(rng, cfg.n_paths, d, cfg.antithetic)
        X, alpha = _step(X, P[k], Q[k], model_real.b, sig, Z, dt, sqdt)
        _check_finite(X, k + 1)
        yield k + 1, X, alpha


def _initial_wealth(strategy, x0):
    return float(getattr(strategy, "x0", 1.0) if x0 is None else x0)


def simulate_wealth(model_real: MarketModel, strategy: Strategy, cfg: SimConfig, x0=None) -> np.ndarray:
    """Wealth paths of shape ``(n_paths, n_steps + 1)``.

    ``X_{k+1} = X_k + alpha_k'b dt + alpha_k' sigma sqrt(dt) Z_k`` with
    ``alpha_k = strategy(t_k, X_k)``.  The strategy may be built on a model
    other than ``model_real``.  ``x0`` defaults to the strategy's own
    initial wealth (or 1).  With ``antithetic`` set, path ``i + n/2`` uses
    the negated draws of path ``i``.
    """
    out = np.empty((cfg.n_paths, cfg.n_steps + 1))
    for k, X, _ in _wealth_steps(model_real, strategy, cfg, _initial_wealth(strategy, x0)):
        out[:, k] = X
    return out


def terminal_wealth(model_real: MarketModel, strategy: Strategy, cfg: SimConfig, x0=None) -> np.ndarray:
    """``X_T`` for every path, same draws as :func:`simulate_wealth`."""
    X = None
    for _, X, _ in _wealth_steps(model_real, strategy, cfg, _initial_wealth(strategy, x0)):
        pass
    return X.copy()


def terminal_moments_mc(X_T, antithetic=False):
    """``(mean, se_mean, var, se_var)`` of terminal wealth samples.

    For antithetic samples the standard errors use pair averages (mean) and
    pair averages of squared deviations (variance).
    """
    X = np.asarray(X_T, dtype=float)
    mean = float(X.mean())
    dev2 = (X - mean) ** 2
    var = float(X.var(ddof=1))
    a = _pair_means(X, antithetic)
    b = _pair_means(dev2, antithetic)
    return mean, float(a.std(ddof=1) / math.sqrt(a.size)), var, float(b.std(ddof=1) / math.sqrt(b.size))


def daily_returns(wealth) -> np.ndarray:
    """Simple returns ``(X_{k+1} - X_k) / X_k`` along the last axis."""
    W = np.asarray(wealth, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.diff(W, axis=-1) / W[..., :-1]


def _sharpe_rows(R):
    """Row-wise Sharpe; ``nan`` where the standard deviation is zero."""
    R = np.asarray(R, dtype=float)
    m = R.mean(axis=-1)
    s = R.std(axis=-1, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = m / s
    return np.where(s > 0, out, np.nan)


def sharpe(returns) -> float:
    """Unannualized Sharpe ratio ``mean(R) / std(R)`` with divisor ``n - 1``."""
    R = np.asarray(returns, dtype=float).ravel()
    if R.size < 2:
        raise ValidationError("Sharpe ratio needs at least two returns")
    if not np.all(np.isfinite(R)):
        raise ValidationError("returns contain non-finite values")
    s = R.std(ddof=1)
    if not s > 0 or np.all(R == R[0]):
        raise ZeroVolatility("returns have zero standard deviation")
    return float(R.mean() / s)


# ------------------------------------------------------ misspecification study


@dataclass(eq=False)
class StudyResult:
    """Per-scenario Sharpe ratios and terminal wealth for each strategy and epsilon.

    ``sharpe[name]`` and ``terminal[name]`` have shape
    ``(len(epsilons), n_scenarios)``; ``nan`` Sharpe marks a flat path.
    """

    strategies: list
    epsilons: np.ndarray
    sharpe: dict
    terminal: dict
    metadata: dict = field(default_factory=dict)
    paths: dict | None = None

    @property
    def n_scenarios(self) -> int:
        return next(iter(self.sharpe.values())).shape[1]

    def _eps_index(self, eps):
        hit = np.flatnonzero(np.isclose(self.epsilons, eps, rtol=0, atol=1e-12))
        if hit.size == 0:
            raise ValidationError(f"epsilon {eps} not in study grid")
        return int(hit[0])

    @staticmethod
    def _mean_se(x):
        x = x[np.isfinite(x)]
        if x.size < 2:
            return float("nan"), float("nan")
        return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))

    def stats(self, strategy, eps):
        """``{mean_sharpe, se, mean_XT, var_XT, n}`` for one cell."""
        i = self._eps_index(eps)
        s = self.sharpe[strategy][i]
        xt = self.terminal[strategy][i]
        m, se = self._mean_se(s)
        return {
            "mean_sharpe": m,
            "se": se,
            "mean_XT": float(xt.mean()),
            "var_XT": float(xt.var(ddof=1)),
            "n": int(np.isfinite(s).sum()),
        }

    def paired_difference(self, a, b, eps):
        """Mean and standard error of ``Sharpe_a - Sharpe_b`` over scenarios."""
        i = self._eps_index(eps)
        return self._mean_se(self.sharpe[a][i] - self.sharpe[b][i])

    def summary(self) -> dict:
        return {
            name: {repr(float(e)): self.stats(name, e) for e in self.epsilons}
            for name in self.strategies
        }

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, float) and not math.isfinite(v):
                return None
            return v

        doc = {
            "metadata": self.metadata,
            "strategies": list(self.strategies),
            "epsilons": [float(e) for e in self.epsilons],
            "results": clean(self.summary()),
        }
        return json.dumps(doc, indent=2, sort_keys=False)

    def to_csv(self) -> str:
        lines = ["strategy,epsilon,mean_sharpe,se"]
        for name in self.strategies:
            for e in self.epsilons:
                st = self.stats(name, e)
                lines.append(f"{name},{float(e)!r},{st['mean_sharpe']!r},{st['se']!r}")
        return "\n".join(lines) + "\n"


def _scenario_draws(cfg: MisspecConfig, sim: SimConfig, d, start, stop):
    """Noise for scenarios ``start..stop-1``; each scenario owns its streams."""
    nb, ns, z = [], [], []
    for i in range(start, stop):
        par = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.noise_seed, spawn_key=(i, 0))))
        pth = np.random.Generator(np.random.PCG64(np.random.SeedSequence(sim.seed, spawn_key=(i, 1))))
        nb.append(par.standard_normal(d))
        ns.append(par.standard_normal((d, d)))
        z.append(pth.standard_normal((sim.n_steps, d)))
    return np.array(nb), np.array(ns), np.array(z)


def perturbed_markets(cfg: MisspecConfig, eps, Nb, NS):
    """Drifts and diffusion factors of the perturbed markets.

    Returns ``(b, sigma)`` with shapes ``(n, d)`` and ``(n, d, d)``.
    """
    m0 = cfg.model0
    b = m0.b + eps * Nb
    if cfg.perturb is Perturbation.VOLATILITY:
        return b, m0.sigma + eps * NS
    S = m0.Sigma + eps * 0.5 * (NS + np.swapaxes(NS, 1, 2))
    lam, V = np.linalg.eigh(S)
    if cfg.psd_repair is PsdRepair.REJECT:
        if np.any(lam < 0):
            i = int(np.flatnonzero((lam < 0).any(axis=1))[0])
            raise PsdRepairFailure(f"perturbed covariance of scenario {i} is not PSD (eps = {eps})")
    else:
        lam = np.maximum(lam, PSD_CLIP)
    return b, V * np.sqrt(lam)[:, None, :]


def _default_mu(model, x0, T):
    return risk_aversion_for_target(model, x0=x0, target_return=0.20, T=T)


def study_strategies(model0: MarketModel, reference, mu, gamma, T, x0, riccati_steps=None):
    """Classical, penalized and reference strategies built on ``model0``."""
    w_r = reference_weights(reference, model0)
    spec = PenaltySpec.scalar(gamma, w_r, mu, T=T, x0=x0)
    grid = TimeGrid(riccati_steps or 2520, T)
    sol = solve_riccati(model0, spec, grid)
    return {
        "classical": ClassicalStrategy(model0, mu, T, x0),
        "penalized": PenalizedStrategy(sol),
        "reference": ReferenceStrategy(w_r, T),
    }


def _resolve_threads(threads):
    if threads is None:
        env = os.environ.get("TE_MEANVAR_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    threads = int(threads)
    if threads < 1:
        raise ValidationError("threads must be positive")
    return threads


def misspecification_study(
    cfg: MisspecConfig,
    sim: SimConfig,
    reference=ReferenceKind.EQUAL_WEIGHTS,
    mu_policy=None,
    gamma_policy=None,
    x0=1.0,
    threads=None,
    keep_paths=False,
) -> StudyResult:
    """Sharpe ratios of misspecified strategies over noisy markets.

    Strategies are built once from ``cfg.model0``.  Scenario ``i`` draws its
    parameter noise and its market path from its own streams, shared by
    every strategy and every epsilon (common random numbers), and simulates
    one path per strategy.  ``mu_policy(model0, x0, T)`` defaults to the
    20% target calibration; ``gamma_policy(mu)`` defaults to ``mu / 100``.
    """
    model0 = cfg.model0
    T = sim.T
    mu = float(mu_policy(model0, x0, T) if callable(mu_policy) else (mu_policy or _default_mu(model0, x0, T)))
    gamma = float(gamma_policy(mu) if callable(gamma_policy) else (mu / 100.0 if gamma_policy is None else gamma_policy))
    reference = ReferenceKind.parse(reference)
    strategies = study_strategies(model0, reference, mu, gamma, T, x0, riccati_steps=10 * sim.n_steps)
    names = list(strategies)
    t = sim.times[:-1]
    coef = {name: s.coefficient_path(t) for name, s in strategies.items()}
    eps_grid = np.asarray(cfg.epsilon_grid, dtype=float)
    n, d = cfg.n_scenarios, model0.n_assets
    dt, sqdt = sim.dt, math.sqrt(sim.dt)

    sharpe_out = {k: np.empty((eps_grid.size, n)) for k in names}
    term_out = {k: np.empty((eps_grid.size, n)) for k in names}
    paths_out = {k: np.empty((eps_grid.size, n, sim.n_steps + 1)) for k in names} if keep_paths else None

    def run_chunk(start, stop):
        Nb, NS, Z = _scenario_draws(cfg, sim, d, start, stop)
        for j, eps in enumerate(eps_grid):
            b, sig = perturbed_markets(cfg, eps, Nb, NS)
            for name in names:
                P, Q = coef[name]
                X = np.full(stop - start, float(x0))
                W = np.empty((stop - start, sim.n_steps + 1))
                W[:, 0] = X
                for k in range(sim.n_steps):
                    X, _ = _step(X, P[k], Q[k], b, sig, Z[:, k], dt, sqdt)
                    W[:, k + 1] = X
                _check_finite(X, sim.n_steps)
                sharpe_out[name][j, start:stop] = _sharpe_rows(daily_returns(W))
                term_out[name][j, start:stop] = X
                if keep_paths:
                    paths_out[name][j, start:stop] = W

    threads = _resolve_threads(threads)
    chunk = 250
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if threads == 1 or len(bounds) == 1:
        for s, e in bounds:
            run_chunk(s, e)
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(lambda se: run_chunk(*se), bounds))

    meta = {
        "reference": reference.value,
        "mu": mu,
        "gamma": gamma,
        "x0": float(x0),
        "T": T,
        "n_scenarios": n,
        "n_steps": sim.n_steps,
        "noise_seed": int(cfg.noise_seed),
        "path_seed": int(sim.seed),
        "psd_repair": cfg.psd_repair.value,
        "perturb": cfg.perturb.value,
        "epsilons": [float(e) for e in eps_grid],
    }
    return StudyResult(names, eps_grid, sharpe_out, term_out, meta, paths_out)


# ------------------------------------------------------ weak optimality check


@dataclass(eq=False)
class CurveReport:
    """Estimated ``E[V_t]`` at checkpoints for one strategy."""

    name: str
    times: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    increment_se: np.ndarray
    value0: float
    terminal_objective: float
    terminal_objective_se: float
    terminal_samples: np.ndarray = field(repr=False, default=None)

    @property
    def max_deviation_in_se(self) -> float:
        """``max_k |E[V_tk] - V_0| / SE_k`` over checkpoints after 0."""
        dev = np.abs(self.mean[1:] - self.value0)
        return float(np.max(dev / np.maximum(self.se[1:], 1e-300)))

    @property
    def flat(self) -> bool:
        return self.max_deviation_in_se <= 3.0

    @property
    def nondecreasing(self) -> bool:
        return bool(np.all(np.diff(self.mean) >= -3.0 * self.increment_se))

    @property
    def increase_in_se(self) -> float:
        return float((self.mean[-1] - self.value0) / max(self.se[-1], 1e-300))

    @property
    def terminal_matches_value(self) -> bool:
        return abs(self.terminal_objective - self.value0) <= 3.0 * self.terminal_objective_se


@dataclass(eq=False)
class WeakOptimalityReport:
    optimal: CurveReport
    perturbed: list

    def paired_gap(self, curve: CurveReport):
        """Mean and standard error of ``V_T(curve) - V_T(optimal)`` path by path.

        Both curves use the same Gaussian draws, so this estimates the cost
        excess ``J(alpha) - J(alpha*)`` with a much smaller error than the
        two unpaired means.
        """
        D = curve.terminal_samples - self.optimal.terminal_samples
        return float(D.mean()), float(D.std(ddof=1) / math.sqrt(D.size))

    @property
    def passed(self) -> bool:
        return (
            self.optimal.flat
            and self.optimal.terminal_matches_value
            and all(c.nondecreasing for c in self.perturbed)
        )

    def table(self) -> str:
        rows = ["strategy  flat  nondecreasing  max|dev|/SE  (E[V_T]-V_0)/SE  paired-gap/SE"]
        for c in [self.optimal] + list(self.perturbed):
            if c is self.optimal:
                gap = "-"
            else:
                g, gse = self.paired_gap(c)
                gap = f"{g / gse:.3f}" if gse > 0 else "inf"
            rows.append(
                f"{c.name:<9} {'pass' if c.flat else 'fail':<5} "
                f"{'pass' if c.nondecreasing else 'fail':<14} "
                f"{c.max_deviation_in_se:11.3f} {c.increase_in_se:16.3f} {gap:>14}"
            )
        return "\n".join(rows)


def _pair_means(v, antithetic):
    """Collapse antithetic pairs so standard errors use independent samples."""
    if not antithetic:
        return v
    half = (v.shape[0] + 1) // 2
    if v.shape[0] != 2 * half:
        return v
    return 0.5 * (v[:half] + v[half:])


def _value_curve(name, sol: RiccatiSolution, model: MarketModel, strategy: Strategy, sim: SimConfig, n_checkpoints):
    spec = sol.spec
    t = sim.times
    m = sim.n_steps
    marks = np.unique(np.round(np.linspace(0, m, n_checkpoints + 1)).astype(int))
    P, Q = strategy.coefficient_path(t[:-1])
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(sim.seed))))
    d = model.n_assets
    sig = np.asarray(model.sigma, dtype=float)
    G, w = spec.gamma_matrix, spec.w_r
    K = sol.interp("K", t)
    L = sol.interp("Lambda", t)
    Y = sol.interp("Y", t)
    R = sol.interp("R", t)
    dt, sqdt = sim.dt, math.sqrt(sim.dt)
    X = np.full(sim.n_paths, spec.x0)
    pen = np.zeros(sim.n_paths)
    samples = []
    for k in range(m + 1):
        if k in marks:
            xbar = X.mean()
            v = K[k] * (X - xbar) ** 2 + L[k] * xbar**2 + 2.0 * Y[k] * X + R[k] + pen
            samples.append(v)
        if k == m:
            break
        Z = _step_normals(rng, sim.n_paths, d, sim.antithetic)
        Xn, alpha = _step(X, P[k], Q[k], model.b, sig, Z, dt, sqdt)
        dev = alpha - X[:, None] * w
        pen = pen + ((dev @ G) * dev).sum(axis=-1) * dt
        X = Xn
        _check_finite(X, k + 1)
    S = np.array([_pair_means(s, sim.antithetic) for s in samples])
    nn = S.shape[1]
    mean = S.mean(axis=1)
    se = S.std(axis=1, ddof=1) / math.sqrt(nn)
    se[0] = 0.0
    inc = np.diff(S, axis=0)
    inc_se = inc.std(axis=1, ddof=1) / math.sqrt(nn)
    value0 = float(L[0] * spec.x0**2 + 2.0 * Y[0] * spec.x0 + R[0])
    # at T the field reduces to mu Var - E[X] + penalty
    xt_obj = spec.mu * X.var() - X.mean() + pen.mean()
    return CurveReport(name, t[marks], mean, se, inc_se, value0, float(xt_obj), float(se[-1]), S[-1])


def verify_weak_optimality(
    model: MarketModel,
    spec: PenaltySpec,
    sol: RiccatiSolution,
    sim: SimConfig,
    perturbations=None,
    n_checkpoints=10,
) -> WeakOptimalityReport:
    """Monte Carlo estimate of ``t -> E[V_t]`` for the optimum and perturbations.

    ``V_t = v_t(X_t, E[X_t]) + int_0^t (alpha - w_r X)'Gamma(alpha - w_r X) ds``
    with ``v_t(x, m) = K (x - m)^2 + Lambda m^2 + 2 Y x + R`` and ``E[X_t]``
    replaced by the cross-sectional mean.  Every strategy sees the same
    Gaussian draws.  Perturbations default to the classical control.
    """
    if sol.model is not model and not np.allclose(sol.model.Sigma, model.Sigma):
        raise ValidationError("solution was built on a different market")
    if abs(sim.T - spec.T) > 1e-12 * spec.T:
        raise ValidationError("simulation horizon must equal the problem horizon")
    if perturbations is None:
        perturbations = [ClassicalStrategy(model, spec.mu, spec.T, spec.x0)]
    opt = _value_curve("optimal", sol, model, PenalizedStrategy(sol), sim, n_checkpoints)
    others = [
        _value_curve(getattr(s, "name", f"alt{i}"), sol, model, s, sim, n_checkpoints)
        for i, s in enumerate(perturbations)
    ]
    return WeakOptimalityReport(opt, others)
