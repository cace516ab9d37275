"""Acceptance criteria 1-9, each at its stated tolerance and time budget.

Every test records one ``criterion N: PASS|FAIL`` line (printed in the
terminal summary and to stdout) and then asserts the same verdict.
"""

import time

import numpy as np
import pytest

from te_meanvar.backtest import read_report_csv, report_to_csv, run_backtest, synthetic_prices
from te_meanvar.control import ClassicalStrategy, PenalizedStrategy, control_classical
from te_meanvar.expansion import control_expansion, efficient_frontier_expanded, expansion_terms, terminal_moments
from te_meanvar.market import (
    PenaltySpec,
    covariance_from_vols_corr,
    erc_weights,
    max_rc_gap,
    reference_weights,
    risk_aversion_for_target,
)
from te_meanvar.montecarlo import (
    MisspecConfig,
    SimConfig,
    misspecification_study,
    sharpe,
    simulate_wealth,
    terminal_moments_mc,
    verify_weak_optimality,
)
from te_meanvar.riccati import TimeGrid, gamma_sensitivity, solve_riccati, transition_factor

pytestmark = pytest.mark.slow

EPSILONS = np.round(np.linspace(0.0, 1.0, 11), 10)


def _verdict(log, number, checks, elapsed, budget=None):
    ok = all(v for v, _ in checks.values())
    if budget is not None:
        ok = ok and elapsed < budget
        timing = f"{elapsed:.1f}s (< {budget:g}s)"
    else:
        timing = f"{elapsed:.1f}s"
    detail = "; ".join(f"{k} {'ok' if v else 'FAIL'} [{d}]" for k, (v, d) in checks.items())
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {timing} {detail}"
    log.append(line)
    print(line)
    assert ok, line


def test_criterion_1_unpenalized_recovery(acceptance_log, model, mu, w_ew):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    sol = solve_riccati(model, PenaltySpec.scalar(0.0, w_ew, mu), TimeGrid(10_000, 1.0))
    t = sol.t
    eK = np.max(np.abs(sol.K - mu * np.exp(-model.rho * (1.0 - t))))
    eL = np.max(np.abs(sol.Lambda))
    eY = np.max(np.abs(sol.Y + 0.5))
    s = PenalizedStrategy(sol)
    ts = np.concatenate([t[::500], rng.uniform(0, 1, 100)])
    xs = rng.uniform(-1.0, 3.0, ts.size)
    eA = max(
        np.max(np.abs(s.allocation(tk, x) - control_classical(model, mu, 1.0, 1.0, tk, x)))
        for tk, x in zip(ts, xs)
    )
    elapsed = time.perf_counter() - t0
    checks = {
        "K": (eK <= 1e-8, f"{eK:.1e}"),
        "Lambda": (eL <= 1e-8, f"{eL:.1e}"),
        "Y": (eY <= 1e-8, f"{eY:.1e}"),
        "control": (eA <= 1e-7, f"{eA:.1e}"),
    }
    _verdict(acceptance_log, 1, checks, elapsed, 1.0)


def test_criterion_2_large_penalty_limit(acceptance_log, model, mu, w_ew):
    rng = np.random.default_rng(2)
    ts, xs = rng.uniform(0, 1, 100), rng.uniform(0.2, 3.0, 100)
    t0 = time.perf_counter()
    dist = []
    for f in (1.0, 1e2, 1e4, 1e6):
        s = PenalizedStrategy(solve_riccati(model, PenaltySpec.scalar(f * mu, w_ew, mu)))
        d = max(
            np.linalg.norm(s.allocation(t, x) - w_ew * x) / max(1.0, np.linalg.norm(w_ew * x))
            for t, x in zip(ts, xs)
        )
        dist.append(d)
    elapsed = time.perf_counter() - t0
    checks = {
        "distance at 1e6 mu": (dist[-1] <= 1e-3, f"{dist[-1]:.1e}"),
        "monotone": (bool(np.all(np.diff(dist) < 0)), " > ".join(f"{d:.1e}" for d in dist)),
    }
    _verdict(acceptance_log, 2, checks, elapsed, 5.0)


def test_criterion_3_expansion_order(acceptance_log, model, mu, w_ew):
    rng = np.random.default_rng(3)
    n = 10_000
    g = 1e-3 * mu
    t0 = time.perf_counter()
    grid = TimeGrid(n, 1.0)
    terms = expansion_terms(model, PenaltySpec.scalar(0.0, w_ew, mu), grid)
    var0, var1 = efficient_frontier_expanded(terms)
    nodes = rng.integers(0, n + 1, 40)
    xs = rng.uniform(0.5, 2.5, 40)
    res = {"K": [], "Lambda": [], "alpha": [], "Var": []}
    for gam in (g, g / 2):
        sol = solve_riccati(model, PenaltySpec.scalar(gam, w_ew, mu), grid)
        res["K"].append(np.max(np.abs(sol.K - terms.K0 - gam * terms.K1)))
        res["Lambda"].append(np.max(np.abs(sol.Lambda - gam * terms.Lambda1)))
        s = PenalizedStrategy(sol)
        err = 0.0
        for k, x in zip(nodes, xs):
            base, corr = control_expansion(terms, terms.t[k], x)
            err = max(err, np.max(np.abs(s.allocation(terms.t[k], x) - base - gam * corr)))
        res["alpha"].append(err)
        res["Var"].append(abs(terminal_moments(sol)[1] - var0 - gam * var1))
    elapsed = time.perf_counter() - t0
    checks = {}
    for name, (a, b) in res.items():
        r = a / b
        checks[name] = (3.2 <= r <= 4.8, f"ratio {r:.3f}")
    _verdict(acceptance_log, 3, checks, elapsed, 10.0)


def test_criterion_4_classical_frontier(acceptance_log, model, mu):
    t0 = time.perf_counter()
    rho = model.rho
    strat = ClassicalStrategy(model, mu, 1.0, 1.0)
    X = simulate_wealth(model, strat, SimConfig(100_000, 252, 1.0, seed=4))[:, -1]
    mean, se, var, se_var = terminal_moments_mc(X)
    zeta = 1.0 + np.exp(rho) / (2.0 * mu)
    mean_T = zeta - (zeta - 1.0) * np.exp(-rho)
    var_th = np.exp(-rho) / -np.expm1(-rho) * (mean_T - 1.0) ** 2
    elapsed = time.perf_counter() - t0
    checks = {
        "Var(X_T)": (abs(var - var_th) <= 3 * se_var, f"{var:.4f} vs {var_th:.4f}, SE {se_var:.4f}"),
        "E[X_T] = 1.20": (abs(mean - 1.20) <= 3 * se, f"{mean:.4f}, SE {se:.4f}"),
    }
    _verdict(acceptance_log, 4, checks, elapsed, 30.0)


def _rule_beats_everywhere(res, a, b):
    """``a - b`` never below -2 SE and above +2 SE at a majority of epsilons."""
    z = []
    for e in res.epsilons:
        d, se = res.paired_difference(a, b, e)
        z.append(d / se)
    z = np.array(z)
    return bool(np.all(z > -2.0) and np.sum(z > 2.0) > z.size / 2), z


def _rule_crossing(res):
    """Penalized minus classical changes sign with a late win in [0.1, 0.5]."""
    eps = np.asarray(res.epsilons)
    z = np.array([np.divide(*res.paired_difference("penalized", "classical", e)) for e in eps])
    ok = False
    for j, eb in enumerate(eps):
        if not 0.1 - 1e-12 <= eb <= 0.5 + 1e-12 or z[j] <= 2.0:
            continue
        if np.any(z[:j] < -2.0) and np.all(z[j:] > -2.0):
            ok = True
    return ok, z


def test_criterion_5_misspecification_study(acceptance_log, model):
    t0 = time.perf_counter()
    cfg = MisspecConfig(model, EPSILONS, n_scenarios=2000, noise_seed=7)
    sim = SimConfig(2, 252, 1.0, seed=7)
    mu_policy = lambda m, x0, T: risk_aversion_for_target(m, x0, 0.20, T)  # noqa: E731
    gamma_policy = lambda m: m / 100  # noqa: E731
    results = {
        ref: misspecification_study(cfg, sim, ref, mu_policy, gamma_policy)
        for ref in ("equal-weights", "min-var", "erc", "zero")
    }
    elapsed = time.perf_counter() - t0
    checks = {}
    for ref, target in (("equal-weights", 0.047), ("min-var", 0.057), ("erc", 0.051)):
        got = results[ref].stats("reference", 0.0)["mean_sharpe"]
        checks[f"anchor {ref}"] = (abs(got - target) <= 0.005, f"{got:.4f} vs {target}")

    def fmt(z):
        return " ".join(f"{v:+.1f}" for v in z)

    for ref in ("equal-weights", "erc"):
        ok, z = _rule_crossing(results[ref])
        checks[f"crossing {ref}"] = (ok, "z " + fmt(z))
    ok, z = _rule_beats_everywhere(results["min-var"], "classical", "penalized")
    checks["classical above penalized min-var"] = (ok, "z " + fmt(z))
    ok, z = _rule_beats_everywhere(results["zero"], "penalized", "classical")
    checks["penalized above classical zero"] = (ok, "z " + fmt(z))
    _verdict(acceptance_log, 5, checks, elapsed, 600.0)


def test_criterion_6_weak_optimality(acceptance_log, model, mu, w_ew):
    t0 = time.perf_counter()
    spec = PenaltySpec.scalar(mu / 100, w_ew, mu)
    sol = solve_riccati(model, spec, TimeGrid(2520, 1.0))
    sim = SimConfig(100_000, 252, 1.0, seed=6, antithetic=True)
    rep = verify_weak_optimality(model, spec, sol, sim, n_checkpoints=10)
    cls = rep.perturbed[0]
    gap, gap_se = rep.paired_gap(cls)
    elapsed = time.perf_counter() - t0
    opt = rep.optimal
    checks = {
        "optimal flat": (opt.flat, f"max |dev|/SE {opt.max_deviation_in_se:.2f}"),
        "terminal value": (
            opt.terminal_matches_value,
            f"{opt.terminal_objective:.5f} vs {opt.value0:.5f}, SE {opt.terminal_objective_se:.5f}",
        ),
        "classical increasing": (
            gap > 3 * gap_se and cls.nondecreasing,
            f"paired gap {gap / gap_se:.1f} SE, raw {cls.increase_in_se:.1f} SE",
        ),
    }
    _verdict(acceptance_log, 6, checks, elapsed, 60.0)


def test_criterion_7_sensitivities(acceptance_log, model, mu, w_ew):
    t0 = time.perf_counter()
    grid = TimeGrid(10_000, 1.0)
    g = mu / 100
    spec = PenaltySpec.scalar(g, w_ew, mu)
    sens = gamma_sensitivity(model, spec, solve_riccati(model, spec, grid))
    h = 1e-4 * g
    Kp = solve_riccati(model, PenaltySpec.scalar(g + h, w_ew, mu), grid).K
    Km = solve_riccati(model, PenaltySpec.scalar(g - h, w_ew, mu), grid).K
    fd = (Kp - Km) / (2 * h)
    rel = np.max(np.abs(sens.psi - fd)) / np.max(np.abs(fd))
    big = PenaltySpec.scalar(1e6 * mu, w_ew, mu)
    sens_big = gamma_sensitivity(model, big, solve_riccati(model, big, grid))
    psi_max = np.max(np.abs(sens_big.psi))
    phi_max = np.max(np.abs(sens_big.phi))
    elapsed = time.perf_counter() - t0
    checks = {
        "psi vs finite differences": (rel <= 1e-4, f"rel {rel:.1e}"),
        "bounded at 1e6 mu": (max(psi_max, phi_max) < 1e-3, f"psi {psi_max:.1e}, phi {phi_max:.1e}"),
    }
    _verdict(acceptance_log, 7, checks, elapsed, 5.0)


def test_criterion_8_backtest_protocol(acceptance_log, model):
    t0 = time.perf_counter()
    wins = 0
    n_runs = 200
    for seed in range(n_runs):
        rep = run_backtest(synthetic_prices(model, 1090, seed=seed), "equal-weights", 0.25, (1.0, 0.01))
        wins += rep.sharpe["pen_1"] > rep.sharpe["mv"]
    rate = wins / n_runs
    ps = synthetic_prices(model, 1090, seed=0)
    text_a = report_to_csv(run_backtest(ps, "equal-weights", 0.25, (1.0, 0.01)))
    text_b = report_to_csv(run_backtest(ps, "equal-weights", 0.25, (1.0, 0.01)))
    _, wealth, sharpes = read_report_csv(text_a)
    err = max(abs(sharpe(np.diff(w) / w[:-1]) - sharpes[k]) for k, w in wealth.items())
    elapsed = time.perf_counter() - t0
    checks = {
        "win rate >= 60%": (rate >= 0.60, f"{rate:.3f} of {n_runs}"),
        "CSV deterministic": (text_a == text_b, "bitwise"),
        "CSV round trip": (err <= 1e-12, f"Sharpe error {err:.1e}"),
    }
    _verdict(acceptance_log, 8, checks, elapsed)


def test_criterion_9_property_suites(acceptance_log, model, mu, w_ew, sol_small):
    rng = np.random.default_rng(9)
    t0 = time.perf_counter()
    erc_gap, erc_cf = 0.0, 0.0
    for _ in range(50):
        d = int(rng.integers(2, 9))
        v = rng.uniform(0.05, 0.8, d)
        c = rng.uniform(-1.0 / (d - 1) + 0.05, 0.9)
        C = np.full((d, d), c)
        np.fill_diagonal(C, 1.0)
        Sigma = covariance_from_vols_corr(v, C)
        w = erc_weights(Sigma, tol=1e-12)
        erc_gap = max(erc_gap, max_rc_gap(w, Sigma))
        erc_cf = max(erc_cf, np.max(np.abs(w - (1 / v) / np.sum(1 / v))))
    erc_gap = max(erc_gap, max_rc_gap(reference_weights("erc", model), model.Sigma))
    cocycle = 0.0
    for _ in range(200):
        s, u, t = np.sort(rng.uniform(0, 1, 3))
        lhs = transition_factor(sol_small, s, u) * transition_factor(sol_small, u, t)
        cocycle = max(cocycle, abs(lhs - transition_factor(sol_small, s, t)))
    strat = PenalizedStrategy(sol_small)
    affine = 0.0
    for t, x1, x2, lam in zip(rng.uniform(0, 1, 50), rng.uniform(-5, 5, 50), rng.uniform(-5, 5, 50), rng.uniform(0, 1, 50)):
        lhs = strat.allocation(t, lam * x1 + (1 - lam) * x2)
        rhs = lam * strat.allocation(t, x1) + (1 - lam) * strat.allocation(t, x2)
        affine = max(affine, np.max(np.abs(lhs - rhs)))
    shrink = PenalizedStrategy(solve_riccati(model, PenaltySpec.scalar(mu, np.zeros(4), mu), TimeGrid(2000, 1.0)))
    tangency = np.linalg.solve(model.Sigma, model.b)
    collinear = 0.0
    for t, x in zip(rng.uniform(0, 1, 30), rng.uniform(-1, 3, 30)):
        a = shrink.allocation(t, x)
        dvec = shrink.sol.S_inv_solve(t, model.b)[0]
        collinear = max(collinear, abs(abs(a @ dvec) / (np.linalg.norm(a) * np.linalg.norm(dvec)) - 1))
        a = control_classical(model, mu, 1.0, 1.0, t, x)
        collinear = max(collinear, abs(abs(a @ tangency) / (np.linalg.norm(a) * np.linalg.norm(tangency)) - 1))
    sim = SimConfig(500, 252, 1.0, seed=99)
    same = np.array_equal(simulate_wealth(model, strat, sim), simulate_wealth(model, strat, sim))
    cfg = MisspecConfig(model, [0.0, 0.5], n_scenarios=40, noise_seed=3)
    r1 = misspecification_study(cfg, SimConfig(2, 252, 1.0, seed=3), threads=1)
    r2 = misspecification_study(cfg, SimConfig(2, 252, 1.0, seed=3), threads=3)
    same = same and all(np.array_equal(r1.sharpe[k], r2.sharpe[k], equal_nan=True) for k in r1.strategies)
    elapsed = time.perf_counter() - t0
    checks = {
        "ERC gap": (erc_gap <= 1e-10, f"{erc_gap:.1e}"),
        "ERC closed form": (erc_cf <= 1e-8, f"{erc_cf:.1e}"),
        "cocycle": (cocycle <= 1e-10, f"{cocycle:.1e}"),
        "affinity": (affine <= 1e-12, f"{affine:.1e}"),
        "collinearity": (collinear <= 1e-12, f"{collinear:.1e}"),
        "seed determinism": (same, "bitwise"),
    }
    _verdict(acceptance_log, 9, checks, elapsed)
