"""Daily-rebalanced backtest on adjusted close prices.

Allocations are currency amounts held over one day; cash earns nothing, so
wealth moves by ``alpha' r`` where ``r`` is the vector of simple returns.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .control import ClassicalStrategy, PenalizedStrategy, ReferenceStrategy
from .errors import EmptySeries, InsufficientData, ParseError, ValidationError, ZeroVolatility
from .market import (
    MarketModel,
    PenaltySpec,
    ReferenceKind,
    estimate_params,
    reference_weights,
    risk_aversion_for_target,
)
from .montecarlo import daily_returns, sharpe
from .riccati import TimeGrid, solve_riccati

DAYS_PER_YEAR = 252


@dataclass(frozen=True, eq=False)
class PriceSeries:
    """Aligned adjusted close prices, one row per date."""

    tickers: tuple
    dates: tuple
    prices: np.ndarray
    dropped_rows: int = 0

    def __post_init__(self):
        P = np.array(self.prices, dtype=float)
        if P.ndim != 2 or P.shape != (len(self.dates), len(self.tickers)):
            raise ValidationError("prices must have shape (n_dates, n_tickers)")
        if len(self.dates) < 2:
            raise EmptySeries("a price series needs at least two dates")
        if not np.all(np.isfinite(P)) or np.any(P <= 0):
            raise ValidationError("prices must be finite and strictly positive")
        if any(a >= b for a, b in zip(self.dates[:-1], self.dates[1:])):
            raise ValidationError("dates must be strictly increasing")
        P.setflags(write=False)
        object.__setattr__(self, "prices", P)
        object.__setattr__(self, "tickers", tuple(self.tickers))
        object.__setattr__(self, "dates", tuple(self.dates))

    @property
    def returns(self) -> np.ndarray:
        """Simple returns, shape ``(n_dates - 1, n_tickers)``."""
        return self.prices[1:] / self.prices[:-1] - 1.0


def _open_text(source):
    if isinstance(source, str) and (not source or "\n" in source):
        return io.StringIO(source)
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8")
    return source


def load_prices(csv_source) -> PriceSeries:
    """Read ``date,<ticker1>,...`` CSV (path, text or file object).

    Rows with an empty, non-numeric-``nan`` or non-positive price are
    dropped and counted (a warning reports the count).  Rows are sorted by
    date.  Malformed rows raise :class:`ParseError` with their line number.
    """
    fh = _open_text(csv_source)
    close = fh is not csv_source and not isinstance(fh, io.StringIO)
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptySeries("price file is empty") from None
        header = [h.strip() for h in header]
        if len(header) < 2 or header[0].lower() != "date":
            raise ParseError("header must be 'date,<ticker1>,...'", line=1)
        tickers = header[1:]
        if len(set(tickers)) != len(tickers) or any(not t for t in tickers):
            raise ParseError("ticker names must be unique and non-empty", line=1)
        rows, dropped, seen = [], 0, {}
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", line=line)
            try:
                date = _dt.date.fromisoformat(row[0].strip())
            except ValueError:
                raise ParseError(f"bad date {row[0]!r}", line=line) from None
            if date in seen:
                raise ParseError(f"duplicate date {date} (first on line {seen[date]})", line=line)
            seen[date] = line
            values, ok = [], True
            for cell in row[1:]:
                cell = cell.strip()
                if not cell:
                    ok = False
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"bad price {cell!r}", line=line) from None
                if not (math.isfinite(v) and v > 0):
                    ok = False
                values.append(v)
            if ok:
                rows.append((date, values))
            else:
                dropped += 1
    finally:
        if close:
            fh.close()
    if dropped:
        warnings.warn(f"dropped {dropped} row(s) with missing or non-positive prices", stacklevel=2)
    if len(rows) < 2:
        raise EmptySeries(f"{len(rows)} usable row(s); need at least two")
    rows.sort(key=lambda r: r[0])
    return PriceSeries(tuple(tickers), tuple(r[0] for r in rows), np.array([r[1] for r in rows]), dropped)


def synthetic_prices(model: MarketModel, n_days, seed=0, s0=100.0, start="2013-09-03", tickers=None) -> PriceSeries:
    """Geometric Brownian motion prices on business days.

    ``log S`` moves by ``(b - diag(Sigma)/2) dt + sigma sqrt(dt) Z`` with
    ``dt = 1/252``.
    """
    if int(n_days) != n_days or n_days < 2:
        raise ValidationError("n_days must be an integer >= 2")
    d = model.n_assets
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    dt = 1.0 / DAYS_PER_YEAR
    Z = rng.standard_normal((int(n_days) - 1, d))
    incr = (model.b - 0.5 * np.diag(model.Sigma)) * dt + math.sqrt(dt) * Z @ model.sigma.T
    logp = np.vstack([np.zeros(d), np.cumsum(incr, axis=0)])
    prices = s0 * np.exp(logp)
    days = np.busday_offset(np.datetime64(start, "D"), np.arange(int(n_days)), roll="forward")
    dates = tuple(_dt.date.fromisoformat(str(x)) for x in days)
    tickers = tickers or tuple(f"A{i + 1}" for i in range(d))
    return PriceSeries(tuple(tickers), dates, prices)


def _tag(ratio) -> str:
    return format(float(ratio), ".17g")


@dataclass(eq=False)
class BacktestReport:
    """Wealth paths, daily returns and Sharpe ratios of each strategy."""

    dates: tuple
    strategies: list
    wealth: dict
    returns: dict
    sharpe: dict
    zero_volatility: dict
    metadata: dict = field(default_factory=dict)

    @property
    def terminal_wealth(self) -> dict:
        return {k: float(v[-1]) for k, v in self.wealth.items()}


def _estimate(returns):
    if not np.any(returns):
        return None
    return estimate_params(returns, DAYS_PER_YEAR)


def _build(model, reference, target_return, gamma_over_mu, T, x0, steps):
    mu = risk_aversion_for_target(model, x0=x0, target_return=target_return, T=T)
    w_r = reference_weights(reference, model)
    grid = TimeGrid(steps, T)
    strategies = {"mv": ClassicalStrategy(model, mu, T, x0), "ref": ReferenceStrategy(w_r, T)}
    gammas = {}
    for ratio in gamma_over_mu:
        spec = PenaltySpec.scalar(ratio * mu, w_r, mu, T=T, x0=x0)
        strategies[f"pen_{_tag(ratio)}"] = PenalizedStrategy(solve_riccati(model, spec, grid))
        gammas[f"pen_{_tag(ratio)}"] = ratio * mu
    return mu, w_r, gammas, strategies


def run_backtest(
    series: PriceSeries,
    reference=ReferenceKind.EQUAL_WEIGHTS,
    target_return=0.25,
    gamma_over_mu=(1.0, 0.01),
    x0=1.0,
    rolling_window=None,
    refit_every=21,
    riccati_steps_per_day=10,
) -> BacktestReport:
    """Run the classical, reference and penalized strategies day by day.

    By default ``(b, Sigma)`` are estimated once from the whole series (in
    sample), ``T`` is the series span in years and ``mu`` targets
    ``target_return``.  With ``rolling_window = n`` parameters are
    re-estimated every ``refit_every`` days from the trailing ``n`` returns
    only; wealth is held in cash until the first window is full.
    """
    reference = ReferenceKind.parse(reference)
    gamma_over_mu = [float(g) for g in gamma_over_mu]
    if any(not (g >= 0 and math.isfinite(g)) for g in gamma_over_mu):
        raise ValidationError("gamma/mu ratios must be nonnegative")
    if not x0 > 0:
        raise ValidationError("x0 must be positive")
    R = series.returns
    n_ret, d = R.shape
    if n_ret < d + 1:
        raise InsufficientData(f"need at least {d + 2} price rows for {d} assets, got {n_ret + 1}")
    T = n_ret / DAYS_PER_YEAR
    t = np.arange(n_ret) / DAYS_PER_YEAR
    steps = riccati_steps_per_day * n_ret
    names = ["mv", "ref"] + [f"pen_{_tag(g)}" for g in gamma_over_mu]
    meta = {
        "reference": reference.value,
        "target_return": float(target_return),
        "gamma_over_mu": gamma_over_mu,
        "x0": float(x0),
        "T": T,
        "n_days": n_ret + 1,
        "dropped_rows": int(series.dropped_rows),
        "tickers": list(series.tickers),
        "mode": "in-sample" if rolling_window is None else f"rolling({int(rolling_window)})",
    }

    alloc = {k: np.zeros((n_ret, d)) for k in names}
    coef = None
    if rolling_window is None:
        model = _estimate(R)
        if model is not None:
            mu, w_r, gammas, strats = _build(model, reference, target_return, gamma_over_mu, T, x0, steps)
            coef = {k: s.coefficient_path(t) for k, s in strats.items()}
            meta.update(b=model.b.tolist(), Sigma=model.Sigma.tolist(), mu=mu, w_r=w_r.tolist(), gamma=gammas)
        else:
            meta.update(b=[0.0] * d, Sigma=[[0.0] * d] * d, mu=None, gamma=None)
    else:
        window = int(rolling_window)
        if window < d + 1:
            raise InsufficientData("rolling window must hold at least d + 1 returns")
        refit_every = int(refit_every)
        if refit_every < 1:
            raise ValidationError("refit_every must be positive")
        coef = {k: [np.zeros((n_ret, d)), np.zeros((n_ret, d))] for k in names}
        fits = []
        for start in range(window, n_ret, refit_every):
            stop = min(start + refit_every, n_ret)
            model = _estimate(R[start - window : start])
            if model is None:
                continue
            mu, _, _, strats = _build(model, reference, target_return, gamma_over_mu, T, x0, steps)
            for k, s in strats.items():
                P, Q = s.coefficient_path(t[start:stop])
                coef[k][0][start:stop] = P
                coef[k][1][start:stop] = Q
            fits.append({"day": start, "mu": mu})
        meta["fits"] = fits

    wealth, rets, sh, zv = {}, {}, {}, {}
    for k in names:
        W = np.empty(n_ret + 1)
        W[0] = x0
        if coef is not None:
            P, Q = coef[k]
            for i in range(n_ret):
                a = P[i] + W[i] * Q[i]
                alloc[k][i] = a
                W[i + 1] = W[i] + a @ R[i]
        else:
            W[:] = x0
        wealth[k] = W
        rets[k] = daily_returns(W)
        try:
            sh[k] = sharpe(rets[k])
            zv[k] = False
        except ZeroVolatility:
            sh[k] = float("nan")
            zv[k] = True
    return BacktestReport(tuple(series.dates), names, wealth, rets, sh, zv, meta)


def _fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def report_to_csv(report: BacktestReport) -> str:
    """Wealth table followed by a blank line and a ``strategy,sharpe`` block."""
    out = ["date," + ",".join(f"wealth_{k}" for k in report.strategies)]
    if report.strategies:
        for i, date in enumerate(report.dates):
            out.append(str(date) + "," + ",".join(_fmt(report.wealth[k][i]) for k in report.strategies))
    out.append("")
    out.append("strategy,sharpe")
    for k in report.strategies:
        out.append(f"{k},{_fmt(report.sharpe[k])}")
    return "\n".join(out) + "\n"


def read_report_csv(text):
    """Parse :func:`report_to_csv` output into ``(dates, wealth, sharpe)``."""
    text = "".join(line for line in text.splitlines(keepends=True) if not line.startswith("#"))
    head, _, tail = text.partition("\n\n")
    lines = head.split("\n")
    cols = lines[0].split(",")[1:]
    names = [c[len("wealth_"):] for c in cols]
    dates = []
    wealth = {k: [] for k in names}
    for line in lines[1:]:
        if not line:
            continue
        parts = line.split(",")
        dates.append(_dt.date.fromisoformat(parts[0]))
        for k, v in zip(names, parts[1:]):
            wealth[k].append(float(v))
    sharpes = {}
    for line in tail.split("\n")[1:]:
        if line:
            k, v = line.split(",")
            sharpes[k] = float(v)
    return dates, {k: np.array(v) for k, v in wealth.items()}, sharpes
