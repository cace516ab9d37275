"""First-order asymptotics in a small isotropic penalty ``Gamma = gamma I``.

Writing ``rho = b'S^-1 b`` with ``S = Sigma`` here, ``beta = b'Sigma^-1 w_r``
and ``kappa = b'Sigma^-2 b``, the coefficients expand as

* ``K = K0 + gamma K1`` with ``K0 = mu exp(-rho (T - t))`` and
  ``K1 = |w_r + Sigma^-1 b|^2 (1 - exp(-rho (T - t))) / rho``;
* ``Lambda = gamma |w_r|^2 (T - t)``;
* ``C_{s,t} = 1 - gamma C1_{s,t}``, ``Y = -1/2 + gamma C1_{t,T} / 2``;
* ``H = H0 - gamma H1``.

The control splits into the classical allocation along ``Sigma^-1 b`` plus a
first-order correction mixing ``Sigma^-1 w_r``, ``Sigma^-2 b`` and
``Sigma^-1 b``.  Wealth moments are propagated through the linearized
mean/variance equations of the affine closed loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .control import PenalizedStrategy
from .errors import OutOfHorizon, ValidationError
from .market import MarketModel, PenaltySpec
from .riccati import RiccatiSolution, TimeGrid


def _expm1_over(rho, x):
    """``(exp(rho x) - 1) / rho`` with the ``rho -> 0`` limit ``x``."""
    x = np.asarray(x, dtype=float)
    if abs(rho) < 1e-300:
        return x
    return np.expm1(rho * x) / rho


@dataclass(frozen=True, eq=False)
class ExpansionTerms:
    grid: TimeGrid
    model: MarketModel
    spec: PenaltySpec
    K0: np.ndarray
    K1: np.ndarray
    Lambda1: np.ndarray
    C1_origin: np.ndarray
    C1_toT: np.ndarray
    H0: np.ndarray
    H1: np.ndarray
    alpha11: np.ndarray
    rho: float
    zeta: float
    beta: float
    kappa: float

    @property
    def t(self):
        return self.grid.t

    @property
    def mean0(self) -> np.ndarray:
        """Zeroth-order mean wealth ``x0 + H0 / 2``."""
        return self.spec.x0 + 0.5 * self.H0

    def C1(self, s, t):
        """First-order transition coefficient ``C1_{s,t}`` (closed form)."""
        return _C1_antiderivative(self, t) - _C1_antiderivative(self, s)


def _C1_antiderivative(terms: ExpansionTerms, t):
    # int_0^t (rho |w|^2 (T - u) - beta) / K0_u du
    rho, T, mu = terms.rho, terms.spec.T, terms.spec.mu
    W = float(terms.spec.w_r @ terms.spec.w_r)
    t = np.asarray(t, dtype=float)
    tau = T - t
    return (
        W * (T * np.exp(rho * T) - tau * np.exp(rho * tau))
        - (W + terms.beta) * np.exp(rho * tau) * _expm1_over(rho, t)
    ) / mu


def expansion_terms(model: MarketModel, spec: PenaltySpec, grid: TimeGrid | None = None) -> ExpansionTerms:
    """Closed-form first-order coefficients on ``grid``.

    ``spec`` fixes ``w_r, mu, T, x0``; its ``gamma`` value is irrelevant
    here but the penalty must be isotropic.  ``H1`` is assembled by
    trapezoid quadrature of its two defining integrals.
    """
    if spec.gamma is None:
        raise ValidationError("expansion requires an isotropic penalty Gamma = gamma I")
    grid = TimeGrid(2520, spec.T) if grid is None else grid
    t = grid.t
    T, mu, x0 = spec.T, spec.mu, spec.x0
    b, w = model.b, spec.w_r
    Sib = np.linalg.solve(model.Sigma, b)
    rho = float(b @ Sib)
    beta = float(Sib @ w)
    kappa = float(Sib @ Sib)
    N = float(np.sum((w + Sib) ** 2))
    W = float(w @ w)
    tau = T - t

    K0 = mu * np.exp(-rho * tau)
    K1 = N * np.exp(-rho * tau) * _expm1_over(rho, tau)
    Lambda1 = W * tau
    zeta = x0 + np.exp(rho * T) / (2.0 * mu)
    H0 = np.exp(rho * tau) * _expm1_over(rho, t) * rho / mu

    terms = ExpansionTerms(
        grid, model, spec, K0, K1, Lambda1, None, None, H0, None, None,
        rho, float(zeta), beta, kappa,
    )
    F = _C1_antiderivative(terms, t)
    C1_origin = F - F[0]
    C1_toT = F[-1] - F
    rate = rho / K0
    # int_0^t (2 C1_{s,t} + C1_{t,T}) rho/K0_s ds, with C1_{s,t} = F_t - F_s
    I_rate = cumulative_trapezoid(rate, t, initial=0.0)
    I_Frate = cumulative_trapezoid(F * rate, t, initial=0.0)
    first = 2.0 * (F * I_rate - I_Frate) + C1_toT * I_rate
    second = cumulative_trapezoid((rho * K1 + kappa) / K0**2, t, initial=0.0)
    H1 = first + second

    alpha11 = (
        Lambda1 * (x0 + 0.5 * H0) / K0
        + x0 * C1_origin
        + 0.5 * H1
        + K1 / (2.0 * K0**2)
        + C1_toT / (2.0 * K0)
    )
    object.__setattr__(terms, "C1_origin", C1_origin)
    object.__setattr__(terms, "C1_toT", C1_toT)
    object.__setattr__(terms, "H1", H1)
    object.__setattr__(terms, "alpha11", alpha11)
    return terms


def _node_index(terms: ExpansionTerms, t) -> int:
    g = terms.grid
    if not (-1e-12 <= t <= g.T * (1 + 1e-12)):
        raise OutOfHorizon(f"t = {t} outside [0, {g.T}]")
    k = int(round(t / g.dt))
    if abs(k * g.dt - t) > 1e-9 * max(g.dt, 1.0):
        raise OutOfHorizon(f"t = {t} is not a grid node")
    return k


def control_expansion(terms: ExpansionTerms, t, x, x0=None):
    """Return ``(base, correction)`` with ``alpha ~ base + gamma * correction``.

    ``base = Sigma^-1 b (exp(rho T)/(2 mu) + x0 - x)`` and
    ``correction = Sigma^-1 w_r a13 - Sigma^-2 b a12 - Sigma^-1 b a11`` where
    ``a13 = x / K0``, ``a12 = (m0 - x) / K0 + 1 / (2 K0^2)`` with ``m0`` the
    zeroth-order mean wealth, and ``a11`` is stored on ``terms``.
    """
    if x0 is not None and abs(x0 - terms.spec.x0) > 1e-12 * max(1.0, abs(x0)):
        raise ValidationError("x0 differs from the one the terms were built with")
    k = _node_index(terms, float(t))
    x = float(x)
    Si = np.linalg.inv(terms.model.Sigma)
    Sib = Si @ terms.model.b
    K0 = terms.K0[k]
    a12 = (terms.mean0[k] - x) / K0 + 0.5 / K0**2
    a13 = x / K0
    base = Sib * (terms.zeta - x)
    correction = Si @ terms.spec.w_r * a13 - Si @ Sib * a12 - Sib * terms.alpha11[k]
    return base, correction


def _first_order_mean_rate(terms: ExpansionTerms) -> np.ndarray:
    # d(m1)/dt = f - rho m1, with f = beta m0/K0 - kappa/(2 K0^2) - rho a11
    return terms.beta * terms.mean0 / terms.K0 - 0.5 * terms.kappa / terms.K0**2 - terms.rho * terms.alpha11


def _first_order_mean(terms: ExpansionTerms) -> np.ndarray:
    t, rho = terms.t, terms.rho
    f = _first_order_mean_rate(terms)
    return np.exp(-rho * t) * cumulative_trapezoid(np.exp(rho * t) * f, t, initial=0.0)


def efficient_frontier_expanded(terms: ExpansionTerms, mu=None, x0=None, T=None):
    """``(var0, var1)`` with ``Var(X_T) ~ var0 + gamma * var1``.

    ``var0`` is the classical frontier ``e^{-rho T}/(1 - e^{-rho T}) (m0_T - x0)^2``.
    ``var1 = int_0^T e^{-rho (T-s)} 2 (zeta - m0_s) dm1_s``, the first-order
    part of the variance equation ``dV = (2 b'q + q'Sigma q) V + abar'Sigma abar``
    along the affine closed loop (the ``V`` coefficient has no first-order
    term).
    """
    spec = terms.spec
    for given, name in ((mu, "mu"), (x0, "x0"), (T, "T")):
        if given is not None and abs(given - getattr(spec, name)) > 1e-12 * max(1.0, abs(given)):
            raise ValidationError(f"{name} differs from the one the terms were built with")
    t, rho = terms.t, terms.rho
    Tt = spec.T
    m0T = terms.mean0[-1]
    if rho > 0:
        var0 = np.exp(-rho * Tt) / -np.expm1(-rho * Tt) * (m0T - spec.x0) ** 2
    else:
        var0 = 0.0
    m1 = _first_order_mean(terms)
    dm1 = _first_order_mean_rate(terms) - rho * m1
    integrand = np.exp(-rho * (Tt - t)) * 2.0 * (terms.zeta - terms.mean0) * dm1
    var1 = np.trapezoid(integrand, t)
    return float(var0), float(var1)


def mean_wealth_path(source, grid: TimeGrid | None = None, gamma=None):
    """Deterministic mean wealth at every grid node.

    ``source`` is either a :class:`RiccatiSolution` (integrates the exact
    mean equation ``dm = -a_t m - Y_t b'S_t^-1 b`` with Heun's method) or
    :class:`ExpansionTerms` together with ``gamma`` (integrates the
    first-order truncated equation).
    """
    if isinstance(source, RiccatiSolution):
        if grid is not None and grid != source.grid:
            raise ValidationError("grid must match the solution grid")
        a = source.drift_rate
        e = -source.Y * source.rho_tilde
        return _heun_linear(-a, e, source.spec.x0, source.grid.dt)
    if not isinstance(source, ExpansionTerms):
        raise ValidationError("source must be a RiccatiSolution or ExpansionTerms")
    if gamma is None:
        raise ValidationError("gamma is required for the expanded mean path")
    terms = source
    rho = terms.rho
    # dm = rho zeta - gamma (rho a11 + kappa a12(m)) + (gamma beta / K0 - rho) m
    # with a12(m) = (m0 - m)/K0 + 1/(2 K0^2)
    c = gamma * (terms.beta + terms.kappa) / terms.K0 - rho
    e = rho * terms.zeta - gamma * (
        rho * terms.alpha11 + terms.kappa * (terms.mean0 / terms.K0 + 0.5 / terms.K0**2)
    )
    return _heun_linear(c, e, terms.spec.x0, terms.grid.dt)


def _heun_linear(c, e, y0, dt):
    y = np.empty_like(np.asarray(c, dtype=float))
    y[0] = y0
    for k in range(len(y) - 1):
        f0 = c[k] * y[k] + e[k]
        yp = y[k] + dt * f0
        y[k + 1] = y[k] + 0.5 * dt * (f0 + c[k + 1] * yp + e[k + 1])
    return y


def _rk4_linear_paired(c, e, y0, dt):
    """RK4 for ``y' = c y + e`` with step ``2 dt``, using odd nodes as midpoints."""
    n = len(c) - 1
    if n % 2:
        raise ValidationError("paired RK4 needs an even number of steps")
    h = 2.0 * dt
    y = float(y0)
    out = [y]
    for k in range(0, n, 2):
        k1 = c[k] * y + e[k]
        k2 = c[k + 1] * (y + 0.5 * h * k1) + e[k + 1]
        k3 = c[k + 1] * (y + 0.5 * h * k2) + e[k + 1]
        k4 = c[k + 2] * (y + h * k3) + e[k + 2]
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(y)
    return np.array(out)


def terminal_moments(sol: RiccatiSolution):
    """Exact ``(E[X_T], Var(X_T))`` under the optimal feedback control.

    The closed loop is affine, ``alpha = p_t + q_t X``, so the variance obeys
    ``V' = (2 b'q + q'Sigma q) V + abar'Sigma abar`` with ``abar = p + q m``.
    """
    strat = PenalizedStrategy(sol)
    p, q = strat.node_coefficients()
    m = sol.mean_wealth()
    Sigma = sol.model.Sigma
    c = 2.0 * q @ sol.model.b + np.einsum("ki,ij,kj->k", q, Sigma, q)
    abar = p + q * m[:, None]
    e = np.einsum("ki,ij,kj->k", abar, Sigma, abar)
    if sol.grid.n_steps % 2 == 0:
        V = _rk4_linear_paired(c, e, 0.0, sol.grid.dt)[-1]
    else:
        V = _heun_linear(c, e, 0.0, sol.grid.dt)[-1]
    return float(m[-1]), float(V)
