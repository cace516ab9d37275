"""Allocation rules: penalized optimum, classical mean-variance, reference.

Every strategy is affine in current wealth, ``alpha(t, x) = p_t + q_t x``,
with ``alpha`` the currency amount held in each risky asset.  Strategies
expose :meth:`coefficients` so simulators can evaluate many paths at once.
"""

from __future__ import annotations

import numpy as np

from .errors import OutOfHorizon, ValidationError
from .market import MarketModel
from .riccati import RiccatiSolution


def _check_horizon(t, T):
    t = np.asarray(t, dtype=float)
    if np.any(t < -1e-12 * T) or np.any(t > T * (1 + 1e-12)) or not np.all(np.isfinite(t)):
        raise OutOfHorizon(f"t outside [0, {T}]")
    return np.clip(t, 0.0, T)


class Strategy:
    """Base class; subclasses define ``T`` and :meth:`coefficients`."""

    name = "strategy"
    T: float

    def coefficients(self, t):
        """Return ``(p, q)``, each of shape ``(d,)``, with ``alpha = p + q x``."""
        raise NotImplementedError

    def allocation(self, t, x):
        """Allocation for scalar time ``t`` and wealth ``x`` (scalar or array)."""
        p, q = self.coefficients(t)
        x = np.asarray(x, dtype=float)
        return p + x[..., None] * q

    def coefficient_path(self, times):
        """Stacked ``(P, Q)`` of shape ``(len(times), d)``."""
        pq = [self.coefficients(float(t)) for t in np.atleast_1d(times)]
        return np.array([c[0] for c in pq]), np.array([c[1] for c in pq])


class PenalizedStrategy(Strategy):
    """Optimal control of the tracking-error penalized problem.

    By default the mean wealth entering the control is the deterministic
    optimal mean ``x0 C_{0,t} + H_t / 2``; :meth:`allocation_mkv` takes an
    externally supplied mean instead.
    """

    name = "penalized"

    def __init__(self, sol: RiccatiSolution):
        self.sol = sol
        self.T = sol.T
        self.x0 = sol.spec.x0
        self.w_r = sol.spec.w_r
        self._Gw = sol.spec.gamma_matrix @ sol.spec.w_r
        self._b = sol.model.b

    def _fields(self, t):
        t = _check_horizon(t, self.T)
        sol = self.sol
        K = sol.interp("K", t)
        Lam = sol.interp("Lambda", t)
        Y = sol.interp("Y", t)
        Sb = sol.S_inv_solve(t, self._b)[0]
        SGw = sol.S_inv_solve(t, self._Gw)[0]
        return K, Lam, Y, Sb, SGw

    def allocation_mkv(self, t, x, x_bar):
        """``S^-1 G w x - S^-1 b [K x + Y - (K - Lambda) x_bar]``."""
        K, Lam, Y, Sb, SGw = self._fields(t)
        x = np.asarray(x, dtype=float)[..., None]
        x_bar = np.asarray(x_bar, dtype=float)[..., None]
        return SGw * x - Sb * (K * x + Y - (K - Lam) * x_bar)

    def coefficients(self, t):
        K, Lam, Y, Sb, SGw = self._fields(t)
        m = self.x0 * self.sol.interp("C_origin", t) + 0.5 * self.sol.interp("H", t)
        p = Sb * ((K - Lam) * m - Y)
        q = SGw - K * Sb
        return p, q

    def coefficient_path(self, times):
        t = _check_horizon(np.atleast_1d(np.asarray(times, dtype=float)), self.T)
        sol = self.sol
        K = sol.interp("K", t)
        Lam = sol.interp("Lambda", t)
        Y = sol.interp("Y", t)
        m = sol.mean_wealth(t)
        Sb = sol.S_inv_solve(t, self._b)
        SGw = sol.S_inv_solve(t, self._Gw)
        P = Sb * ((K - Lam) * m - Y)[:, None]
        Q = SGw - K[:, None] * Sb
        return P, Q

    def node_coefficients(self):
        """``(p, q)`` at every solution node, shapes ``(n + 1, d)``."""
        sol = self.sol
        Sb = np.einsum("kij,j->ki", sol.S_inv, self._b)
        SGw = np.einsum("kij,j->ki", sol.S_inv, self._Gw)
        m = sol.mean_wealth()
        p = Sb * ((sol.K - sol.Lambda) * m - sol.Y)[:, None]
        q = SGw - sol.K[:, None] * Sb
        return p, q


class ClassicalStrategy(Strategy):
    """Unpenalized mean-variance control ``Sigma^-1 b (zeta - x)``."""

    name = "classical"

    def __init__(self, model: MarketModel, mu, T, x0):
        if not (mu > 0 and T > 0):
            raise ValidationError("mu and T must be positive")
        self.model = model
        self.mu = float(mu)
        self.T = float(T)
        self.x0 = float(x0)
        self.direction = np.linalg.solve(model.Sigma, model.b)
        self.zeta = self.x0 + np.exp(model.rho * self.T) / (2.0 * self.mu)

    def coefficients(self, t):
        _check_horizon(t, self.T)
        return self.direction * self.zeta, -self.direction

    def coefficient_path(self, times):
        n = np.atleast_1d(times).shape[0]
        _check_horizon(times, self.T)
        return np.tile(self.direction * self.zeta, (n, 1)), np.tile(-self.direction, (n, 1))


class ReferenceStrategy(Strategy):
    """Constant-weight portfolio ``w_r x``."""

    name = "reference"

    def __init__(self, w_r, T=np.inf):
        self.w_r = np.asarray(w_r, dtype=float)
        self.T = float(T)

    def coefficients(self, t):
        if np.isfinite(self.T):
            _check_horizon(t, self.T)
        return np.zeros_like(self.w_r), self.w_r

    def coefficient_path(self, times):
        n = np.atleast_1d(times).shape[0]
        if np.isfinite(self.T):
            _check_horizon(times, self.T)
        return np.zeros((n, self.w_r.shape[0])), np.tile(self.w_r, (n, 1))


def control_mkv(strategy: PenalizedStrategy, t, x, x_bar):
    """Penalized control with caller-supplied mean wealth ``x_bar``."""
    return strategy.allocation_mkv(t, x, x_bar)


def control_feedback_x0(strategy: PenalizedStrategy, t, x):
    """Penalized control written through ``x0``, ``C_{0,t}`` and ``H_t``.

    ``S^-1 G w x - Lambda S^-1 b (x0 C_{0,t} + H_t/2)
    + S^-1 b [K (x0 C_{0,t} + H_t/2 - x) - Y]``.
    """
    return strategy.allocation(t, x)


def control_classical(model: MarketModel, mu, T, x0, t, x):
    """``Sigma^-1 b [exp(rho T)/(2 mu) + x0 - x]``."""
    return ClassicalStrategy(model, mu, T, x0).allocation(t, x)


def control_reference(w_r, x):
    return ReferenceStrategy(w_r).allocation(0.0, x)

