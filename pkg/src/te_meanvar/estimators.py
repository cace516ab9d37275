"""Estimator wrappers: fit on a matrix of daily simple returns, then query
allocations for ``(t, wealth)`` states.

``fit`` estimates ``(b, Sigma)``, calibrates ``mu`` (unless given) and
builds the strategy; ``predict`` maps rows ``(t, x)`` to currency
allocations, one column per asset.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .control import ClassicalStrategy, PenalizedStrategy, ReferenceStrategy
from .market import PenaltySpec, estimate_params, reference_weights, risk_aversion_for_target
from .riccati import TimeGrid, solve_riccati


class _AllocatorMixin:
    def _fit_market(self, X):
        X = check_array(X, ensure_min_samples=2)
        self.model_ = estimate_params(X, self.periods_per_year)
        self.n_features_in_ = X.shape[1]
        if self.mu is None:
            self.mu_ = risk_aversion_for_target(self.model_, self.x0, self.target_return, self.T)
        else:
            self.mu_ = float(self.mu)
        return self.model_

    def predict(self, X):
        """Allocations for rows ``(t, wealth)``; shape ``(n_rows, n_assets)``."""
        check_is_fitted(self, "strategy_")
        X = check_array(X)
        if X.shape[1] != 2:
            raise ValueError("predict expects rows (t, wealth)")
        out = np.empty((X.shape[0], self.n_features_in_))
        for i, (t, x) in enumerate(X):
            out[i] = self.strategy_.allocation(t, x)
        return out

    def allocate(self, t, x):
        """Allocation at a single state."""
        check_is_fitted(self, "strategy_")
        return self.strategy_.allocation(float(t), float(x))


class PenalizedMeanVariance(_AllocatorMixin, BaseEstimator):
    """Mean-variance allocation with tracking-error penalty ``gamma I``.

    Parameters
    ----------
    reference : str
        Reference portfolio kind (``"equal-weights"``, ``"min-var"``,
        ``"erc"`` or ``"zero"``).
    target_return : float
        Used to calibrate ``mu`` when ``mu`` is None.
    mu : float or None
        Risk aversion.
    gamma : float or None
        Penalty level; when None it is ``gamma_over_mu * mu``.
    gamma_over_mu : float
    T, x0 : float
        Horizon in years and initial wealth.
    n_steps : int
        Riccati grid size.
    periods_per_year : int
        Annualization factor for the return sample.
    """

    def __init__(
        self,
        reference="equal-weights",
        target_return=0.20,
        mu=None,
        gamma=None,
        gamma_over_mu=0.01,
        T=1.0,
        x0=1.0,
        n_steps=2520,
        periods_per_year=252,
    ):
        self.reference = reference
        self.target_return = target_return
        self.mu = mu
        self.gamma = gamma
        self.gamma_over_mu = gamma_over_mu
        self.T = T
        self.x0 = x0
        self.n_steps = n_steps
        self.periods_per_year = periods_per_year

    def fit(self, X, y=None):
        model = self._fit_market(X)
        self.gamma_ = float(self.gamma) if self.gamma is not None else self.gamma_over_mu * self.mu_
        self.reference_weights_ = reference_weights(self.reference, model)
        spec = PenaltySpec.scalar(self.gamma_, self.reference_weights_, self.mu_, T=self.T, x0=self.x0)
        self.solution_ = solve_riccati(model, spec, TimeGrid(self.n_steps, self.T))
        self.strategy_ = PenalizedStrategy(self.solution_)
        return self


class ClassicalMeanVariance(_AllocatorMixin, BaseEstimator):
    """Unpenalized mean-variance allocation ``Sigma^-1 b (zeta - x)``."""

    def __init__(self, target_return=0.20, mu=None, T=1.0, x0=1.0, periods_per_year=252):
        self.target_return = target_return
        self.mu = mu
        self.T = T
        self.x0 = x0
        self.periods_per_year = periods_per_year

    def fit(self, X, y=None):
        model = self._fit_market(X)
        self.strategy_ = ClassicalStrategy(model, self.mu_, self.T, self.x0)
        return self


class ReferencePortfolio(_AllocatorMixin, BaseEstimator):
    """Constant-weight allocation ``w_r x``."""

    def __init__(self, reference="equal-weights", periods_per_year=252):
        self.reference = reference
        self.periods_per_year = periods_per_year

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2)
        self.model_ = estimate_params(X, self.periods_per_year)
        self.n_features_in_ = X.shape[1]
        self.reference_weights_ = reference_weights(self.reference, self.model_)
        self.strategy_ = ReferenceStrategy(self.reference_weights_)
        return self
