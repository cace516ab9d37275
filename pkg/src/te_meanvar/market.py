"""Market model, parameter estimation and reference portfolios."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateCovariance,
    DimensionMismatch,
    ErcNonConvergence,
    InsufficientData,
    InvalidCorrelation,
    ValidationError,
)

EIGEN_FLOOR = 1e-10
SYMMETRY_TOL = 1e-12

# Four-asset market used by the misspecification study.
STUDY_DRIFT = np.array([0.12, 0.14, 0.16, 0.10])
STUDY_VOLS = np.array([0.20, 0.30, 0.40, 0.50])
STUDY_CORR = np.array(
    [
        [1.00, 0.05, -0.05, 0.10],
        [0.05, 1.00, -0.03, 0.12],
        [-0.05, -0.03, 1.00, -0.13],
        [0.10, 0.12, -0.13, 1.00],
    ]
)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MarketModel:
    """Black-Scholes market with ``n_assets`` risky assets and zero rate.

    ``b`` and ``Sigma`` are annualized; ``sigma`` is any square factor with
    ``sigma @ sigma.T == Sigma``.
    """

    n_assets: int
    b: np.ndarray
    sigma: np.ndarray
    Sigma: np.ndarray
    delta_floor: float

    @property
    def Sigma_inv(self) -> np.ndarray:
        return np.linalg.inv(self.Sigma)

    @property
    def rho(self) -> float:
        """Squared maximal Sharpe ratio ``b' Sigma^-1 b`` (1/year)."""
        return float(self.b @ np.linalg.solve(self.Sigma, self.b))

    @property
    def vols(self) -> np.ndarray:
        return np.sqrt(np.diag(self.Sigma))


@dataclass(frozen=True, eq=False)
class PenaltySpec:
    """Tracking-error penalty and mean-variance preferences."""

    gamma_matrix: np.ndarray
    w_r: np.ndarray
    mu: float
    T: float
    x0: float

    def __post_init__(self):
        G = _frozen(self.gamma_matrix)
        w = _frozen(self.w_r)
        if G.ndim != 2 or G.shape[0] != G.shape[1] or G.shape[0] != w.shape[0]:
            raise DimensionMismatch(
                f"gamma_matrix {G.shape} incompatible with w_r {w.shape}"
            )
        if np.max(np.abs(G - G.T), initial=0.0) > SYMMETRY_TOL * max(1.0, np.abs(G).max()):
            raise ValidationError("gamma_matrix must be symmetric")
        if G.size and np.linalg.eigvalsh(G).min() < -1e-12 * max(1.0, np.abs(G).max()):
            raise ValidationError("gamma_matrix must be positive semidefinite")
        for name in ("mu", "T", "x0"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        object.__setattr__(self, "gamma_matrix", G)
        object.__setattr__(self, "w_r", w)

    @classmethod
    def scalar(cls, gamma, w_r, mu, T=1.0, x0=1.0) -> "PenaltySpec":
        """Isotropic penalty ``Gamma = gamma * I``."""
        if gamma < 0:
            raise ValidationError("gamma must be nonnegative")
        w_r = np.asarray(w_r, dtype=float)
        return cls(gamma * np.eye(w_r.shape[0]), w_r, mu, T, x0)

    @property
    def gamma(self) -> float | None:
        """The scalar ``gamma`` when ``Gamma = gamma * I``, else ``None``."""
        G = self.gamma_matrix
        g = float(G[0, 0]) if G.size else 0.0
        if np.allclose(G, g * np.eye(G.shape[0]), rtol=0.0, atol=1e-15 * max(1.0, g)):
            return g
        return None


class ReferenceKind(enum.Enum):
    EQUAL_WEIGHTS = "equal-weights"
    MINIMUM_VARIANCE = "min-var"
    ERC = "erc"
    ZERO = "zero"

    @classmethod
    def parse(cls, value) -> "ReferenceKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {
            "equal-weights": cls.EQUAL_WEIGHTS,
            "equal-weight": cls.EQUAL_WEIGHTS,
            "ew": cls.EQUAL_WEIGHTS,
            "min-var": cls.MINIMUM_VARIANCE,
            "minimum-variance": cls.MINIMUM_VARIANCE,
            "minvar": cls.MINIMUM_VARIANCE,
            "erc": cls.ERC,
            "zero": cls.ZERO,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValidationError(f"unknown reference portfolio {value!r}") from None


def build_market(b, sigma) -> MarketModel:
    """Validate drift and volatility matrix and derive the covariance.

    Raises
    ------
    DimensionMismatch
        If ``sigma`` is not square or does not match ``b``.
    DegenerateCovariance
        If the smallest eigenvalue of ``sigma @ sigma.T`` is at or below
        ``EIGEN_FLOOR``.
    """
    b = np.atleast_1d(np.asarray(b, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if b.ndim != 1:
        raise DimensionMismatch("drift must be a vector")
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise DimensionMismatch(f"volatility matrix must be square, got {sigma.shape}")
    if sigma.shape[0] != b.shape[0]:
        raise DimensionMismatch(
            f"drift has {b.shape[0]} entries but volatility matrix is {sigma.shape}"
        )
    if not (np.all(np.isfinite(b)) and np.all(np.isfinite(sigma))):
        raise ValidationError("market parameters must be finite")
    Sigma = sigma @ sigma.T
    Sigma = 0.5 * (Sigma + Sigma.T)
    delta = float(np.linalg.eigvalsh(Sigma).min())
    if delta <= EIGEN_FLOOR:
        raise DegenerateCovariance(
            f"smallest covariance eigenvalue {delta:.3e} <= {EIGEN_FLOOR:.0e}"
        )
    return MarketModel(b.shape[0], _frozen(b), _frozen(sigma), _frozen(Sigma), delta)


def market_from_covariance(b, Sigma) -> MarketModel:
    """Build a model from a covariance matrix, using its Cholesky factor."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if Sigma.ndim != 2 or Sigma.shape[0] != Sigma.shape[1]:
        raise DimensionMismatch(f"covariance must be square, got {Sigma.shape}")
    Sigma = 0.5 * (Sigma + Sigma.T)
    lam = np.linalg.eigvalsh(Sigma)
    if lam.min() <= EIGEN_FLOOR:
        raise DegenerateCovariance(
            f"smallest covariance eigenvalue {lam.min():.3e} <= {EIGEN_FLOOR:.0e}"
        )
    return build_market(b, np.linalg.cholesky(Sigma))


def covariance_from_vols_corr(v, C) -> np.ndarray:
    """``Sigma_ij = v_i v_j C_ij``."""
    v = np.asarray(v, dtype=float)
    C = np.asarray(C, dtype=float)
    if C.shape != (v.shape[0], v.shape[0]):
        raise DimensionMismatch(f"correlation {C.shape} does not match {v.shape[0]} vols")
    if np.any(v <= 0):
        raise ValidationError("volatilities must be strictly positive")
    if not np.array_equal(C, C.T):
        raise InvalidCorrelation("correlation matrix must be symmetric")
    if not np.all(np.diag(C) == 1.0):
        raise InvalidCorrelation("correlation matrix must have unit diagonal")
    if np.any(np.abs(C) > 1.0):
        raise InvalidCorrelation("correlation entries must lie in [-1, 1]")
    return v[:, None] * C * v[None, :]


def study_market() -> MarketModel:
    """The four-asset market (b0, v0, C0) of the misspecification study."""
    return market_from_covariance(STUDY_DRIFT, covariance_from_vols_corr(STUDY_VOLS, STUDY_CORR))


def risk_aversion_for_target(model: MarketModel, x0=1.0, target_return=0.20, T=1.0) -> float:
    """Risk aversion ``mu = exp(rho T) / (2 x0 (1 + target))``.

    This is the calibration used by the simulation study and the backtest.
    It places the classical strategy's wealth target ``x0 + exp(rho T)/(2 mu)``
    at ``(2 + target) x0``; the resulting expected terminal wealth is
    ``x0 + (1 + target) x0 (1 - exp(-rho T))``.
    """
    return float(np.exp(model.rho * T) / (2.0 * x0 * (1.0 + target_return)))


def risk_aversion_for_expected_return(model: MarketModel, x0=1.0, target_return=0.20, T=1.0) -> float:
    """Risk aversion giving ``E[X_T] = (1 + target) x0`` for the classical strategy."""
    if target_return <= 0:
        raise ValidationError("target_return must be positive")
    return float(np.expm1(model.rho * T) / (2.0 * x0 * target_return))


def risk_contributions(w, Sigma) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return w * (Sigma @ w)


def max_rc_gap(w, Sigma) -> float:
    rc = risk_contributions(w, Sigma)
    return float(rc.max() - rc.min())


def erc_weights(Sigma, tol=1e-10, max_iter=100_000) -> np.ndarray:
    """Equal-risk-contribution weights for covariance ``Sigma``.

    Cyclical coordinate descent on ``0.5 y'Sy - (1/d) sum(log y)``, whose
    minimizer satisfies ``y_i (S y)_i = 1/d``; the weights are ``y / sum(y)``.
    Every coordinate update is the positive root of a scalar quadratic, so
    iterates stay strictly inside the simplex.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    d = Sigma.shape[0]
    if d == 1:
        return np.ones(1)
    diag = np.diag(Sigma).copy()
    budget = 1.0 / d
    y = 1.0 / np.sqrt(diag)
    y /= np.sqrt(y @ Sigma @ y)
    w = y / y.sum()
    for _ in range(max_iter):
        for i in range(d):
            c = Sigma[i] @ y - diag[i] * y[i]
            y[i] = (-c + np.sqrt(c * c + 4.0 * diag[i] * budget)) / (2.0 * diag[i])
        w = y / y.sum()
        if max_rc_gap(w, Sigma) <= tol:
            return w
    raise ErcNonConvergence(
        f"ERC gap {max_rc_gap(w, Sigma):.3e} above tol {tol:.1e} after {max_iter} sweeps"
    )


def reference_weights(kind, model: MarketModel, tol=1e-10) -> np.ndarray:
    """Constant reference weights ``w_r`` of the given kind."""
    kind = ReferenceKind.parse(kind)
    d = model.n_assets
    if kind is ReferenceKind.EQUAL_WEIGHTS:
        return np.full(d, 1.0 / d)
    if kind is ReferenceKind.ZERO:
        return np.zeros(d)
    if kind is ReferenceKind.MINIMUM_VARIANCE:
        x = np.linalg.solve(model.Sigma, np.ones(d))
        return x / x.sum()
    if not tol > 0:
        raise ValidationError("tol must be positive")
    return erc_weights(model.Sigma, tol=tol)


def estimate_params(returns, periods_per_year=252) -> MarketModel:
    """Annualized in-sample drift and covariance from simple returns.

    ``returns`` has one row per period and one column per asset. The
    covariance uses divisor ``n - 1``; ``sigma`` is its Cholesky factor.
    """
    R = np.asarray(returns, dtype=float)
    if R.ndim == 1:
        R = R[:, None]
    if R.ndim != 2:
        raise DimensionMismatch("returns must be a 2-D array")
    n, d = R.shape
    if periods_per_year <= 0:
        raise ValidationError("periods_per_year must be positive")
    if n < d + 1:
        raise InsufficientData(f"need at least {d + 1} return rows for {d} assets, got {n}")
    if not np.all(np.isfinite(R)):
        raise ValidationError("returns contain non-finite values")
    b = R.mean(axis=0) * periods_per_year
    Sigma = np.atleast_2d(np.cov(R, rowvar=False, ddof=1)) * periods_per_year
    return market_from_covariance(b, Sigma)
