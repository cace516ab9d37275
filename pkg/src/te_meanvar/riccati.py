"""Backward Riccati system for the tracking-error penalized problem.

The value function has the quadratic form
``v_t(x, m) = K_t (x - m)^2 + Lambda_t m^2 + 2 Y_t x + R_t``.  ``K`` and
``Lambda`` solve scalar Riccati equations driven by
``S_t = K_t Sigma + Gamma``; ``Y``, ``R`` and the transition factors are
exponentials/integrals of quantities built from ``(K, Lambda)``.

All matrix work goes through one simultaneous diagonalization: with
``Sigma = L L'`` and ``L^-1 Gamma L^-T = U diag(g) U'`` we get
``S_t^-1 = P' diag(1 / (K_t + g)) P`` where ``P = U' L^-1``.  The right-hand
sides then cost O(d) per evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import NonPositiveK, OutOfRange, SingularS, ValidationError
from .market import MarketModel, PenaltySpec

K_FLOOR = 1e-14
DEFAULT_STEPS = 2520


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k T / n_steps`` on ``[0, T]``."""

    n_steps: int
    T: float

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValidationError("n_steps must be a positive integer")
        if not self.T > 0:
            raise ValidationError("T must be positive")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "T", float(self.T))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def t(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.T
        return t


class _Factor:
    """Simultaneous diagonalization of ``(Sigma, Gamma)``."""

    def __init__(self, Sigma, Gamma):
        L = np.linalg.cholesky(Sigma)
        Linv = np.linalg.inv(L)
        M = Linv @ Gamma @ Linv.T
        g, U = np.linalg.eigh(0.5 * (M + M.T))
        # Gamma is PSD; tiny negative eigenvalues are rounding.
        self.g = np.clip(g, 0.0, None)
        self.P = U.T @ Linv

    def inv_diag(self, K):
        den = np.add.outer(np.atleast_1d(K), self.g)
        if np.any(den <= 0) or not np.all(np.isfinite(den)):
            raise SingularS("S_t = K_t Sigma + Gamma is not positive definite")
        return 1.0 / den

    def S_inv(self, K) -> np.ndarray:
        """``S^-1`` for scalar or vector ``K``; shape ``(..., d, d)``."""
        scalar = np.ndim(K) == 0
        inv = self.inv_diag(K)
        out = np.einsum("in,ki,im->knm", self.P, inv, self.P, optimize=True)
        return out[0] if scalar else out

    def solve(self, K, v) -> np.ndarray:
        """``S^-1 v`` for each node in ``K``; returns shape ``(len(K), d)``."""
        inv = self.inv_diag(K)
        return (inv * (self.P @ v)) @ self.P


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """Node values of ``K, Lambda, Y, R`` and of the mean-wealth factors.

    ``C_origin[k] = C_{0, t_k}`` and ``H[k] = H_{t_k}`` give the optimal mean
    wealth ``x0 C_{0,t} + H_t / 2``.  ``backward_drift[k]`` is
    ``int_{t_k}^T a_u du`` with ``a_u = b' S_u^-1 (Lambda_u b - Gamma w_r)``,
    from which every transition factor follows.
    """

    grid: TimeGrid
    model: MarketModel
    spec: PenaltySpec
    K: np.ndarray
    Lambda: np.ndarray
    Y: np.ndarray
    R: np.ndarray
    S_inv: np.ndarray
    C_origin: np.ndarray
    H: np.ndarray
    backward_drift: np.ndarray
    rho_tilde: np.ndarray
    drift_rate: np.ndarray
    _factor: _Factor = field(repr=False)

    @property
    def t(self) -> np.ndarray:
        return self.grid.t

    @property
    def T(self) -> float:
        return self.grid.T

    def check_time(self, t):
        t = np.asarray(t, dtype=float)
        tol = 1e-12 * self.T
        if np.any(t < -tol) or np.any(t > self.T + tol) or not np.all(np.isfinite(t)):
            raise OutOfRange(f"time outside [0, {self.T}]")
        return np.clip(t, 0.0, self.T)

    def interp(self, name, t):
        """Linear interpolation of a per-node scalar field."""
        t = self.check_time(t)
        return np.interp(t, self.t, getattr(self, name))

    def S_inv_at(self, t) -> np.ndarray:
        return self._factor.S_inv(self.interp("K", t))

    def S_inv_solve(self, t, v) -> np.ndarray:
        """``S_t^-1 v`` at each time in ``t``."""
        return self._factor.solve(np.atleast_1d(self.interp("K", t)), np.asarray(v, float))

    def mean_wealth(self, t=None):
        """Mean optimal wealth ``x0 C_{0,t} + H_t / 2`` (at nodes by default)."""
        if t is None:
            return self.spec.x0 * self.C_origin + 0.5 * self.H
        return self.spec.x0 * self.interp("C_origin", t) + 0.5 * self.interp("H", t)


def _check_inputs(model: MarketModel, spec: PenaltySpec):
    if spec.w_r.shape[0] != model.n_assets:
        raise ValidationError(
            f"reference weights have {spec.w_r.shape[0]} entries, market has {model.n_assets}"
        )


def solve_riccati(model: MarketModel, spec: PenaltySpec, grid: TimeGrid | None = None) -> RiccatiSolution:
    """Integrate ``(K, Lambda)`` backward from ``(mu, 0)`` with classical RK4.

    Two further states ride along in the same sweep so the closed forms
    inherit fourth-order accuracy: ``A_t = int_t^T a_u du`` (giving
    ``Y_t = -exp(-A_t)/2`` and ``C_{s,t} = exp(A_t - A_s)``) and ``R`` with
    ``dR = Y^2 b'S^-1 b dt``, ``R_T = 0``.

    Raises
    ------
    NonPositiveK
        If ``K`` drops to ``K_FLOOR`` or becomes non-finite.
    SingularS
        If ``K Sigma + Gamma`` loses positive definiteness.
    """
    _check_inputs(model, spec)
    if grid is None:
        grid = TimeGrid(DEFAULT_STEPS, spec.T)
    if abs(grid.T - spec.T) > 1e-12 * spec.T:
        raise ValidationError(f"grid horizon {grid.T} differs from spec horizon {spec.T}")
    if grid.n_steps < 2:
        raise ValidationError("grid needs at least 2 steps")

    fac = _Factor(model.Sigma, spec.gamma_matrix)
    g = fac.g
    bt = fac.P @ model.b
    Gw = spec.gamma_matrix @ spec.w_r
    gt = fac.P @ Gw
    c0 = float(spec.w_r @ Gw)
    bt2 = bt * bt

    coeffs = list(zip(g.tolist(), bt.tolist(), gt.tolist()))

    def rhs(K, L, A):
        # returns (dK, dLambda, dA, dR)/dt with A_t = int_t^T a and dR = Y^2 rho~
        dK = dL = rt = a = 0.0
        for gi, bi, ci in coeffs:
            den = K + gi
            if den <= 0.0:
                raise SingularS("S_t = K_t Sigma + Gamma is not positive definite")
            uK = K * bi - ci
            uL = L * bi - ci
            dK += uK * uK / den
            dL += uL * uL / den
            rt += bi * bi / den
            a += bi * uL / den
        return dK - c0, dL - c0, -a, 0.25 * math.exp(-2.0 * A) * rt

    n = grid.n_steps
    h = grid.dt
    K = np.empty(n + 1)
    L = np.empty(n + 1)
    A = np.empty(n + 1)
    R = np.empty(n + 1)
    yK, yL, yA, yR = float(spec.mu), 0.0, 0.0, 0.0
    K[n], L[n], A[n], R[n] = yK, yL, yA, yR
    hh = 0.5 * h
    h6 = h / 6.0
    # reversed time: y(t - h) = y(t) - h * f
    for k in range(n, 0, -1):
        a1 = rhs(yK, yL, yA)
        a2 = rhs(yK - hh * a1[0], yL - hh * a1[1], yA - hh * a1[2])
        a3 = rhs(yK - hh * a2[0], yL - hh * a2[1], yA - hh * a2[2])
        a4 = rhs(yK - h * a3[0], yL - h * a3[1], yA - h * a3[2])
        yK -= h6 * (a1[0] + 2.0 * a2[0] + 2.0 * a3[0] + a4[0])
        yL -= h6 * (a1[1] + 2.0 * a2[1] + 2.0 * a3[1] + a4[1])
        yA -= h6 * (a1[2] + 2.0 * a2[2] + 2.0 * a3[2] + a4[2])
        yR -= h6 * (a1[3] + 2.0 * a2[3] + 2.0 * a3[3] + a4[3])
        if not (yK > K_FLOOR and math.isfinite(yK + yL + yA + yR)):
            raise NonPositiveK(
                f"K reached {yK:.3e} at t = {(k - 1) * h:.6g}; refine the grid or check inputs"
            )
        K[k - 1], L[k - 1], A[k - 1], R[k - 1] = yK, yL, yA, yR
    inv = fac.inv_diag(K)
    rho_tilde = inv @ bt2
    drift_rate = (inv * bt * (L[:, None] * bt - gt)).sum(axis=1)
    Y = -0.5 * np.exp(-A)
    C_origin = np.exp(A - A[0])
    H = 4.0 * np.exp(A) * (R - R[0])

    sol = RiccatiSolution(
        grid=grid,
        model=model,
        spec=spec,
        K=K,
        Lambda=L,
        Y=Y,
        R=R,
        S_inv=fac.S_inv(K),
        C_origin=C_origin,
        H=H,
        backward_drift=A,
        rho_tilde=rho_tilde,
        drift_rate=drift_rate,
        _factor=fac,
    )
    for name in ("K", "Lambda", "Y", "R", "S_inv", "C_origin", "H", "backward_drift", "rho_tilde", "drift_rate"):
        getattr(sol, name).setflags(write=False)
    return sol


def value_at_zero(sol: RiccatiSolution, x0=None) -> float:
    """Optimal cost ``Lambda_0 x0^2 + 2 Y_0 x0 + R_0``."""
    x0 = sol.spec.x0 if x0 is None else float(x0)
    return float(sol.Lambda[0] * x0 * x0 + 2.0 * sol.Y[0] * x0 + sol.R[0])


def transition_factor(sol: RiccatiSolution, s, t):
    """``C_{s,t} = exp(-int_s^t a_u du)`` for ``0 <= s <= t <= T``."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s > t + 1e-12 * sol.T):
        raise OutOfRange("transition factor needs s <= t")
    As = sol.interp("backward_drift", s)
    At = sol.interp("backward_drift", t)
    return np.exp(At - As)


def ode_rhs(sol: RiccatiSolution):
    """Right-hand sides ``(dK/dt, dLambda/dt)`` of the Riccati pair at every node."""
    fac = sol._factor
    spec = sol.spec
    bt = fac.P @ sol.model.b
    Gw = spec.gamma_matrix @ spec.w_r
    gt = fac.P @ Gw
    c0 = float(spec.w_r @ Gw)
    inv = fac.inv_diag(sol.K)
    uK = sol.K[:, None] * bt - gt
    uL = sol.Lambda[:, None] * bt - gt
    return (uK * uK * inv).sum(axis=1) - c0, (uL * uL * inv).sum(axis=1) - c0


def woodbury_margin(sol: RiccatiSolution) -> np.ndarray:
    """``w' G w - w' G S^-1 G w`` at every node; nonnegative in theory."""
    Gw = sol.spec.gamma_matrix @ sol.spec.w_r
    return float(sol.spec.w_r @ Gw) - np.einsum("i,kij,j->k", Gw, sol.S_inv, Gw)


@dataclass(frozen=True, eq=False)
class GammaSensitivity:
    """``psi = dK/dgamma`` and ``phi = dLambda/dgamma`` on the solution grid."""

    grid: TimeGrid
    psi: np.ndarray
    phi: np.ndarray


def _backward_linear_integral(t, source, rate):
    """Solve ``u' = rate u - source``, ``u_T = 0`` as
    ``u_t = int_t^T source_s exp(-int_t^s rate) ds`` with trapezoid quadrature."""
    I = cumulative_trapezoid(rate, t, initial=0.0)
    f = source * np.exp(-(I - I[0]))
    F = cumulative_trapezoid(f, t, initial=0.0)
    return np.exp(I - I[0]) * (F[-1] - F)


def gamma_sensitivity(model: MarketModel, spec: PenaltySpec, sol: RiccatiSolution, grid: TimeGrid | None = None) -> GammaSensitivity:
    """Sensitivities of ``K`` and ``Lambda`` to the scalar penalty ``gamma``.

    ``psi`` solves ``psi' = B psi - A`` with ``A = |w + z|^2`` and
    ``B = 2 b'z - z'Sigma z`` where ``z = S^-1 (K b - gamma w)``; ``phi``
    solves ``phi' = D phi - C`` with ``y = S^-1 (Lambda b - gamma w)``,
    ``C = |w + y|^2 + psi y'Sigma y`` and ``D = 2 b'y``.  Both vanish at ``T``.
    """
    gamma = spec.gamma
    if gamma is None:
        raise ValidationError("gamma sensitivity needs a scalar penalty Gamma = gamma I")
    grid = sol.grid if grid is None else grid
    if grid != sol.grid:
        raise ValidationError("sensitivity grid must match the solution grid")
    t = grid.t
    fac = sol._factor
    b = model.b
    w = spec.w_r
    Kn = sol.K
    z = Kn[:, None] * fac.solve(Kn, b) - gamma * fac.solve(Kn, w)
    A = ((w + z) ** 2).sum(axis=1)
    B = 2.0 * z @ b - np.einsum("ki,ij,kj->k", z, model.Sigma, z)
    psi = _backward_linear_integral(t, A, B)

    y = sol.Lambda[:, None] * fac.solve(Kn, b) - gamma * fac.solve(Kn, w)
    Cs = ((w + y) ** 2).sum(axis=1) + psi * np.einsum("ki,ij,kj->k", y, model.Sigma, y)
    D = 2.0 * y @ b
    phi = _backward_linear_integral(t, Cs, D)
    return GammaSensitivity(grid, psi, phi)
