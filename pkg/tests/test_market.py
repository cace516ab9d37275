import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from te_meanvar.errors import (
    DegenerateCovariance,
    DimensionMismatch,
    ErcNonConvergence,
    InsufficientData,
    InvalidCorrelation,
    ValidationError,
)
from te_meanvar.market import (
    STUDY_CORR,
    STUDY_VOLS,
    PenaltySpec,
    ReferenceKind,
    build_market,
    covariance_from_vols_corr,
    erc_weights,
    estimate_params,
    market_from_covariance,
    max_rc_gap,
    reference_weights,
    risk_aversion_for_expected_return,
    risk_aversion_for_target,
)


def test_study_market_covariance(model):
    np.testing.assert_allclose(np.diag(model.Sigma), [0.04, 0.09, 0.16, 0.25], rtol=0, atol=1e-15)
    assert model.Sigma[0, 1] == pytest.approx(0.003, abs=1e-16)
    np.testing.assert_allclose(model.sigma @ model.sigma.T, model.Sigma, atol=1e-15)
    assert model.delta_floor > 0


def test_single_asset():
    m = build_market([0.1], [[0.2]])
    assert m.Sigma.shape == (1, 1)
    assert m.Sigma[0, 0] == pytest.approx(0.04)


def test_singular_sigma_rejected():
    sigma = np.array([[0.2, 0.1], [0.2, 0.1]])
    with pytest.raises(DegenerateCovariance):
        build_market([0.1, 0.1], sigma)


@pytest.mark.parametrize(
    "b, sigma",
    [([0.1, 0.2], np.eye(3)), ([0.1], np.ones((2, 3)))],
)
def test_dimension_mismatch(b, sigma):
    with pytest.raises(DimensionMismatch):
        build_market(b, sigma)


def test_vols_corr():
    S = covariance_from_vols_corr([0.2, 0.3], np.eye(2))
    np.testing.assert_allclose(S, np.diag([0.04, 0.09]), rtol=1e-15, atol=0)
    S0 = covariance_from_vols_corr(STUDY_VOLS, STUDY_CORR)
    assert S0[0, 1] == pytest.approx(0.2 * 0.3 * 0.05, abs=1e-17)
    np.testing.assert_array_equal(S0, np.diag(STUDY_VOLS) @ STUDY_CORR @ np.diag(STUDY_VOLS))


@pytest.mark.parametrize(
    "C",
    [
        np.array([[1.0, 1.5], [1.5, 1.0]]),
        np.array([[0.9, 0.1], [0.1, 1.0]]),
        np.array([[1.0, 0.1], [0.2, 1.0]]),
    ],
)
def test_invalid_correlation(C):
    with pytest.raises(InvalidCorrelation):
        covariance_from_vols_corr([0.2, 0.3], C)


def test_penalty_spec_checks(w_ew):
    with pytest.raises(ValidationError):
        PenaltySpec.scalar(-1.0, w_ew, 1.0)
    with pytest.raises(ValidationError):
        PenaltySpec.scalar(1.0, w_ew, 0.0)
    with pytest.raises(ValidationError):
        PenaltySpec(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2), 1.0, 1.0, 1.0)
    with pytest.raises(ValidationError):
        PenaltySpec(-np.eye(2), np.zeros(2), 1.0, 1.0, 1.0)
    with pytest.raises(DimensionMismatch):
        PenaltySpec(np.eye(3), np.zeros(2), 1.0, 1.0, 1.0)
    assert PenaltySpec.scalar(0.0, w_ew, 1.0).gamma == 0.0
    assert PenaltySpec(np.diag([1.0, 2.0, 3.0, 4.0]), w_ew, 1.0, 1.0, 1.0).gamma is None


def test_reference_kinds(model):
    np.testing.assert_array_equal(reference_weights("equal-weights", model), np.full(4, 0.25))
    np.testing.assert_array_equal(reference_weights(ReferenceKind.ZERO, model), np.zeros(4))
    for kind in ("equal-weights", "min-var", "erc"):
        assert reference_weights(kind, model).sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValidationError):
        ReferenceKind.parse("momentum")


def test_min_var_two_assets():
    m = market_from_covariance([0.1, 0.1], np.diag([0.04, 0.09]))
    np.testing.assert_allclose(reference_weights("min-var", m), np.array([0.09, 0.04]) / 0.13, atol=1e-15)


def test_min_var_beats_random_simplex(model, rng):
    w = reference_weights("min-var", model)
    v = w @ model.Sigma @ w
    pts = rng.dirichlet(np.ones(4), size=1000)
    assert np.all(np.einsum("ki,ij,kj->k", pts, model.Sigma, pts) >= v - 1e-15)


def test_erc_study_market(model):
    w = reference_weights("erc", model, tol=1e-10)
    assert max_rc_gap(w, model.Sigma) <= 1e-10
    assert np.all((w >= 0) & (w <= 1))


@settings(max_examples=60, deadline=None)
@given(
    d=st.integers(2, 8),
    c=st.floats(-0.1, 0.9),
    vols=st.lists(st.floats(0.05, 0.8), min_size=8, max_size=8),
)
def test_erc_equal_correlation_closed_form(d, c, vols):
    # inverse-volatility weights are exact when all correlations are equal
    c = max(c, -1.0 / (d - 1) + 0.05)
    v = np.array(vols[:d])
    C = np.full((d, d), c)
    np.fill_diagonal(C, 1.0)
    S = covariance_from_vols_corr(v, C)
    w = erc_weights(S, tol=1e-10)
    assert max_rc_gap(w, S) <= 1e-10
    target = (1 / v) / (1 / v).sum()
    np.testing.assert_allclose(w, target, rtol=0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(2, 10))
def test_erc_gap_random_covariances(seed, d):
    r = np.random.default_rng(seed)
    A = r.standard_normal((d, d + 3))
    S = A @ A.T / (d + 3) + 0.05 * np.eye(d)
    w = erc_weights(S, tol=1e-10)
    assert max_rc_gap(w, S) <= 1e-10
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_erc_budget_exhausted(model):
    with pytest.raises(ErcNonConvergence):
        erc_weights(model.Sigma, tol=1e-10, max_iter=1)


def test_estimate_params_errors(rng):
    with pytest.raises(DegenerateCovariance):
        estimate_params(np.tile([0.01, 0.02], (50, 1)))
    with pytest.raises(InsufficientData):
        estimate_params(rng.standard_normal((2, 4)))


def test_estimate_params_recovers_truth(model):
    r = np.random.default_rng(7)
    n = 1_000_000
    draws = model.b / 252 + r.standard_normal((n, 4)) @ model.sigma.T / np.sqrt(252)
    est = estimate_params(draws)
    se_b = np.sqrt(np.diag(model.Sigma) * 252 / n)
    assert np.all(np.abs(est.b - model.b) <= 3 * se_b)
    s = np.sqrt(np.diag(model.Sigma))
    se_S = np.sqrt((model.Sigma**2 + np.outer(s**2, s**2)) / n)
    assert np.all(np.abs(est.Sigma - model.Sigma) <= 3 * se_S)
    np.testing.assert_allclose(np.tril(est.sigma), est.sigma)


def test_risk_aversion_policies(model):
    mu = risk_aversion_for_target(model)
    assert mu == pytest.approx(np.exp(model.rho) / 2.4, rel=1e-15)
    mu2 = risk_aversion_for_expected_return(model, target_return=0.2)
    # classical expected terminal wealth x0 + expm1(rho T)/(2 mu) e^{-rho T}... equals 1.2
    zeta = 1 + np.exp(model.rho) / (2 * mu2)
    assert zeta - (zeta - 1) * np.exp(-model.rho) == pytest.approx(1.2, rel=1e-14)
