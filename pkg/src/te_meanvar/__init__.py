"""Continuous-time mean-variance allocation with a tracking-error penalty."""

from .control import (
    ClassicalStrategy,
    PenalizedStrategy,
    ReferenceStrategy,
    control_classical,
    control_feedback_x0,
    control_mkv,
    control_reference,
)
from .errors import NumericalFault, TEMeanVarError, ValidationError
from .estimators import ClassicalMeanVariance, PenalizedMeanVariance, ReferencePortfolio
from .expansion import (
    control_expansion,
    efficient_frontier_expanded,
    expansion_terms,
    mean_wealth_path,
    terminal_moments,
)
from .market import (
    MarketModel,
    PenaltySpec,
    ReferenceKind,
    build_market,
    covariance_from_vols_corr,
    estimate_params,
    market_from_covariance,
    reference_weights,
    risk_aversion_for_expected_return,
    risk_aversion_for_target,
    study_market,
)
from .montecarlo import (
    MisspecConfig,
    SimConfig,
    StudyResult,
    misspecification_study,
    sharpe,
    simulate_wealth,
    verify_weak_optimality,
)
from .riccati import RiccatiSolution, TimeGrid, gamma_sensitivity, solve_riccati, value_at_zero

__version__ = "0.1.0"
