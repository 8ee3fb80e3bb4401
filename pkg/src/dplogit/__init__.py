"""Moment construction, GMM estimation, and counterfactuals for dynamic
panel logit models with fixed effects."""
from __future__ import annotations

from .models import (
    ModelSpec,
    PanelData,
    PanelUnit,
    Theta,
    TransitionState,
    enumerate_histories,
    history_probability,
    transition_distribution,
    transition_probability,
    validate_dataset,
)
from .transitions import (
    ChainSpec,
    phi,
    phi_ar1,
    phi_arp,
    phi_mar1,
    phi_network,
    phi_var1,
    psi_chain,
    psi_chain_grad,
    shared_evaluation,
    zeta,
    zeta_ar1,
    zeta_arp,
    zeta_mar1,
    zeta_network,
    zeta_var1,
)
from .moments import (
    MomentId,
    arp_moment_count,
    efficient_score_ar1_pure,
    enumerate_moments,
    enumerate_pure_moments,
    honore_weidner_psi,
    kitazawa_forms,
    psi,
    psi_limit_ar2,
    psi_matrix,
    psi_matrix_grad,
    rescale_factor,
    rescale_factors,
    static_logit_psi,
)
from .oracle import (
    LambdaMatrix,
    RankResult,
    build_lambda_matrix,
    check_partial_fractions,
    conditional_expectation,
    rank_of_image,
)
from .gmm import (
    EfficiencyBound,
    EstimatorConfig,
    GmmProblem,
    GmmResult,
    InstrumentSpec,
    asymptotic_variance,
    default_instruments,
    efficiency_bound_ar1_t3,
    estimate,
    gmm_objective,
    instrument_matrix,
    stack_moments,
)
from .counterfactuals import (
    CfEstimate,
    CovariateBand,
    PartialFractionPlan,
    PlanTerm,
    Subpop,
    ame,
    average_transition_probability,
    multiperiod_average,
    plan_multiperiod,
    subpop_mask,
)
from .simulation import (
    Design,
    McResult,
    RepRecord,
    ar_design,
    mar_design,
    monte_carlo,
    net_design,
    simulate,
    var_design,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
