"""Win-rate certificates and equilibrium solvers for alignment games with test-time scaling."""

from .engine import (
    EnumerationCapError,
    Estimate,
    WinrateQuery,
    best_pure_opponent,
    exact_winrate,
    mc_winrate,
    ranking_pure_closed_form,
)
from .instances import (
    InstanceSpec,
    condorcet_cycle_instance,
    majority_instance,
    uniform_pl_instance,
    uniform_rankings_instance,
)
from .prefcore import (
    MixtureOfProducts,
    Multiset,
    PLComponent,
    Policy,
    PreferenceModel,
    ProductPolicy,
    RankingComponent,
    Response,
    check_properties,
    load_model,
    model_winrate,
    pl_winrate,
    ranking_compare,
)
from .solvers import (
    CertificationReport,
    SelfPlayTrace,
    SolverConfig,
    certify,
    find_fixed_point,
    mwu_selfplay,
    nlhf_solve,
    pga_selfplay,
    pga_step,
    rlhf_solve,
    simplex_project,
    utility_gradient,
)

__version__ = "0.1.0"
