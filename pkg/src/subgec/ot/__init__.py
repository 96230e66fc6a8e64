from .batch import configure_threads, distance_table, pair_lists
from .solvers import (
    ConvergenceWarning,
    FrankWolfe,
    Sinkhorn,
    TransportPlan,
    cost_matrix,
    gromov_wasserstein,
    gromov_wasserstein_costs,
    gw_objective,
    solve_exact,
    solve_sinkhorn,
    wasserstein,
)

__all__ = [
    "ConvergenceWarning",
    "FrankWolfe",
    "Sinkhorn",
    "TransportPlan",
    "configure_threads",
    "cost_matrix",
    "distance_table",
    "gromov_wasserstein",
    "gromov_wasserstein_costs",
    "gw_objective",
    "pair_lists",
    "solve_exact",
    "solve_sinkhorn",
    "wasserstein",
]
