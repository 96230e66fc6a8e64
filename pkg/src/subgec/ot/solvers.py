"""Single-pair Wasserstein and Gromov-Wasserstein distances on node features.

The ground cost between two feature rows is ``exp(-cos(x, y) / tau)``; the
Gromov-Wasserstein intra-set distances use the same cost within each set.
Marginals are uniform throughout.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels

log = logging.getLogger(__name__)

NORM_EPS = 1e-12
FW_MAX_ITER = 50
FW_TOL = 1e-7


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Sinkhorn:
    """Entropic solver settings: regularisation ``eps`` and an iteration cap."""

    eps: float = 1e-2
    iters: int = 20000
    tol: float = 1e-7


@dataclass(frozen=True)
class FrankWolfe:
    max_iter: int = FW_MAX_ITER
    tol: float = FW_TOL


@dataclass(frozen=True)
class TransportPlan:
    """Coupling ``plan`` between marginals ``u`` (rows) and ``v`` (columns)."""

    plan: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def marginal_error(self) -> float:
        return max(
            np.abs(self.plan.sum(axis=1) - self.u).max(),
            np.abs(self.plan.sum(axis=0) - self.v).max(),
        )


def _uniform(k: int) -> np.ndarray:
    return np.full(k, 1.0 / k)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / (np.linalg.norm(x, axis=1, keepdims=True) + NORM_EPS)


def cost_matrix(xa, xb, tau: float) -> np.ndarray:
    """Entry (m, n) is exp(-cos(xa[m], xb[n]) / tau)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    xa = np.atleast_2d(np.asarray(xa, dtype=np.float64))
    xb = np.atleast_2d(np.asarray(xb, dtype=np.float64))
    if xa.shape[1] != xb.shape[1]:
        raise ValueError(f"feature widths differ: {xa.shape[1]} vs {xb.shape[1]}")
    return np.exp(-(normalize_rows(xa) @ normalize_rows(xb).T) / tau)


def _check_nonempty(*arrays) -> None:
    for a in arrays:
        if np.asarray(a).shape[0] == 0:
            raise ValueError("empty subgraph")


def solve_exact(cost) -> TransportPlan:
    """Exact optimal plan for a cost matrix under uniform marginals."""
    c = np.ascontiguousarray(cost, dtype=np.float64)
    _check_nonempty(c)
    a, b = c.shape
    return TransportPlan(_kernels.emd_uniform(c), _uniform(a), _uniform(b))


def solve_sinkhorn(cost, solver: Sinkhorn = Sinkhorn()) -> TransportPlan:
    """Entropic plan, rounded onto the transport polytope so marginals are exact."""
    c = np.ascontiguousarray(cost, dtype=np.float64)
    _check_nonempty(c)
    plan, converged, iters = _kernels.sinkhorn_log(c, solver.eps, solver.iters, solver.tol)
    if not converged:
        warnings.warn(
            f"Sinkhorn did not converge in {iters} iterations (eps={solver.eps})",
            ConvergenceWarning,
            stacklevel=2,
        )
    a, b = c.shape
    return TransportPlan(plan, _uniform(a), _uniform(b))


def wasserstein(xa, xb, tau: float, solver="exact") -> tuple[float, TransportPlan]:
    """W_1 between the uniform point clouds ``xa`` and ``xb`` under the cosine ground cost."""
    _check_nonempty(xa, xb)
    c = cost_matrix(xa, xb, tau)
    plan = solve_exact(c) if solver == "exact" else solve_sinkhorn(c, solver)
    return float(np.sum(plan.plan * c)), plan


def gw_objective(da, db, plan) -> float:
    """sum_{m,m',n,n'} T[m,n] T[m',n'] |da[m,m'] - db[n,n']|, by brute force."""
    diff = np.abs(da[:, :, None, None] - db[None, None, :, :])  # m, m', n, n'
    return float(np.einsum("mn,pq,mpnq->", plan, plan, diff))


def gromov_wasserstein_costs(da, db, solver: FrankWolfe = FrankWolfe(), return_trace=False):
    """Frank-Wolfe GW on precomputed intra-set distance matrices."""
    da = np.ascontiguousarray(da, dtype=np.float64)
    db = np.ascontiguousarray(db, dtype=np.float64)
    for name, d in (("first", da), ("second", db)):
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError(f"{name} distance matrix must be square, got {d.shape}")
    _check_nonempty(da, db)
    trace = np.empty((2, solver.max_iter + 1))
    val, plan = _kernels.gw_frank_wolfe(da, db, solver.max_iter, solver.tol, trace)
    tp = TransportPlan(plan, _uniform(da.shape[0]), _uniform(db.shape[0]))
    if return_trace:
        return float(val), tp, [row[~np.isnan(row)] for row in trace]
    return float(val), tp


def gromov_wasserstein(adj_a, xa, adj_b, xb, tau: float, solver: FrankWolfe = FrankWolfe()):
    """GW between two subgraphs.

    The intra-graph distances come from node features only; the adjacency
    arguments are validated but do not enter the objective.
    """
    for name, adj, x in (("first", adj_a, xa), ("second", adj_b, xb)):
        adj = np.asarray(adj)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError(f"{name} adjacency must be square, got {adj.shape}")
        if adj.shape[0] != np.asarray(x).shape[0]:
            raise ValueError(f"{name} adjacency and feature row counts differ")
    return gromov_wasserstein_costs(cost_matrix(xa, xa, tau), cost_matrix(xb, xb, tau), solver)
