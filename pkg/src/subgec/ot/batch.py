"""All-pairs OT distances for a contrastive batch, recorded on the tape.

For anchors i, j the table has shape (S, 2S):

    table[i, j]     = D(orig_i, emb_j)
    table[i, S + j] = D(orig_i, orig_j)     (diagonal unused, set to 0)

Every similarity the solvers need is a block of one of three Gram matrices
over the gathered, row-normalised features, so the backward pass reduces to
three dense products. Plans are held fixed in the backward pass.
"""

from __future__ import annotations

import os
import warnings

import numba
import numpy as np

from .. import autodiff as ad
from . import _kernels
from .solvers import NORM_EPS, ConvergenceWarning, FrankWolfe, Sinkhorn, cost_matrix

_threads_applied = None

# the TBB layer probes (and warns about) system TBB builds; prefer OpenMP
if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ and "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


def configure_threads() -> None:
    """Honour SUBGEC_THREADS as a cap on the OT worker pool."""
    global _threads_applied
    raw = os.environ.get("SUBGEC_THREADS")
    want = numba.config.NUMBA_NUM_THREADS
    if raw:
        want = max(1, min(int(raw), want))
    if want != _threads_applied:
        numba.set_num_threads(want)
        _threads_applied = want


def pair_lists(s: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(a, b, b_is_embedding) for all orig-emb pairs and the orig-orig pairs with a < b."""
    ii, jj = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    oe_a, oe_b = ii.ravel(), jj.ravel()
    upper = ii < jj
    oo_a, oo_b = ii[upper], jj[upper]
    pa = np.concatenate([oe_a, oo_a]).astype(np.int64)
    pb = np.concatenate([oe_b, oo_b]).astype(np.int64)
    emb = np.concatenate([np.ones(oe_a.size, bool), np.zeros(oo_a.size, bool)])
    return pa, pb, emb


def _normalize(z: np.ndarray):
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return z / (norms + NORM_EPS), norms


def _normalize_backward(g: np.ndarray, z: np.ndarray, norms: np.ndarray) -> np.ndarray:
    s = norms + NORM_EPS
    safe = np.where(norms > 0, norms, 1.0)
    radial = np.where(norms > 0, np.sum(g * z, axis=1, keepdims=True) / (s * s * safe), 0.0)
    return g / s - z * radial


def _intra_costs(x: np.ndarray, offsets: np.ndarray, kmax: int, tau: float) -> np.ndarray:
    """Per-subgraph cost blocks, padded to ``kmax`` columns.

    Built with the single-pair ``cost_matrix`` so a batched GW value equals
    the standalone solver bit for bit; Frank-Wolfe may otherwise settle in a
    different local optimum after a one-ulp change in its input.
    """
    out = np.zeros((x.shape[0], kmax))
    for r, e in zip(offsets[:-1], offsets[1:]):
        out[r:e, : e - r] = cost_matrix(x[r:e], x[r:e], tau)
    return out


def distance_table(orig, emb, offsets, tau: float, kind: str = "w", solver=None) -> ad.Tensor:
    """(S, 2S) table of W (``kind="w"``) or GW (``kind="gw"``) distances.

    ``orig`` and ``emb`` are the gathered subgraph rows (R x F, tracked or
    not); ``offsets`` (S + 1) delimits each anchor's block of rows.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    orig, emb = ad._as_tensor(orig), ad._as_tensor(emb)
    offsets = np.asarray(offsets, dtype=np.int64)
    s = offsets.size - 1
    if s < 1 or np.any(np.diff(offsets) < 1):
        raise ValueError("every anchor needs a non-empty subgraph")
    if orig.shape != emb.shape or orig.shape[0] != offsets[-1]:
        raise ValueError("orig/emb row blocks do not match offsets")
    configure_threads()
    uo, no = _normalize(orig.data)
    ue, ne = _normalize(emb.data)
    pa, pb, b_emb = pair_lists(s)
    kmax = int(np.diff(offsets).max())
    plans = np.zeros((pa.size, kmax, kmax))

    if kind == "w":
        g_oo = np.ascontiguousarray(uo @ uo.T)
        g_oe = np.ascontiguousarray(uo @ ue.T)
        sk = solver if isinstance(solver, Sinkhorn) else None
        vals, bad = _kernels.batch_wasserstein(
            g_oe, g_oo, offsets, pa, pb, b_emb, float(tau),
            sk is not None, sk.eps if sk else 0.0, sk.iters if sk else 0, plans,
        )
        if bad.any():
            warnings.warn(
                f"Sinkhorn did not converge on {int(bad.sum())} pairs", ConvergenceWarning
            )
        g_other = g_oe
    elif kind == "gw":
        fw = solver if isinstance(solver, FrankWolfe) else FrankWolfe()
        c_o = _intra_costs(orig.data, offsets, kmax, tau)
        c_e = _intra_costs(emb.data, offsets, kmax, tau)
        vals = _kernels.batch_gromov(c_o, c_e, offsets, pa, pb, b_emb, fw.max_iter, fw.tol, plans)
        g_oo = g_other = None
    else:
        raise ValueError(f"unknown distance kind {kind!r}")

    n_oe = s * s
    table = np.zeros((s, 2 * s))
    table[:, :s] = vals[:n_oe].reshape(s, s)
    oo = np.zeros((s, s))
    oo[pa[n_oe:], pb[n_oe:]] = vals[n_oe:]
    table[:, s:] = oo + oo.T

    def rule(grad):
        gp = np.empty(pa.size)
        gp[:n_oe] = grad[:, :s].ravel()
        go = grad[:, s:]
        gp[n_oe:] = go[pa[n_oe:], pb[n_oe:]] + go[pb[n_oe:], pa[n_oe:]]
        rows = orig.shape[0]
        d_oo = np.zeros((rows, rows))
        d_other = np.zeros((rows, rows))
        if kind == "w":
            _kernels.batch_wasserstein_backward(
                g_other, g_oo, offsets, pa, pb, b_emb, float(tau), plans, gp, d_other, d_oo
            )
            d_uo = d_other @ ue + (d_oo + d_oo.T) @ uo
            d_ue = d_other.T @ uo
        else:
            _kernels.batch_gromov_backward(
                c_o, c_e, offsets, pa, pb, b_emb, float(tau), plans, gp, d_oo, d_other
            )
            d_uo = (d_oo + d_oo.T) @ uo
            d_ue = (d_other + d_other.T) @ ue
        return (
            _normalize_backward(d_uo, orig.data, no),
            _normalize_backward(d_ue, emb.data, ne),
        )

    return ad.custom(f"{kind}-distance-table", table, (orig, emb), rule)
