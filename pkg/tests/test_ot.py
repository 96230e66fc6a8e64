from __future__ import annotations

import itertools
import math
import os
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from conftest import numeric_grad, rel_err
from subgec import autodiff as ad
from subgec import ot
from subgec.ot import _kernels


def birkhoff_min(c: np.ndarray) -> float:
    k = c.shape[0]
    return min(sum(c[i, p[i]] for i in range(k)) / k for p in itertools.permutations(range(k)))


def lp_min(c: np.ndarray) -> float:
    a, b = c.shape
    rows = [np.kron(np.eye(a)[i], np.ones(b)) for i in range(a)]
    cols = [np.kron(np.ones(a), np.eye(b)[j]) for j in range(b)]
    res = linprog(c.ravel(), A_eq=np.array(rows + cols), b_eq=[1 / a] * a + [1 / b] * b, method="highs")
    return float(res.fun)


def test_cost_matrix_values():
    c = ot.cost_matrix([[1.0, 0.0]], [[2.0, 0.0], [-3.0, 0.0]], tau=1.0)
    np.testing.assert_allclose(c, [[math.exp(-1), math.exp(1)]])
    with pytest.raises(ValueError):
        ot.cost_matrix([[1.0]], [[1.0]], tau=0.0)


def test_wasserstein_identical_unit_clouds():
    x = np.eye(2)
    val, plan = ot.wasserstein(x, x, 1.0)
    assert abs(val - math.exp(-1)) < 1e-12
    np.testing.assert_allclose(plan.plan, np.eye(2) / 2)


def test_wasserstein_constant_cost():
    x = np.ones((3, 2))
    val, _ = ot.wasserstein(x, x[:2], 0.7)
    assert abs(val - math.exp(-1 / 0.7)) < 1e-12


def test_empty_subgraph_rejected():
    with pytest.raises(ValueError):
        ot.wasserstein(np.zeros((0, 2)), np.ones((1, 2)), 1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_exact_matches_birkhoff(k, seed):
    c = np.random.default_rng(seed).random((k, k))
    plan = ot.solve_exact(c)
    assert abs(np.sum(plan.plan * c) - birkhoff_min(c)) < 1e-12
    assert plan.marginal_error() < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 2**31 - 1), st.booleans())
def test_exact_matches_lp_rectangular(a, b, seed, ties):
    c = np.random.default_rng(seed).random((a, b))
    if ties:
        c = np.round(c * 3)
    plan = ot.solve_exact(c)
    assert abs(np.sum(plan.plan * c) - lp_min(c)) < 1e-9
    assert plan.marginal_error() < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_assignment_is_a_permutation(n, seed):
    col = _kernels.assignment(np.random.default_rng(seed).random((n, n)))
    assert sorted(col.tolist()) == list(range(n))


def test_sinkhorn_bounds():
    rng = np.random.default_rng(11)
    for _ in range(30):
        c = rng.random((6, 6))
        exact = np.sum(ot.solve_exact(c).plan * c)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ot.ConvergenceWarning)
            loose = ot.solve_sinkhorn(c, ot.Sinkhorn(eps=1e-2))
            tight = ot.solve_sinkhorn(c, ot.Sinkhorn(eps=1e-3))
        assert np.sum(loose.plan * c) >= exact - 1e-9
        assert abs(np.sum(tight.plan * c) - exact) < 5e-3
        assert loose.marginal_error() < 1e-8 and tight.marginal_error() < 1e-8


def test_sinkhorn_warns_when_capped():
    c = np.random.default_rng(1).random((5, 5))
    with pytest.warns(ot.ConvergenceWarning):
        ot.solve_sinkhorn(c, ot.Sinkhorn(eps=1e-4, iters=3))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_w_symmetric(a, b, seed):
    rng = np.random.default_rng(seed)
    xa, xb = rng.normal(size=(a, 3)), rng.normal(size=(b, 3))
    assert abs(ot.wasserstein(xa, xb, 0.5)[0] - ot.wasserstein(xb, xa, 0.5)[0]) < 1e-12


# ---------------------------------------------------------------- Gromov-Wasserstein


def test_gw_identical_is_zero():
    rng = np.random.default_rng(2)
    for k in range(1, 11):
        x = rng.normal(size=(k, 4))
        adj = np.zeros((k, k))
        val, plan = ot.gromov_wasserstein(adj, x, adj, x, 0.5)
        assert val < 1e-12
        assert plan.marginal_error() < 1e-12


def test_gw_single_nodes_zero():
    val, _ = ot.gromov_wasserstein(np.zeros((1, 1)), [[1.0, 0.0]], np.zeros((1, 1)), [[0.0, 1.0]], 1.0)
    assert val == 0.0


def test_gw_two_by_two_matches_grid():
    rng = np.random.default_rng(5)
    for _ in range(20):
        da = ot.cost_matrix(*(2 * [rng.normal(size=(2, 3))]), 1.0)
        db = ot.cost_matrix(*(2 * [rng.normal(size=(2, 3))]), 1.0)
        best = min(
            ot.gw_objective(da, db, np.array([[t, 0.5 - t], [0.5 - t, t]]))
            for t in np.linspace(0.0, 0.5, 5001)
        )
        val, _ = ot.gromov_wasserstein_costs(da, db)
        assert abs(val - best) < 1e-6


def test_gw_contract_errors():
    x = np.ones((2, 2))
    with pytest.raises(ValueError):
        ot.gromov_wasserstein(np.zeros((2, 3)), x, np.zeros((2, 2)), x, 1.0)
    with pytest.raises(ValueError):
        ot.gromov_wasserstein(np.zeros((3, 3)), x, np.zeros((2, 2)), x, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 2**31 - 1))
def test_gw_value_plan_and_monotone_trace(a, b, seed):
    rng = np.random.default_rng(seed)
    da = ot.cost_matrix(*(2 * [rng.normal(size=(a, 3))]), 0.5)
    db = ot.cost_matrix(*(2 * [rng.normal(size=(b, 3))]), 0.5)
    val, plan, traces = ot.gromov_wasserstein_costs(da, db, return_trace=True)
    assert abs(val - ot.gw_objective(da, db, plan.plan)) < 1e-10 * max(1.0, val)
    assert plan.marginal_error() < 1e-12
    assert np.all(plan.plan >= 0)
    for tr in traces:
        assert np.all(np.diff(tr) <= 1e-12)
    assert val <= min(tr[-1] for tr in traces) + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_gw_symmetric(a, b, seed):
    rng = np.random.default_rng(seed)
    da = ot.cost_matrix(*(2 * [rng.normal(size=(a, 3))]), 0.5)
    db = ot.cost_matrix(*(2 * [rng.normal(size=(b, 3))]), 0.5)
    ab = ot.gromov_wasserstein_costs(da, db)[0]
    ba = ot.gromov_wasserstein_costs(db, da)[0]
    assert abs(ab - ba) < 1e-6


def test_product_gradient_matches_brute_force():
    rng = np.random.default_rng(3)
    for a, b in [(1, 1), (3, 5), (6, 2), (7, 7)]:
        da, db = rng.random((a, a)), rng.random((b, b))
        brute = np.abs(da[:, :, None, None] - db[None, None, :, :]).sum(axis=(1, 3)) / (a * b)
        np.testing.assert_allclose(_kernels._product_gradient(da, db), brute, atol=1e-14)


def test_gw_cost_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    da, db = rng.random((4, 4)), rng.random((3, 3))
    _, plan = ot.gromov_wasserstein_costs(da, db)
    ga, gb = _kernels.gw_cost_gradient(da, db, plan.plan)
    fa = numeric_grad(lambda: ot.gw_objective(da, db, plan.plan), da)
    fb = numeric_grad(lambda: ot.gw_objective(da, db, plan.plan), db)
    assert rel_err(ga, fa) < 1e-6 and rel_err(gb, fb) < 1e-6


# ---------------------------------------------------------------- batched table


def _batch(seed=0, sizes=(3, 2, 4)):
    rng = np.random.default_rng(seed)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return rng.normal(size=(offsets[-1], 4)), rng.normal(size=(offsets[-1], 4)), offsets


def test_pair_lists_counts():
    pa, pb, emb = ot.pair_lists(4)
    assert emb.sum() == 16 and (~emb).sum() == 6
    assert np.all(pa[~emb] < pb[~emb])


@pytest.mark.parametrize("kind", ["w", "gw"])
def test_distance_table_matches_single_pair_solvers(kind):
    orig, emb, off = _batch()
    s = off.size - 1
    table = ot.distance_table(orig, emb, off, 0.7, kind).data
    blk = lambda x, i: x[off[i] : off[i + 1]]  # noqa: E731
    for i in range(s):
        for j in range(s):
            if kind == "w":
                d_e = ot.wasserstein(blk(orig, i), blk(emb, j), 0.7)[0]
                d_o = ot.wasserstein(blk(orig, i), blk(orig, j), 0.7)[0]
            else:
                ca = ot.cost_matrix(blk(orig, i), blk(orig, i), 0.7)
                d_e = ot.gromov_wasserstein_costs(ca, ot.cost_matrix(blk(emb, j), blk(emb, j), 0.7))[0]
                d_o = ot.gromov_wasserstein_costs(ca, ot.cost_matrix(blk(orig, j), blk(orig, j), 0.7))[0]
            assert abs(table[i, j] - d_e) < 1e-12
            if i != j:
                assert abs(table[i, s + j] - d_o) < 1e-12
        assert table[i, s + i] == 0.0


def _table_loss(kind, weights):
    def run(orig, emb, off):
        tape = ad.Tape()
        to, te = tape.watch(orig), tape.watch(emb)
        loss = ad.reduce_sum(ad.mul(ot.distance_table(to, te, off, 0.5, kind), weights))
        g = ad.backward(tape, loss)
        return g[to.node], g[te.node]

    return run


def test_w_table_gradient_matches_finite_differences():
    orig, emb, off = _batch(seed=1)
    weights = np.random.default_rng(9).normal(size=(3, 6))
    go, ge = _table_loss("w", weights)(orig, emb, off)

    def f():
        return float(np.sum(ot.distance_table(orig, emb, off, 0.5, "w").data * weights))

    assert rel_err(go, numeric_grad(f, orig, 1e-7)) < 1e-5
    assert rel_err(ge, numeric_grad(f, emb, 1e-7)) < 1e-5


def _blocks(x, off):
    return [x[off[i] : off[i + 1]] for i in range(off.size - 1)]


def test_gw_table_equals_single_pair_solver_exactly():
    for seed in range(20):
        orig, emb, off = _batch(seed=seed, sizes=(3, 2, 4, 4))
        s = off.size - 1
        table = ot.distance_table(orig, emb, off, 0.5, "gw").data
        bo, be = _blocks(orig, off), _blocks(emb, off)
        for i in range(s):
            for j in range(s):
                adj_i, adj_j = np.zeros((len(bo[i]),) * 2), np.zeros((len(bo[j]),) * 2)
                assert table[i, j] == ot.gromov_wasserstein(adj_i, bo[i], adj_j, be[j], 0.5)[0]
                if i != j:
                    assert table[i, s + j] == ot.gromov_wasserstein(adj_i, bo[i], adj_j, bo[j], 0.5)[0]


def test_gw_table_gradient_matches_fixed_plan_objective():
    """Frank-Wolfe output jumps where the LP oracle switches vertex, so the
    reference differentiates the brute-force objective with every plan frozen."""
    orig, emb, off = _batch(seed=1)
    s = off.size - 1
    weights = np.random.default_rng(9).normal(size=(s, 2 * s))
    go, ge = _table_loss("gw", weights)(orig, emb, off)
    intra = lambda x, i: ot.cost_matrix(_blocks(x, off)[i], _blocks(x, off)[i], 0.5)  # noqa: E731
    plans_e = {(i, j): ot.gromov_wasserstein_costs(intra(orig, i), intra(emb, j))[1].plan
               for i in range(s) for j in range(s)}
    plans_o = {(i, j): ot.gromov_wasserstein_costs(intra(orig, i), intra(orig, j))[1].plan
               for i in range(s) for j in range(s) if i < j}

    def f():
        tot = 0.0
        for i in range(s):
            for j in range(s):
                tot += weights[i, j] * ot.gw_objective(intra(orig, i), intra(emb, j), plans_e[i, j])
                if i != j:
                    a, b = min(i, j), max(i, j)
                    tot += weights[i, s + j] * ot.gw_objective(intra(orig, a), intra(orig, b), plans_o[a, b])
        return tot

    assert rel_err(go, numeric_grad(f, orig)) < 1e-6
    assert rel_err(ge, numeric_grad(f, emb)) < 1e-6


def test_distance_table_sinkhorn_close_to_exact():
    orig, emb, off = _batch(seed=2)
    exact = ot.distance_table(orig, emb, off, 1.0, "w").data
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ot.ConvergenceWarning)
        approx = ot.distance_table(orig, emb, off, 1.0, "w", ot.Sinkhorn(eps=1e-3)).data
    assert np.max(np.abs(exact - approx)) < 5e-3


def test_distance_table_validation():
    orig, emb, off = _batch()
    with pytest.raises(ValueError):
        ot.distance_table(orig, emb, off, 0.0)
    with pytest.raises(ValueError):
        ot.distance_table(orig, emb[:-1], off, 1.0)
    with pytest.raises(ValueError):
        ot.distance_table(orig, emb, off, 1.0, kind="fgw")


def test_thread_cap(monkeypatch):
    import numba

    monkeypatch.setenv("SUBGEC_THREADS", "1")
    ot.configure_threads()
    assert numba.get_num_threads() == 1
    monkeypatch.delenv("SUBGEC_THREADS")
    ot.configure_threads()
    assert numba.get_num_threads() == numba.config.NUMBA_NUM_THREADS
    assert os.environ.get("SUBGEC_THREADS") is None
