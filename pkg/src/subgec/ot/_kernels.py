"""Compiled transport kernels.

All problems here have uniform marginals u = 1/a, v = 1/b. Scaling by
lcm(a, b) turns them into integer transportation problems (supply b/g per
row, demand a/g per column, g = gcd(a, b)), which successive shortest paths
solves exactly in a bounded number of augmentations.
"""

import numpy as np
from numba import njit, prange

INF = np.inf


@njit(cache=True)
def _gcd(a, b):
    while b:
        a, b = b, a % b
    return a


@njit(cache=True)
def assignment(C):
    """Min-cost perfect matching on a square cost; returns the column of each row.

    Column reduction seeds a partial matching, then each free row is matched
    by a Dijkstra augmenting path over reduced costs C[i, j] - v[j].
    """
    n = C.shape[0]
    v = np.empty(n)
    x = np.full(n, -1, dtype=np.int64)  # column of row
    y = np.full(n, -1, dtype=np.int64)  # row of column
    for j in range(n):
        imin = 0
        m = C[0, j]
        for i in range(1, n):
            if C[i, j] < m:
                m = C[i, j]
                imin = i
        v[j] = m
        if x[imin] < 0:
            x[imin] = j
            y[j] = imin
    d = np.empty(n)
    pred = np.empty(n, dtype=np.int64)
    done = np.empty(n, dtype=np.bool_)
    order = np.empty(n, dtype=np.int64)
    for f in range(n):
        if x[f] >= 0:
            continue
        for j in range(n):
            d[j] = C[f, j] - v[j]
            pred[j] = f
            done[j] = False
        nd = 0
        while True:
            js = -1
            mind = INF
            for j in range(n):
                if not done[j] and d[j] < mind:
                    mind = d[j]
                    js = j
            done[js] = True
            order[nd] = js
            nd += 1
            if y[js] < 0:
                break
            i = y[js]
            h = C[i, js] - v[js] - mind
            for k in range(n):
                if not done[k]:
                    c = C[i, k] - v[k] - h
                    if c < d[k]:
                        d[k] = c
                        pred[k] = i
        for t in range(nd - 1):
            j = order[t]
            v[j] += d[j] - mind
        j = js
        while True:
            i = pred[j]
            y[j] = i
            nxt = x[i]
            x[i] = j
            if i == f:
                break
            j = nxt
    return x


@njit(cache=True)
def emd_uniform(C):
    """Exact optimal plan for cost ``C`` (a x b) with uniform marginals."""
    a, b = C.shape
    if a == b:  # an optimal vertex is a scaled permutation
        col = assignment(C)
        T = np.zeros((a, b))
        for i in range(a):
            T[i, col[i]] = 1.0 / a
        return T
    g = _gcd(a, b)
    supply = b // g
    demand = a // g
    total = a * supply
    flow = np.zeros((a, b), dtype=np.int64)
    rs = np.full(a, supply, dtype=np.int64)
    rd = np.full(b, demand, dtype=np.int64)
    # dual potentials; reduced cost of arc i->j is C[i, j] + u[i] - v[j] >= 0
    u = np.zeros(a)
    v = np.empty(b)
    for j in range(b):
        m = C[0, j]
        for i in range(1, a):
            if C[i, j] < m:
                m = C[i, j]
        v[j] = m
    n = a + b
    dist = np.empty(n)
    done = np.empty(n, dtype=np.bool_)
    pred = np.empty(n, dtype=np.int64)
    sent = 0
    while sent < total:
        for x in range(n):
            dist[x] = INF
            done[x] = False
            pred[x] = -1
        for i in range(a):
            if rs[i] > 0:
                dist[i] = 0.0
        target = -1
        dt = INF
        while True:
            best = -1
            bd = INF
            for x in range(n):
                if not done[x] and dist[x] < bd:
                    best = x
                    bd = dist[x]
            if best == -1:
                break
            done[best] = True
            if best >= a:
                j = best - a
                if rd[j] > 0:
                    target = best
                    dt = bd
                    break
                for i in range(a):
                    if flow[i, j] > 0 and not done[i]:
                        rc = v[j] - C[i, j] - u[i]
                        if rc < 0.0:
                            rc = 0.0
                        nd = bd + rc
                        if nd < dist[i]:
                            dist[i] = nd
                            pred[i] = best
            else:
                i = best
                for j in range(b):
                    y = a + j
                    if not done[y]:
                        rc = C[i, j] + u[i] - v[j]
                        if rc < 0.0:
                            rc = 0.0
                        nd = bd + rc
                        if nd < dist[y]:
                            dist[y] = nd
                            pred[y] = i
        if target == -1:  # cannot happen for a balanced problem
            break
        # augmentation amount along the path
        delta = rd[target - a]
        y = target
        while True:
            i = pred[y]
            if pred[i] == -1:
                if rs[i] < delta:
                    delta = rs[i]
                break
            jb = pred[i] - a
            if flow[i, jb] < delta:
                delta = flow[i, jb]
            y = pred[i]
        y = target
        while True:
            i = pred[y]
            flow[i, y - a] += delta
            if pred[i] == -1:
                rs[i] -= delta
                break
            jb = pred[i] - a
            flow[i, jb] -= delta
            y = pred[i]
        rd[target - a] -= delta
        sent += delta
        for x in range(n):
            d = dist[x]
            if d > dt:
                d = dt
            if x < a:
                u[x] += d
            else:
                v[x - a] += d
    return flow.astype(np.float64) / total


@njit(cache=True)
def _logsumexp(x):
    m = -INF
    for t in x:
        if t > m:
            m = t
    if m == -INF:
        return m
    s = 0.0
    for t in x:
        s += np.exp(t - m)
    return m + np.log(s)


@njit(cache=True)
def round_to_marginals(P, r, c):
    """Project a near-feasible plan onto the transport polytope."""
    a, b = P.shape
    T = P.copy()
    for i in range(a):
        s = T[i].sum()
        if s > r[i]:
            T[i] *= r[i] / s
    for j in range(b):
        s = T[:, j].sum()
        if s > c[j]:
            T[:, j] *= c[j] / s
    er = r - T.sum(axis=1)
    ec = c - T.sum(axis=0)
    tot = er.sum()
    if tot > 0:
        for i in range(a):
            for j in range(b):
                T[i, j] += er[i] * ec[j] / tot
    return T


@njit(cache=True)
def _sinkhorn_stage(C, eps, f, gpot, logu, logv, max_iter, tol):
    a, b = C.shape
    row = np.empty(b)
    col = np.empty(a)
    for it in range(1, max_iter + 1):
        for i in range(a):
            for j in range(b):
                row[j] = (gpot[j] - C[i, j]) / eps + logv[j]
            f[i] = -eps * _logsumexp(row)
        for j in range(b):
            for i in range(a):
                col[i] = (f[i] - C[i, j]) / eps + logu[i]
            gpot[j] = -eps * _logsumexp(col)
        if it % 10 == 0 or it == max_iter:
            # columns are exact after the g-update; check rows
            err = 0.0
            for i in range(a):
                s = 0.0
                for j in range(b):
                    s += np.exp((f[i] + gpot[j] - C[i, j]) / eps + logu[i] + logv[j])
                err += abs(s - 1.0 / a)
            if err < tol:
                return True, it
    return False, max_iter


@njit(cache=True)
def sinkhorn_log(C, eps, max_iter, tol):
    """Log-domain Sinkhorn with eps-annealing (warm-started from eps = 1).

    Returns (plan rounded onto the polytope, converged flag, iterations at
    the target eps).
    """
    a, b = C.shape
    logu = np.log(np.full(a, 1.0 / a))
    logv = np.log(np.full(b, 1.0 / b))
    f = np.zeros(a)
    gpot = np.zeros(b)
    e = 1.0
    while e > eps * 10.0:
        _sinkhorn_stage(C, e, f, gpot, logu, logv, max_iter, tol)
        e *= 0.1
    converged, it = _sinkhorn_stage(C, eps, f, gpot, logu, logv, max_iter, tol)
    P = np.empty((a, b))
    for i in range(a):
        for j in range(b):
            P[i, j] = np.exp((f[i] + gpot[j] - C[i, j]) / eps + logu[i] + logv[j])
    return round_to_marginals(P, np.full(a, 1.0 / a), np.full(b, 1.0 / b)), converged, it


# ---------------------------------------------------------------- Gromov-Wasserstein


@njit(cache=True)
def sorted_rows(D):
    """Each row of ``D`` sorted, plus running sums of the sorted rows."""
    k = D.shape[0]
    sd = np.empty((k, k))
    pre = np.empty((k, k + 1))
    for m in range(k):
        sd[m] = np.sort(D[m])
        pre[m, 0] = 0.0
        for t in range(k):
            pre[m, t + 1] = pre[m, t] + sd[m, t]
    return sd, pre


@njit(cache=True)
def _product_gradient_sorted(sa, sb, pb):
    a = sa.shape[0]
    b = sb.shape[0]
    G = np.empty((a, b))
    for m in range(a):
        for n in range(b):
            ytot = pb[n, b]
            acc = 0.0
            c = 0
            for t in range(a):
                xv = sa[m, t]
                while c < b and sb[n, c] <= xv:
                    c += 1
                below = pb[n, c]
                acc += xv * (2 * c - b) + ytot - 2.0 * below
            G[m, n] = acc / (a * b)
    return G


@njit(cache=True)
def _product_gradient(Da, Db):
    """G[m, n] = sum_{m', n'} |Da[m, m'] - Db[n, n']| / (a b), via sorted merges."""
    sa, _ = sorted_rows(Da)
    sb, pb = sorted_rows(Db)
    return _product_gradient_sorted(sa, sb, pb)


@njit(cache=True)
def _sparse_gradient(Da, Db, T):
    """G[m, n] = sum_{m', n'} T[m', n'] |Da[m, m'] - Db[n, n']| over supp(T)."""
    a = Da.shape[0]
    b = Db.shape[0]
    G = np.zeros((a, b))
    for mp in range(a):
        for nq in range(b):
            t = T[mp, nq]
            if t == 0.0:
                continue
            for m in range(a):
                x = Da[m, mp]
                for n in range(b):
                    G[m, n] += t * abs(x - Db[n, nq])
    return G


@njit(cache=True)
def northwest_corner(a, b):
    """Staircase coupling of uniform marginals; the identity scaled by 1/a when a == b."""
    T = np.zeros((a, b))
    r = np.full(a, 1.0 / a)
    c = np.full(b, 1.0 / b)
    i = 0
    j = 0
    while i < a and j < b:
        m = min(r[i], c[j])
        T[i, j] = m
        r[i] -= m
        c[j] -= m
        if r[i] <= c[j]:
            i += 1
        else:
            j += 1
    return T


@njit(cache=True)
def gw_frank_wolfe(Da, Db, max_iter, tol, trace):
    if _swap(Da, Db):
        val, plan = gw_frank_wolfe_from(Db, Da, _product_gradient(Db, Da), max_iter, tol, trace)
        return val, plan.T.copy()
    return gw_frank_wolfe_from(Da, Db, _product_gradient(Da, Db), max_iter, tol, trace)


@njit(cache=True)
def _swap(Da, Db):
    """Canonical orientation: smaller set first, ties broken lexicographically.

    Frank-Wolfe is a local method and the LP oracle breaks ties by position,
    so solving GW(A, B) and GW(B, A) in one orientation keeps them equal.
    """
    a = Da.shape[0]
    b = Db.shape[0]
    if a != b:
        return a > b
    for m in range(a):
        for n in range(a):
            if Da[m, n] != Db[m, n]:
                return Da[m, n] > Db[m, n]
    return False


@njit(cache=True, fastmath=True)
def _perm_gradient(Da, Dbp, w, out):
    """out[m, n] = w sum_m' |Da[m, m'] - Dbp[n, m']|; ``Dbp`` has permuted columns."""
    a = Da.shape[0]
    for m in range(a):
        for n in range(a):
            acc = 0.0
            for mp in range(a):
                acc += abs(Da[m, mp] - Dbp[n, mp])
            out[m, n] = w * acc


@njit(cache=True)
def _fw_vertex(G, Da, Db, S, GS):
    """Linear minimisation oracle: optimal vertex ``S`` for cost ``G`` and its gradient ``GS``."""
    a = Da.shape[0]
    b = Db.shape[0]
    if a == b:
        col = assignment(G)
        w = 1.0 / a
        S[:] = 0.0
        for m in range(a):
            S[m, col[m]] = w
        _perm_gradient(Da, Db[:, col], w, GS)
    else:
        S[:] = emd_uniform(G)
        GS[:] = _sparse_gradient(Da, Db, S)


@njit(cache=True)
def gw_frank_wolfe_from(Da, Db, G0, max_iter, tol, trace):
    """Frank-Wolfe on sum T[m,n] T[m',n'] |Da[m,m'] - Db[n,n']| over uniform couplings.

    Runs from the product coupling (whose gradient ``G0`` is supplied) and the
    north-west corner coupling and keeps the better result. ``trace``
    (2 x (max_iter + 1)) receives the objective after every iteration of each
    start, NaN-padded. The objective is quadratic along each step, so the new
    value is f + gamma lin + gamma^2 quad exactly and iterates update in place.
    """
    a = Da.shape[0]
    b = Db.shape[0]
    best = INF
    bestT = np.zeros((a, b))
    S = np.empty((a, b))
    GS = np.empty((a, b))
    trace[:] = np.nan
    for start in range(2):
        if start == 0:
            T = np.full((a, b), 1.0 / (a * b))
            G = G0.copy()
        else:
            T = northwest_corner(a, b)
            G = _sparse_gradient(Da, Db, T)
        f = np.sum(G * T)
        trace[start, 0] = f
        for it in range(max_iter):
            _fw_vertex(G, Da, Db, S, GS)
            lin = 0.0
            quad = 0.0
            for m in range(a):
                for n in range(b):
                    d = S[m, n] - T[m, n]
                    lin += 2.0 * G[m, n] * d
                    quad += (GS[m, n] - G[m, n]) * d
            if quad > 0.0:
                gamma = -lin / (2.0 * quad)
                if gamma < 0.0:
                    gamma = 0.0
                elif gamma > 1.0:
                    gamma = 1.0
            elif quad + lin < 0.0:
                gamma = 1.0
            else:
                gamma = 0.0
            step = gamma * (lin + gamma * quad)
            if gamma == 0.0 or step >= 0.0:  # no descent left, or round-off on a flat direction
                break
            for m in range(a):
                for n in range(b):
                    T[m, n] += gamma * (S[m, n] - T[m, n])
                    G[m, n] += gamma * (GS[m, n] - G[m, n])
            fnew = f + step
            trace[start, it + 1] = fnew
            rel = -step / abs(f) if f != 0.0 else 0.0
            f = fnew
            if rel < tol:
                break
        f = np.sum(G * T)
        if f < best:
            best = f
            bestT = T.copy()
    return best, bestT


@njit(cache=True)
def gw_cost_gradient(Da, Db, T):
    """d/dDa and d/dDb of sum T T |Da - Db| with T held fixed."""
    a = Da.shape[0]
    b = Db.shape[0]
    nnz = 0
    for m in range(a):
        for n in range(b):
            if T[m, n] != 0.0:
                nnz += 1
    rm = np.empty(nnz, dtype=np.int64)
    rn = np.empty(nnz, dtype=np.int64)
    rt = np.empty(nnz)
    k = 0
    for m in range(a):
        for n in range(b):
            if T[m, n] != 0.0:
                rm[k] = m
                rn[k] = n
                rt[k] = T[m, n]
                k += 1
    dA = np.zeros((a, a))
    dB = np.zeros((b, b))
    for p in range(nnz):
        for q in range(nnz):
            diff = Da[rm[p], rm[q]] - Db[rn[p], rn[q]]
            if diff == 0.0:
                continue
            w = rt[p] * rt[q]
            if diff < 0.0:
                w = -w
            dA[rm[p], rm[q]] += w
            dB[rn[p], rn[q]] -= w
    return dA, dB


# ---------------------------------------------------------------- batched pairs


@njit(cache=True)
def _block_cost(Gm, ra, ka, rb, kb, tau):
    C = np.empty((ka, kb))
    for m in range(ka):
        for n in range(kb):
            C[m, n] = np.exp(-Gm[ra + m, rb + n] / tau)
    return C


@njit(parallel=True, cache=True)
def batch_wasserstein(G_oe, G_oo, offsets, pa, pb, b_emb, tau, use_sinkhorn, eps, iters, plans):
    """W distance for every pair; side A is always an original-feature block.

    ``G_oe`` / ``G_oo`` hold cosine similarities between all gathered rows.
    Plans are written to ``plans[p, :ka, :kb]``.
    """
    P = pa.size
    out = np.empty(P)
    unconverged = np.zeros(P, dtype=np.bool_)
    for p in prange(P):
        ia = pa[p]
        ib = pb[p]
        ra = offsets[ia]
        ka = offsets[ia + 1] - ra
        rb = offsets[ib]
        kb = offsets[ib + 1] - rb
        if b_emb[p]:
            C = _block_cost(G_oe, ra, ka, rb, kb, tau)
        else:
            C = _block_cost(G_oo, ra, ka, rb, kb, tau)
        if use_sinkhorn:
            T, ok, _ = sinkhorn_log(C, eps, iters, 1e-7)
            unconverged[p] = not ok
        else:
            T = emd_uniform(C)
        out[p] = np.sum(T * C)
        plans[p, :ka, :kb] = T
    return out, unconverged


@njit(parallel=True, cache=True)
def _presort_blocks(C, offsets, kmax):
    """Sorted rows and running sums of every subgraph's intra-cost block."""
    S = offsets.size - 1
    R = offsets[S]
    srt = np.zeros((R, kmax))
    pre = np.zeros((R, kmax + 1))
    for i in prange(S):
        r = offsets[i]
        k = offsets[i + 1] - r
        sd, pr = sorted_rows(np.ascontiguousarray(C[r : r + k, :k]))
        srt[r : r + k, :k] = sd
        pre[r : r + k, : k + 1] = pr
    return srt, pre


@njit(parallel=True, cache=True)
def batch_gromov(C_o, C_e, offsets, pa, pb, b_emb, max_iter, tol, plans):
    """GW for every pair from per-subgraph intra-cost blocks.

    ``C_o[r:r+k, :k]`` holds the cost block of the subgraph whose rows start
    at ``r``; ``C_e`` likewise for the embedding view.
    """
    P = pa.size
    out = np.empty(P)
    kmax = C_o.shape[1]
    so, po = _presort_blocks(C_o, offsets, kmax)
    se, pe = _presort_blocks(C_e, offsets, kmax)
    for p in prange(P):
        ia = pa[p]
        ib = pb[p]
        ra = offsets[ia]
        ka = offsets[ia + 1] - ra
        rb = offsets[ib]
        kb = offsets[ib + 1] - rb
        Da = np.ascontiguousarray(C_o[ra : ra + ka, :ka])
        sa = so[ra : ra + ka, :ka]
        pra = po[ra : ra + ka, : ka + 1]
        if b_emb[p]:
            Db = np.ascontiguousarray(C_e[rb : rb + kb, :kb])
            sb = se[rb : rb + kb, :kb]
            prb = pe[rb : rb + kb, : kb + 1]
        else:
            Db = np.ascontiguousarray(C_o[rb : rb + kb, :kb])
            sb = so[rb : rb + kb, :kb]
            prb = po[rb : rb + kb, : kb + 1]
        trace = np.empty((2, max_iter + 1))
        if _swap(Da, Db):
            val, T = gw_frank_wolfe_from(Db, Da, _product_gradient_sorted(sb, sa, pra), max_iter, tol, trace)
            T = T.T.copy()
        else:
            val, T = gw_frank_wolfe_from(Da, Db, _product_gradient_sorted(sa, sb, prb), max_iter, tol, trace)
        out[p] = val
        plans[p, :ka, :kb] = T
    return out


@njit(cache=True)
def batch_wasserstein_backward(G_oe, G_oo, offsets, pa, pb, b_emb, tau, plans, grad, dG_oe, dG_oo):
    """Accumulate d(loss)/d(similarity) into ``dG_*`` given d(loss)/d(W) per pair."""
    for p in range(pa.size):
        g = grad[p]
        if g == 0.0:
            continue
        ra = offsets[pa[p]]
        ka = offsets[pa[p] + 1] - ra
        rb = offsets[pb[p]]
        kb = offsets[pb[p] + 1] - rb
        emb = b_emb[p]
        for m in range(ka):
            for n in range(kb):
                t = plans[p, m, n]
                if t == 0.0:
                    continue
                if emb:
                    s = G_oe[ra + m, rb + n]
                    dG_oe[ra + m, rb + n] -= g * t * np.exp(-s / tau) / tau
                else:
                    s = G_oo[ra + m, rb + n]
                    dG_oo[ra + m, rb + n] -= g * t * np.exp(-s / tau) / tau


@njit(cache=True)
def batch_gromov_backward(C_o, C_e, offsets, pa, pb, b_emb, tau, plans, grad, dG_oo, dG_ee):
    """Accumulate d(loss)/d(cosine similarity) on the diagonal blocks."""
    for p in range(pa.size):
        g = grad[p]
        if g == 0.0:
            continue
        ra = offsets[pa[p]]
        ka = offsets[pa[p] + 1] - ra
        rb = offsets[pb[p]]
        kb = offsets[pb[p] + 1] - rb
        emb = b_emb[p]
        Da = np.ascontiguousarray(C_o[ra : ra + ka, :ka])
        Db = np.ascontiguousarray((C_e if emb else C_o)[rb : rb + kb, :kb])
        T = np.ascontiguousarray(plans[p, :ka, :kb])
        dA, dB = gw_cost_gradient(Da, Db, T)
        for m in range(ka):
            for mm in range(ka):
                dG_oo[ra + m, ra + mm] -= g * dA[m, mm] * Da[m, mm] / tau
        for n in range(kb):
            for nn in range(kb):
                if emb:
                    dG_ee[rb + n, rb + nn] -= g * dB[n, nn] * Db[n, nn] / tau
                else:
                    dG_oo[rb + n, rb + nn] -= g * dB[n, nn] * Db[n, nn] / tau
