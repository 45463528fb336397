"""Compiled inner loops for the annealing local search.

A hard labelling is scored through a least-squares regression of a response
series on the group sums of per-unit series, optionally with extra shared
regressors. Column ``a * G + c`` holds the sum over group c of unit series a;
shared regressors follow after the ``G * S`` group columns. The normal
equations are updated in O(G S^2) per move from precomputed unit cross
products and rebuilt from scratch at the start of every epoch.

Two scores are available. ``MODE_CLIPPED`` reads series 0 as B and series
1.. as the C columns, profiles (phi, theta), clips them to the boxes and
returns N^2 (ssce - A0). ``MODE_FREE`` returns the unconstrained residual sum
of squares minus the total sum of squares, times N^2 / T.
"""
from __future__ import annotations

import numpy as np
from numba import njit

MODE_CLIPPED = 0
MODE_FREE = 1


@njit(cache=True)
def _cholesky_solve(M, rhs, out, L, z):
    K = M.shape[0]
    for j in range(K):
        s = M[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if s <= 0.0:
            return False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, K):
            s = M[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    for i in range(K):
        s = rhs[i]
        for k in range(i):
            s -= L[i, k] * z[k]
        z[i] = s / L[i, i]
    for i in range(K - 1, -1, -1):
        s = z[i]
        for k in range(i + 1, K):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]
    return True


@njit(cache=True)
def _workspace(K):
    return np.empty((K, K)), np.empty(K), np.empty(K), np.empty(K)


@njit(cache=True)
def _solve(M, b, kappa, work):
    Lw, z, _, _ = work
    if _cholesky_solve(M, b, kappa, Lw, z):
        return True
    K = M.shape[0]
    tr = 0.0
    for j in range(K):
        tr += M[j, j]
    Mr = M.copy()
    for j in range(K):
        Mr[j, j] += 1e-10 * tr / K + 1e-300
    return _cholesky_solve(Mr, b, kappa, Lw, z)


@njit(cache=True)
def _extract(kappa, N, G, phi_out, theta_out, clip, lphi, ltheta):
    dx = theta_out.shape[1]
    for c in range(G):
        ph = N * kappa[c]
        if clip:
            if ph > lphi[c]:
                ph = lphi[c]
            elif ph < -lphi[c]:
                ph = -lphi[c]
        phi_out[c] = ph
        for k in range(dx):
            beta = -N * kappa[(1 + k) * G + c]
            th = 0.0
            if ph != 0.0:
                th = beta / ph
            if clip:
                lt = ltheta[c, k]
                if th > lt:
                    th = lt
                elif th < -lt:
                    th = -lt
            theta_out[c, k] = th


@njit(cache=True)
def _score(M, b, N, T, mode, lphi, ltheta, phi_out, theta_out, work):
    """Objective for the normal equations M kappa = b; inf when unsolvable."""
    G = phi_out.size
    dx = theta_out.shape[1]
    K = b.size
    kappa = work[2]
    if not _solve(M, b, kappa, work):
        return np.inf
    if mode == MODE_FREE:
        _extract(kappa, N, G, phi_out, theta_out, False, lphi, ltheta)
        fit = 0.0
        for i in range(K):
            fit += kappa[i] * b[i]
        return -N * N * fit / T
    _extract(kappa, N, G, phi_out, theta_out, True, lphi, ltheta)
    # kappa solves (S'S) kappa = S'A; coefficients on S/N are N * kappa
    kc = work[3]
    for i in range(K):
        kc[i] = 0.0
    for c in range(G):
        kc[c] = phi_out[c]
        for k in range(dx):
            kc[(1 + k) * G + c] = -phi_out[c] * theta_out[c, k]
    quad = 0.0
    for i in range(K):
        row = 0.0
        for j in range(K):
            row += M[i, j] * kc[j]
        quad += kc[i] * row
    lin = 0.0
    for i in range(K):
        lin += kc[i] * b[i]
    return (quad - 2.0 * N * lin) / T


@njit(cache=True)
def profile_objective(A, SB, SC, N, lphi, ltheta, phi_out, theta_out):
    """Clipped profile score for the labelling summarised by group sums SB, SC."""
    G, T = SB.shape
    dx = SC.shape[2]
    K = G * (1 + dx)
    X = np.empty((T, K))
    for c in range(G):
        for t in range(T):
            X[t, c] = SB[c, t]
            for k in range(dx):
                X[t, (1 + k) * G + c] = SC[c, t, k]
    return _score(X.T @ X, X.T @ A, N, T, MODE_CLIPPED, lphi, ltheta, phi_out, theta_out,
                  _workspace(K))


@njit(cache=True)
def group_sums(B, C, labels, G):
    N, T = B.shape
    dx = C.shape[2]
    SB = np.zeros((G, T))
    SC = np.zeros((G, T, dx))
    counts = np.zeros(G, dtype=np.int64)
    for i in range(N):
        c = labels[i]
        counts[c] += 1
        for t in range(T):
            SB[c, t] += B[i, t]
            for k in range(dx):
                SC[c, t, k] += C[i, t, k]
    return SB, SC, counts


@njit(cache=True)
def gram_state(P, Q, r, QQ, Qy, labels, G):
    """Normal equations for a labelling.

    ``P[i, j, a, b]`` is the inner product of series a of unit i with series
    b of unit j, ``Q[i, a, m]`` that of series a of unit i with shared
    regressor m, ``r[i, a]`` that of series a with the response; ``QQ`` and
    ``Qy`` are the shared Gram block and products. Returns ``UM[i, c, a, b]``
    (unit i against the sums of group c), the Gram matrix and the products.
    """
    N = P.shape[0]
    S = P.shape[2]
    m = QQ.shape[0]
    K = G * S + m
    UM = np.zeros((N, G, S, S))
    for i in range(N):
        for j in range(N):
            c = labels[j]
            for a in range(S):
                for b in range(S):
                    UM[i, c, a, b] += P[i, j, a, b]
    M = np.zeros((K, K))
    rhs = np.zeros(K)
    for i in range(N):
        c = labels[i]
        for a in range(S):
            ca = a * G + c
            rhs[ca] += r[i, a]
            for h in range(G):
                for b in range(S):
                    M[ca, b * G + h] += UM[i, h, a, b]
            for k in range(m):
                M[ca, G * S + k] += Q[i, a, k]
                M[G * S + k, ca] += Q[i, a, k]
    for k in range(m):
        rhs[G * S + k] = Qy[k]
        for l in range(m):
            M[G * S + k, G * S + l] = QQ[k, l]
    return UM, M, rhs


@njit(cache=True)
def _moved_gram(P, Q, r, UM, M, rhs, i, a, c, Mn, bn):
    """Gram matrix and products after moving unit i from group a to group c."""
    G = UM.shape[1]
    S = UM.shape[2]
    m = Q.shape[2]
    Mn[:, :] = M
    bn[:] = rhs
    for al in range(S):
        ca = al * G + a
        cc = al * G + c
        bn[ca] -= r[i, al]
        bn[cc] += r[i, al]
        for k in range(m):
            v = Q[i, al, k]
            Mn[ca, G * S + k] -= v
            Mn[G * S + k, ca] -= v
            Mn[cc, G * S + k] += v
            Mn[G * S + k, cc] += v
        for h in range(G):
            if h == a or h == c:
                continue
            for be in range(S):
                ch = be * G + h
                v = UM[i, h, al, be]
                Mn[ca, ch] -= v
                Mn[ch, ca] -= v
                Mn[cc, ch] += v
                Mn[ch, cc] += v
        for be in range(S):
            pii = P[i, i, al, be]
            Mn[ca, be * G + a] += -UM[i, a, al, be] - UM[i, a, be, al] + pii
            Mn[cc, be * G + c] += UM[i, c, al, be] + UM[i, c, be, al] + pii
            # (S_a - z)^al . (S_c + z)^be
            d = UM[i, a, be, al] - UM[i, c, al, be] - pii
            Mn[ca, be * G + c] += d
            Mn[be * G + c, ca] += d


@njit(cache=True)
def _commit_move(P, UM, i, a, c):
    N = P.shape[0]
    S = P.shape[2]
    for j in range(N):
        for al in range(S):
            for be in range(S):
                UM[j, a, al, be] -= P[j, i, al, be]
                UM[j, c, al, be] += P[j, i, al, be]


@njit(cache=True)
def probe_deltas(P, Q, r, labels, UM, M, rhs, counts, N, T, mode, lphi, ltheta, dx, cur_f,
                 units, offsets):
    """Objective changes of single-unit moves from the current labelling."""
    G = UM.shape[1]
    phi = np.empty(G)
    theta = np.empty((G, dx))
    Mn = np.empty_like(M)
    bn = np.empty_like(rhs)
    work = _workspace(rhs.size)
    out = np.full(units.size, np.nan)
    for n in range(units.size):
        i = units[n]
        a = labels[i]
        if counts[a] <= 1:
            continue
        c = (a + offsets[n]) % G
        _moved_gram(P, Q, r, UM, M, rhs, i, a, c, Mn, bn)
        f = _score(Mn, bn, N, T, mode, lphi, ltheta, phi, theta, work)
        out[n] = f - cur_f
    return out


@njit(cache=True)
def sa_epoch(P, Q, r, labels, UM, M, rhs, counts, N, T, mode, lphi, ltheta, cur_f, te,
             units, offsets, unif, best_f, best_labels, best_phi, best_theta, accepted):
    """One temperature level of Metropolis single-unit reassignment moves.

    Returns (current objective, best objective, number of accepted moves);
    the objective after every accepted move is written to ``accepted``.
    """
    G = UM.shape[1]
    dx = best_theta.shape[1]
    phi = np.empty(G)
    theta = np.empty((G, dx))
    Mn = np.empty_like(M)
    bn = np.empty_like(rhs)
    work = _workspace(rhs.size)
    n_acc = 0
    for n in range(units.size):
        i = units[n]
        a = labels[i]
        if counts[a] <= 1:
            continue
        c = (a + offsets[n]) % G
        _moved_gram(P, Q, r, UM, M, rhs, i, a, c, Mn, bn)
        f = _score(Mn, bn, N, T, mode, lphi, ltheta, phi, theta, work)
        d = f - cur_f
        if d <= 0.0 or (te > 0.0 and unif[n] < np.exp(-d / te)):
            labels[i] = c
            counts[a] -= 1
            counts[c] += 1
            M[:, :] = Mn
            rhs[:] = bn
            _commit_move(P, UM, i, a, c)
            cur_f = f
            accepted[n_acc] = f
            n_acc += 1
            if f < best_f:
                best_f = f
                best_labels[:] = labels
                best_phi[:] = phi
                best_theta[:, :] = theta
    return cur_f, best_f, n_acc
