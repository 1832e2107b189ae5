"""Compiled inner loops for the two network families.

Every kernel walks the data points in index order and accumulates in a
fixed order, so results are bit-reproducible run to run.

Layout of the skip network (K = L - 1 trainable layers):
    a (K, m), B (K, m, d), C (K, d, m), r (K, m)
Layout of the ResNet (K = L - 1 residual blocks, D = d + 1):
    U (K, D, m), V (K, m, D)
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _act(u, code):
    if code == 0:
        return u if u > 0.0 else 0.0
    return np.tanh(u)


@njit(cache=True)
def _dact(u, code):
    if code == 0:
        return 1.0 if u > 0.0 else 0.0
    t = np.tanh(u)
    return 1.0 - t * t


# ----------------------------------------------------------------------
# skip-connection network
# ----------------------------------------------------------------------


@njit(cache=True)
def skip_forward_point(a, B, C, r, x, code, z, yv, pre, g):
    """Fill z (K+1, d), yv (K+1,), pre (K, m), g (K, m); return f."""
    K, m, d = B.shape
    for j in range(d):
        z[0, j] = x[j]
    yv[0] = 0.0
    for k in range(K):
        yk = yv[k]
        for i in range(m):
            s = r[k, i] * yk
            for j in range(d):
                s += B[k, i, j] * z[k, j]
            pre[k, i] = s
            g[k, i] = _act(s, code)
        acc = yk
        for i in range(m):
            acc += a[k, i] * g[k, i]
        yv[k + 1] = acc
        for j in range(d):
            s = x[j]
            for i in range(m):
                s += C[k, j, i] * g[k, i]
            z[k + 1, j] = s
    return yv[K]


@njit(cache=True)
def skip_backward_point(a, B, C, r, code, pre, alpha, beta, gamma, delta):
    """Adjoints: alpha (K+1,), beta (K+1, d), gamma/delta (K, m).

    gamma is the gradient with respect to g, delta with respect to the
    pre-activation (gamma times sigma').
    """
    K, m, d = B.shape
    alpha[K] = 1.0
    for j in range(d):
        beta[K, j] = 0.0
    for k in range(K - 1, -1, -1):
        for i in range(m):
            s = a[k, i] * alpha[k + 1]
            for j in range(d):
                s += C[k, j, i] * beta[k + 1, j]
            gamma[k, i] = s
            delta[k, i] = s * _dact(pre[k, i], code)
        for j in range(d):
            s = 0.0
            for i in range(m):
                s += B[k, i, j] * delta[k, i]
            beta[k, j] = s
        s = alpha[k + 1]
        for i in range(m):
            s += r[k, i] * delta[k, i]
        alpha[k] = s


@njit(cache=True)
def skip_grad_risk(a, B, C, r, X, y, code, ga, gB, gC, gr, resid):
    """Empirical risk (1/2n) sum e_i^2 and its gradient (written into g*)."""
    K, m, d = B.shape
    n = X.shape[0]
    z = np.empty((K + 1, d))
    yv = np.empty(K + 1)
    pre = np.empty((K, m))
    g = np.empty((K, m))
    alpha = np.empty(K + 1)
    beta = np.empty((K + 1, d))
    gamma = np.empty((K, m))
    delta = np.empty((K, m))
    ga[:] = 0.0
    gB[:] = 0.0
    gC[:] = 0.0
    gr[:] = 0.0
    risk = 0.0
    for p in range(n):
        f = skip_forward_point(a, B, C, r, X[p], code, z, yv, pre, g)
        e = f - y[p]
        resid[p] = e
        risk += e * e
        skip_backward_point(a, B, C, r, code, pre, alpha, beta, gamma, delta)
        w = e / n
        for k in range(K):
            ak1 = alpha[k + 1] * w
            yk = yv[k] * w
            for i in range(m):
                ga[k, i] += ak1 * g[k, i]
                dk = delta[k, i]
                gr[k, i] += dk * yk
                dw = dk * w
                for j in range(d):
                    gB[k, i, j] += dw * z[k, j]
                    gC[k, j, i] += beta[k + 1, j] * w * g[k, i]
    return risk / (2.0 * n)


@njit(cache=True)
def skip_predict(a, B, C, r, X, code):
    K, m, d = B.shape
    n = X.shape[0]
    z = np.empty((K + 1, d))
    yv = np.empty(K + 1)
    pre = np.empty((K, m))
    g = np.empty((K, m))
    out = np.empty(n)
    for p in range(n):
        out[p] = skip_forward_point(a, B, C, r, X[p], code, z, yv, pre, g)
    return out


@njit(cache=True)
def skip_a_features(a, B, C, r, X, code):
    """Per-point gradients of f with respect to every a-block, (n, K, m)."""
    K, m, d = B.shape
    n = X.shape[0]
    z = np.empty((K + 1, d))
    yv = np.empty(K + 1)
    pre = np.empty((K, m))
    g = np.empty((K, m))
    alpha = np.empty(K + 1)
    beta = np.empty((K + 1, d))
    gamma = np.empty((K, m))
    delta = np.empty((K, m))
    out = np.empty((n, K, m))
    for p in range(n):
        skip_forward_point(a, B, C, r, X[p], code, z, yv, pre, g)
        skip_backward_point(a, B, C, r, code, pre, alpha, beta, gamma, delta)
        for k in range(K):
            for i in range(m):
                out[p, k, i] = alpha[k + 1] * g[k, i]
    return out


# ----------------------------------------------------------------------
# residual network
# ----------------------------------------------------------------------


@njit(cache=True)
def res_forward_point(U, V, x, code, h, pre, g):
    K, D, m = U.shape
    d = D - 1
    for j in range(d):
        h[0, j] = x[j]
    h[0, d] = 0.0
    for k in range(K):
        for i in range(m):
            s = 0.0
            for j in range(D):
                s += V[k, i, j] * h[k, j]
            pre[k, i] = s
            g[k, i] = _act(s, code)
        for j in range(D):
            s = h[k, j]
            for i in range(m):
                s += U[k, j, i] * g[k, i]
            h[k + 1, j] = s
    return h[K, d]


@njit(cache=True)
def res_grad_risk(U, V, X, y, code, gU, gV, resid):
    K, D, m = U.shape
    n = X.shape[0]
    h = np.empty((K + 1, D))
    pre = np.empty((K, m))
    g = np.empty((K, m))
    xi = np.empty(D)
    xi_prev = np.empty(D)
    delta = np.empty(m)
    gU[:] = 0.0
    gV[:] = 0.0
    risk = 0.0
    for p in range(n):
        f = res_forward_point(U, V, X[p], code, h, pre, g)
        e = f - y[p]
        resid[p] = e
        risk += e * e
        w = e / n
        for j in range(D):
            xi[j] = 0.0
        xi[D - 1] = 1.0
        for k in range(K - 1, -1, -1):
            for i in range(m):
                s = 0.0
                for j in range(D):
                    s += U[k, j, i] * xi[j]
                    gU[k, j, i] += w * xi[j] * g[k, i]
                delta[i] = s * _dact(pre[k, i], code)
            for j in range(D):
                s = xi[j]
                for i in range(m):
                    s += V[k, i, j] * delta[i]
                    gV[k, i, j] += w * delta[i] * h[k, j]
                xi_prev[j] = s
            for j in range(D):
                xi[j] = xi_prev[j]
    return risk / (2.0 * n)


@njit(cache=True)
def res_predict(U, V, X, code):
    K, D, m = U.shape
    n = X.shape[0]
    h = np.empty((K + 1, D))
    pre = np.empty((K, m))
    g = np.empty((K, m))
    out = np.empty(n)
    for p in range(n):
        out[p] = res_forward_point(U, V, X[p], code, h, pre, g)
    return out


@njit(cache=True)
def skip_full_traces(a, B, C, r, X, code, with_adjoints):
    """Neurons (and optionally adjoints) for every row of X."""
    K, m, d = B.shape
    n = X.shape[0]
    Z = np.empty((n, K + 1, d))
    Y = np.empty((n, K + 1))
    PRE = np.empty((n, K, m))
    G = np.empty((n, K, m))
    nA = n if with_adjoints else 0
    AL = np.empty((nA, K + 1))
    BE = np.empty((nA, K + 1, d))
    GA = np.empty((nA, K, m))
    DE = np.empty((nA, K, m))
    for p in range(n):
        skip_forward_point(a, B, C, r, X[p], code, Z[p], Y[p], PRE[p], G[p])
        if with_adjoints:
            skip_backward_point(a, B, C, r, code, PRE[p], AL[p], BE[p], GA[p], DE[p])
    return Z, Y, PRE, G, AL, BE, GA, DE
