"""Fused numba kernels for the per-step hot path.

Each kernel computes exactly what a composition of the public functions in
``estimator`` and ``online_em`` computes; the test-suite checks them against
each other. Shapes follow the public modules.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def simplex_project(v):
    n = v.size
    u = np.sort(v)[::-1]
    css = 0.0
    theta = 0.0
    for i in range(n):
        css += u[i]
        t = (css - 1.0) / (i + 1)
        if u[i] - t > 0:
            theta = t
    out = np.empty(n)
    for i in range(n):
        out[i] = max(v[i] - theta, 0.0)
    return out


@njit(cache=True)
def kalman_correct(x_pred, means, covs, y, ridge):
    """Gain step of the belief tracker for a non-empty reading.

    ``means`` is (q, D), ``covs`` is (q, D, D). Returns the projected belief,
    or an empty array if the innovation matrix cannot be inverted.
    """
    q = x_pred.size
    D = y.size
    cov_pred = -np.outer(x_pred, x_pred)
    for i in range(q):
        cov_pred[i, i] += x_pred[i]
    M = means.T.copy()                       # (D, q)
    y_pred = M @ x_pred
    psi = np.zeros((D, D))
    for i in range(q):
        psi += x_pred[i] * covs[i]
    MS = M @ cov_pred
    S = MS @ M.T + psi
    S = 0.5 * (S + S.T)
    ok = True
    gain_t = np.empty((D, q))
    try:
        gain_t = np.linalg.solve(S, MS)
        ok = np.all(np.isfinite(gain_t))
    except Exception:
        ok = False
    if not ok:
        S2 = S + ridge * np.eye(D)
        try:
            gain_t = np.linalg.solve(S2, MS)
        except Exception:
            return np.empty(0)
        if not np.all(np.isfinite(gain_t)):
            return np.empty(0)
    corrected = x_pred + (y - y_pred) @ np.ascontiguousarray(gain_t)
    return simplex_project(corrected)


@njit(cache=True)
def log_weights(ypad, active, means_pad, prec, logdet, total_dim, normalized, log_2pi):
    q = means_pad.shape[1]
    n = means_pad.shape[2]
    out = np.zeros(q)
    for a in range(active.size):
        k = active[a]
        for i in range(q):
            quad = 0.0
            for r in range(n):
                dr = ypad[a, r] - means_pad[k, i, r]
                acc = 0.0
                for c in range(n):
                    acc += prec[k, i, r, c] * (ypad[a, c] - means_pad[k, i, c])
                quad += dr * acc
            out[i] -= 0.5 * quad
            if normalized:
                out[i] -= 0.5 * logdet[k, i]
    if normalized:
        for i in range(q):
            out[i] -= 0.5 * total_dim * log_2pi
    return out


@njit(cache=True)
def em_core(phi, A, rho_a, log_g, g, mass_floor, floor):
    """Retrospective kernel, filter update, transition E-step and M-step.

    Updates ``rho_a`` in place; returns ``(phi_new, r, A_new)``.
    """
    q = phi.size
    # retrospective kernel r[i, j] = phi(i) A(i, j) / sum_i phi(i) A(i, j)
    r = np.empty((q, q))
    pred = np.zeros(q)
    for i in range(q):
        for j in range(q):
            r[i, j] = phi[i] * A[i, j]
            pred[j] += r[i, j]
    for j in range(q):
        if pred[j] > 0:
            for i in range(q):
                r[i, j] /= pred[j]
        else:
            for i in range(q):
                r[i, j] = 1.0 / q
    # filter
    logp = np.empty(q)
    for k in range(q):
        logp[k] = (np.log(pred[k]) if pred[k] > 0 else -np.inf) + log_g[k]
    m = logp.max()
    phi_new = np.exp(logp - m)
    phi_new /= phi_new.sum()
    # E-step for transition statistics
    mixed = (rho_a.reshape(q * q, q) @ r).reshape(q, q, q)
    for i in range(q):
        for j in range(q):
            for k in range(q):
                mixed[i, j, k] *= 1.0 - g
            mixed[i, j, j] += g * r[i, j]
    rho_a[...] = mixed
    # M-step
    A_new = A.copy()
    for i in range(q):
        mass = 0.0
        row = np.zeros(q)
        for j in range(q):
            s = 0.0
            for k in range(q):
                s += rho_a[i, j, k] * phi_new[k]
            row[j] = s
            mass += s
        if mass >= mass_floor:
            for j in range(q):
                A_new[i, j] = row[j] / mass
    if floor > 0:
        for i in range(q):
            tot = 0.0
            for j in range(q):
                A_new[i, j] = max(A_new[i, j], floor)
                tot += A_new[i, j]
            for j in range(q):
                A_new[i, j] /= tot
    return phi_new, r, A_new


@njit(cache=True)
def sensor_stats_step(rho0, rho1, rho2, track_cov, r, active, gk, ypad, keep):
    """Push every sensor's statistics through ``r``, then blend in readings.

    ``keep[k]`` scales sensor ``k`` after the push (1.0 unless silent sensors
    decay); active sensors are scaled by ``1 - gk[a]`` and receive
    ``gk[a] * delta_ij * y^d``.
    """
    N, q, n = rho1.shape[0], rho1.shape[1], rho1.shape[2]
    rho0[...] = (rho0.reshape(N * q, q) @ r).reshape(N, q, q)
    rho1[...] = (rho1.reshape(N * q * n, q) @ r).reshape(N, q, n, q)
    if track_cov:
        rho2[...] = (rho2.reshape(N * q * n * n, q) @ r).reshape(N, q, n, n, q)
    for k in range(N):
        if keep[k] != 1.0:
            rho0[k] *= keep[k]
            rho1[k] *= keep[k]
            if track_cov:
                rho2[k] *= keep[k]
    for a in range(active.size):
        k = active[a]
        g = gk[a]
        for i in range(q):
            for j in range(q):
                rho0[k, i, j] *= 1.0 - g
                for d in range(n):
                    rho1[k, i, d, j] *= 1.0 - g
                    if track_cov:
                        for e in range(n):
                            rho2[k, i, d, e, j] *= 1.0 - g
            rho0[k, i, i] += g
            for d in range(n):
                rho1[k, i, d, i] += g * ypad[a, d]
                if track_cov:
                    for e in range(n):
                        rho2[k, i, d, e, i] += g * ypad[a, d] * ypad[a, e]


@njit(cache=True)
def update_means(rho0, rho1, phi, active, dims, means_pad, mass_floor):
    """Write ``S1 / S0`` into ``means_pad`` for active sensors with enough mass."""
    q = phi.size
    for a in range(active.size):
        k = active[a]
        for i in range(q):
            s0 = 0.0
            for j in range(q):
                s0 += rho0[k, i, j] * phi[j]
            if s0 < mass_floor:
                continue
            for d in range(dims[k]):
                s1 = 0.0
                for j in range(q):
                    s1 += rho1[k, i, d, j] * phi[j]
                means_pad[k, i, d] = s1 / s0
