"""Pure numpy implementation of the synchronized multi-agent rounds.

Reference/fallback for the compiled ``_kernels`` module; both take the same
arguments and consume the same pre-drawn random numbers.
"""

import numpy as np

DIVERGENCE_NORM2 = 1e16


def run_rounds(theta, w, e, prev_rho, state, ep_len, ep_done, ep_count, visits, next_visits,
               cum_p, rho, r_exp, r_std, reset, start, Phi, gamma, lam, q, alpha, beta, kind,
               d2, A, U, Z, theta_radius, w_radius, n0, log_every, log_theta, log_pos):
    """Advance all agents by ``U.shape[0]`` rounds in place.

    Returns ``(diverged_at, log_pos)`` where ``diverged_at`` is the global
    iteration index of the first non-finite or exploding parameter, or -1.
    """
    N, p = theta.shape
    M = Phi.shape[0]
    ar = np.arange(N)
    aq = alpha * q
    is_tdc = kind == 1
    static = A.shape[0] == 1
    for t in range(U.shape[0]):
        s = state.copy()
        c = lam[ar, s] * gamma[s] * prev_rho
        e[:] = c[:, None] * e + Phi[s]

        s2 = np.minimum((cum_p[ar, s] <= U[t][:, None]).sum(axis=1), M - 1)
        r = r_exp[ar, s, s2] + r_std[ar, s, s2] * Z[t]
        rh = rho[ar, s, s2]
        g2 = gamma[s2]
        ph, pn = Phi[s], Phi[s2]
        vs = np.einsum("ij,ij->i", ph, theta)
        vn = np.einsum("ij,ij->i", pn, theta)
        delta = rh * (r + g2 * vn - vs)
        ew = np.einsum("ij,ij->i", e, w)
        pw = np.einsum("ij,ij->i", ph, w)

        c1 = aq * rh * ew
        tp_gtd2 = theta + c1[:, None] * (ph - g2[:, None] * pn)
        c2 = aq * rh * (1.0 - lam[ar, s2]) * g2 * ew
        tp_tdc = theta + (aq * delta)[:, None] * e - c2[:, None] * pn
        tp = np.where(is_tdc[:, None], tp_tdc, tp_gtd2)
        wp = w + beta[:, None] * (delta[:, None] * e - pw[:, None] * ph)
        if theta_radius > 0:
            nrm = np.sqrt((tp * tp).sum(axis=1))
            tp = np.where((nrm > theta_radius)[:, None], tp * (theta_radius / np.maximum(nrm, 1e-300))[:, None], tp)
        if w_radius > 0:
            nrm = np.sqrt((wp * wp).sum(axis=1))
            wp = np.where((nrm > w_radius)[:, None], wp * (w_radius / np.maximum(nrm, 1e-300))[:, None], wp)

        prev_rho[:] = rh
        np.add.at(visits, (ar, s), 1)
        np.add.at(next_visits, (ar, s2), 1)
        ep_len += 1
        hit = reset[ar, s2].astype(bool)
        state[:] = np.where(hit, start, s2)
        prev_rho[hit] = 0.0
        ep_done[hit] += ep_len[hit]
        ep_count[hit] += 1
        ep_len[hit] = 0

        At = A[0] if static else A[t]
        theta[:] = At @ tp
        w[:] = At @ wp if d2 else wp

        n = n0 + t
        bad = ~((theta * theta).sum(axis=1) <= DIVERGENCE_NORM2) | ~((w * w).sum(axis=1) <= DIVERGENCE_NORM2)
        if bad.any():
            return n, log_pos
        if (n + 1) % log_every == 0:
            log_theta[log_pos] = theta
            log_pos += 1
    return -1, log_pos


def frozen_increments(theta, w, cum_p, rho, r_exp, r_std, reset, start, s0, Phi, gamma, lam, U, Z):
    """Sum the GTD2 and TDC theta-increments and the w-increment over a single
    agent's stream with (theta, w) held fixed. Step sizes and q are left out."""
    p = Phi.shape[1]
    M = Phi.shape[0]
    g_gtd2 = np.zeros(p)
    g_tdc = np.zeros(p)
    k_sum = np.zeros(p)
    e = np.zeros(p)
    prev = 0.0
    s = s0
    for t in range(U.shape[0]):
        e = (lam[s] * gamma[s] * prev) * e + Phi[s]
        s2 = min(int(np.count_nonzero(cum_p[s] <= U[t])), M - 1)
        r = r_exp[s, s2] + r_std[s, s2] * Z[t]
        rh = rho[s, s2]
        g2 = gamma[s2]
        ph, pn = Phi[s], Phi[s2]
        delta = rh * (r + g2 * (pn @ theta) - ph @ theta)
        ew = e @ w
        g_gtd2 += (rh * ew) * (ph - g2 * pn)
        g_tdc += delta * e - (rh * (1.0 - lam[s2]) * g2 * ew) * pn
        k_sum += delta * e - (ph @ w) * ph
        prev = rh
        if reset[s2]:
            s = start
            prev = 0.0
        else:
            s = s2
    return g_gtd2, g_tdc, k_sum
