# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled synchronized multi-agent rounds; mirrors ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

cdef double DIVERGENCE_NORM2 = 1e16


cdef inline Py_ssize_t _draw(const double[::1] cum, double u, Py_ssize_t M) noexcept nogil:
    cdef Py_ssize_t k = 0
    cdef Py_ssize_t i
    for i in range(M):
        if cum[i] <= u:
            k += 1
    if k > M - 1:
        k = M - 1
    return k


cdef inline void _project(double[::1] x, double radius) noexcept nogil:
    cdef Py_ssize_t k, p = x.shape[0]
    cdef double nrm = 0.0
    if radius <= 0:
        return
    for k in range(p):
        nrm += x[k] * x[k]
    nrm = sqrt(nrm)
    if nrm > radius:
        for k in range(p):
            x[k] = x[k] * (radius / nrm)


def run_rounds(double[:, ::1] theta, double[:, ::1] w, double[:, ::1] e, double[::1] prev_rho,
               cnp.int64_t[::1] state, cnp.int64_t[::1] ep_len, cnp.int64_t[::1] ep_done,
               cnp.int64_t[::1] ep_count, cnp.int64_t[:, ::1] visits, cnp.int64_t[:, ::1] next_visits,
               const double[:, :, ::1] cum_p, const double[:, :, ::1] rho,
               const double[:, :, ::1] r_exp, const double[:, :, ::1] r_std,
               const cnp.uint8_t[:, ::1] reset, const cnp.int64_t[::1] start,
               const double[:, ::1] Phi, const double[::1] gamma, const double[:, ::1] lam,
               const double[::1] q, const double[::1] alpha, const double[::1] beta,
               const cnp.int64_t[::1] kind, int d2, const double[:, :, ::1] A,
               const double[:, ::1] U, const double[:, ::1] Z,
               double theta_radius, double w_radius, long n0, long log_every,
               double[:, :, ::1] log_theta, long log_pos):
    cdef Py_ssize_t N = theta.shape[0]
    cdef Py_ssize_t p = theta.shape[1]
    cdef Py_ssize_t M = Phi.shape[0]
    cdef Py_ssize_t C = U.shape[0]
    cdef bint static = A.shape[0] == 1
    cdef double[:, ::1] tp = np.empty((N, p))
    cdef double[:, ::1] wp = np.empty((N, p))
    cdef Py_ssize_t t, i, j, k, s, s2, a_idx
    cdef double c, r, rh, g2, vs, vn, delta, ew, pw, aq, c1, c2, acc, nt, nw
    cdef long n
    with nogil:
        for t in range(C):
            for i in range(N):
                s = state[i]
                c = lam[i, s] * gamma[s] * prev_rho[i]
                for k in range(p):
                    e[i, k] = c * e[i, k] + Phi[s, k]
                s2 = _draw(cum_p[i, s], U[t, i], M)
                r = r_exp[i, s, s2] + r_std[i, s, s2] * Z[t, i]
                rh = rho[i, s, s2]
                g2 = gamma[s2]
                vs = 0.0
                vn = 0.0
                ew = 0.0
                pw = 0.0
                for k in range(p):
                    vs += Phi[s, k] * theta[i, k]
                    vn += Phi[s2, k] * theta[i, k]
                    ew += e[i, k] * w[i, k]
                    pw += Phi[s, k] * w[i, k]
                delta = rh * (r + g2 * vn - vs)
                aq = alpha[i] * q[i]
                if kind[i] == 0:
                    c1 = aq * rh * ew
                    for k in range(p):
                        tp[i, k] = theta[i, k] + c1 * (Phi[s, k] - g2 * Phi[s2, k])
                else:
                    c2 = aq * rh * (1.0 - lam[i, s2]) * g2 * ew
                    for k in range(p):
                        tp[i, k] = theta[i, k] + (aq * delta) * e[i, k] - c2 * Phi[s2, k]
                for k in range(p):
                    wp[i, k] = w[i, k] + beta[i] * (delta * e[i, k] - pw * Phi[s, k])
                _project(tp[i], theta_radius)
                _project(wp[i], w_radius)

                prev_rho[i] = rh
                visits[i, s] += 1
                next_visits[i, s2] += 1
                ep_len[i] += 1
                if reset[i, s2]:
                    state[i] = start[i]
                    prev_rho[i] = 0.0
                    ep_done[i] += ep_len[i]
                    ep_count[i] += 1
                    ep_len[i] = 0
                else:
                    state[i] = s2

            a_idx = 0 if static else t
            for i in range(N):
                for k in range(p):
                    acc = 0.0
                    for j in range(N):
                        acc = acc + A[a_idx, i, j] * tp[j, k]
                    theta[i, k] = acc
                    if d2:
                        acc = 0.0
                        for j in range(N):
                            acc = acc + A[a_idx, i, j] * wp[j, k]
                        w[i, k] = acc
                    else:
                        w[i, k] = wp[i, k]

            n = n0 + t
            for i in range(N):
                nt = 0.0
                nw = 0.0
                for k in range(p):
                    nt += theta[i, k] * theta[i, k]
                    nw += w[i, k] * w[i, k]
                if not (nt <= DIVERGENCE_NORM2 and nw <= DIVERGENCE_NORM2):
                    with gil:
                        return n, log_pos
            if (n + 1) % log_every == 0:
                for i in range(N):
                    for k in range(p):
                        log_theta[log_pos, i, k] = theta[i, k]
                log_pos += 1
    return -1, log_pos


def frozen_increments(const double[::1] theta, const double[::1] w,
                      const double[:, ::1] cum_p, const double[:, ::1] rho,
                      const double[:, ::1] r_exp, const double[:, ::1] r_std,
                      const cnp.uint8_t[::1] reset, long start, long s0,
                      const double[:, ::1] Phi, const double[::1] gamma, const double[::1] lam,
                      const double[::1] U, const double[::1] Z):
    cdef Py_ssize_t p = Phi.shape[1]
    cdef Py_ssize_t M = Phi.shape[0]
    cdef Py_ssize_t T = U.shape[0]
    g_gtd2_a = np.zeros(p)
    g_tdc_a = np.zeros(p)
    k_a = np.zeros(p)
    e_a = np.zeros(p)
    cdef double[::1] g_gtd2 = g_gtd2_a
    cdef double[::1] g_tdc = g_tdc_a
    cdef double[::1] k_sum = k_a
    cdef double[::1] e = e_a
    cdef double prev = 0.0
    cdef Py_ssize_t s = s0
    cdef Py_ssize_t t, k, s2
    cdef double c, r, rh, g2, vs, vn, ew, pw, delta, corr
    with nogil:
        for t in range(T):
            c = lam[s] * gamma[s] * prev
            for k in range(p):
                e[k] = c * e[k] + Phi[s, k]
            s2 = _draw(cum_p[s], U[t], M)
            r = r_exp[s, s2] + r_std[s, s2] * Z[t]
            rh = rho[s, s2]
            g2 = gamma[s2]
            vs = 0.0
            vn = 0.0
            ew = 0.0
            pw = 0.0
            for k in range(p):
                vs += Phi[s, k] * theta[k]
                vn += Phi[s2, k] * theta[k]
                ew += e[k] * w[k]
                pw += Phi[s, k] * w[k]
            delta = rh * (r + g2 * vn - vs)
            corr = rh * (1.0 - lam[s2]) * g2 * ew
            for k in range(p):
                g_gtd2[k] += (rh * ew) * (Phi[s, k] - g2 * Phi[s2, k])
                g_tdc[k] += delta * e[k] - corr * Phi[s2, k]
                k_sum[k] += delta * e[k] - pw * Phi[s, k]
            prev = rh
            if reset[s2]:
                s = start
                prev = 0.0
            else:
                s = s2
    return g_gtd2_a, g_tdc_a, k_a
