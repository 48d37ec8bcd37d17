# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Same contracts as ``parec._fallback``."""
from libc.math cimport exp, log, sqrt

BACKEND = "cython"


def masked_softmax_fwd(const double[:, :, ::1] x, bint causal, double[:, :, ::1] out):
    cdef Py_ssize_t m = x.shape[0], r = x.shape[1], c = x.shape[2]
    cdef Py_ssize_t b, i, j, lim
    cdef double mx, s, e, inv
    with nogil:
        for b in range(m):
            for i in range(r):
                lim = c
                if causal and i + 1 < c:
                    lim = i + 1
                mx = x[b, i, 0]
                for j in range(1, lim):
                    if x[b, i, j] > mx:
                        mx = x[b, i, j]
                s = 0.0
                for j in range(lim):
                    e = exp(x[b, i, j] - mx)
                    out[b, i, j] = e
                    s += e
                inv = 1.0 / s
                for j in range(lim):
                    out[b, i, j] = out[b, i, j] * inv
                for j in range(lim, c):
                    out[b, i, j] = 0.0
    return out.base


def masked_softmax_bwd(const double[:, :, ::1] y, const double[:, :, ::1] dy,
                       double[:, :, ::1] dx):
    cdef Py_ssize_t m = y.shape[0], r = y.shape[1], c = y.shape[2]
    cdef Py_ssize_t b, i, j
    cdef double s
    with nogil:
        for b in range(m):
            for i in range(r):
                s = 0.0
                for j in range(c):
                    s += y[b, i, j] * dy[b, i, j]
                for j in range(c):
                    dx[b, i, j] = (dy[b, i, j] - s) * y[b, i, j]
    return dx.base


def layer_norm_fwd(const double[:, ::1] x, const double[::1] gamma, const double[::1] beta,
                   double eps, double[:, ::1] y, double[:, ::1] xhat, double[::1] rstd):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double mean, var, v, rs
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                v = x[i, j] - mean
                xhat[i, j] = v
                var += v * v
            var /= d
            rs = 1.0 / sqrt(var + eps)
            rstd[i] = rs
            for j in range(d):
                v = xhat[i, j] * rs
                xhat[i, j] = v
                y[i, j] = v * gamma[j] + beta[j]
    return y.base


def layer_norm_bwd(const double[:, ::1] dy, const double[:, ::1] xhat, const double[::1] rstd,
                   const double[::1] gamma, double[:, ::1] dx, double[::1] dgamma,
                   double[::1] dbeta):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1]
    cdef Py_ssize_t i, j
    cdef double c1, c2, g
    with nogil:
        for i in range(n):
            c1 = 0.0
            c2 = 0.0
            for j in range(d):
                g = dy[i, j] * gamma[j]
                dgamma[j] += dy[i, j] * xhat[i, j]
                dbeta[j] += dy[i, j]
                dx[i, j] = g
                c1 += g
                c2 += g * xhat[i, j]
            c1 /= d
            c2 /= d
            for j in range(d):
                dx[i, j] = (dx[i, j] - c1 - xhat[i, j] * c2) * rstd[i]
    return dx.base


def softmax_xent(const double[:, ::1] logits, const long long[::1] targets,
                 double[:, ::1] grad, double scale):
    cdef Py_ssize_t n = logits.shape[0], c = logits.shape[1]
    cdef Py_ssize_t i, j
    cdef long long t
    cdef double mx, s, e, inv, total = 0.0
    with nogil:
        for i in range(n):
            t = targets[i]
            if t <= 0:
                for j in range(c):
                    grad[i, j] = 0.0
                continue
            mx = logits[i, 1]
            for j in range(2, c):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            s = 0.0
            grad[i, 0] = 0.0
            for j in range(1, c):
                e = exp(logits[i, j] - mx)
                grad[i, j] = e
                s += e
            total += log(s) + mx - logits[i, t]
            inv = scale / s
            for j in range(1, c):
                grad[i, j] = grad[i, j] * inv
            grad[i, t] -= scale
    return total


def count_greater(const double[:, ::1] scores, const long long[::1] targets,
                  long long[::1] ranks):
    cdef Py_ssize_t n = scores.shape[0], c = scores.shape[1]
    cdef Py_ssize_t i, j
    cdef long long cnt
    cdef double ts
    with nogil:
        for i in range(n):
            ts = scores[i, targets[i]]
            cnt = 1
            for j in range(1, c):
                if scores[i, j] > ts:
                    cnt += 1
            ranks[i] = cnt
    return ranks.base
