# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled loss kernels. Signatures mirror ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()

cdef double NORM_FLOOR = 1e-12


def softmax_xent_forward(const double[:, ::1] logits, const long[::1] targets):
    cdef Py_ssize_t b = logits.shape[0]
    cdef Py_ssize_t c = logits.shape[1]
    cdef Py_ssize_t i, j
    cdef double m, s, log_z
    loss_arr = np.empty(b, dtype=np.float64)
    probs_arr = np.empty((b, c), dtype=np.float64)
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] probs = probs_arr
    for i in range(b):
        m = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(c):
            s += exp(logits[i, j] - m)
        log_z = log(s)
        loss[i] = log_z - (logits[i, targets[i]] - m)
        for j in range(c):
            probs[i, j] = exp(logits[i, j] - m - log_z)
    return loss_arr, probs_arr


def softmax_xent_backward(const double[:, ::1] probs, const long[::1] targets,
                          const double[::1] grad_out):
    cdef Py_ssize_t b = probs.shape[0]
    cdef Py_ssize_t c = probs.shape[1]
    cdef Py_ssize_t i, j
    grad_arr = np.empty((b, c), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    for i in range(b):
        for j in range(c):
            grad[i, j] = probs[i, j] * grad_out[i]
        grad[i, targets[i]] = (probs[i, targets[i]] - 1.0) * grad_out[i]
    return grad_arr


def triplet_forward(const double[:, ::1] emb, const long[::1] anchor,
                    const long[::1] positive, const long[::1] negative,
                    double margin):
    cdef Py_ssize_t n_trip = anchor.shape[0]
    cdef Py_ssize_t e = emb.shape[1]
    cdef Py_ssize_t t, k
    cdef double d_ap, d_an, diff, raw, total = 0.0
    active_arr = np.zeros(n_trip, dtype=np.uint8)
    cdef unsigned char[::1] active = active_arr
    for t in range(n_trip):
        d_ap = 0.0
        d_an = 0.0
        for k in range(e):
            diff = emb[anchor[t], k] - emb[positive[t], k]
            d_ap += diff * diff
            diff = emb[anchor[t], k] - emb[negative[t], k]
            d_an += diff * diff
        raw = d_ap - d_an + margin
        if raw > 0.0:
            active[t] = 1
        else:
            raw = 0.0
        total += (raw - total) / (t + 1)
    return total, active_arr


def triplet_backward(const double[:, ::1] emb, const long[::1] anchor,
                     const long[::1] positive, const long[::1] negative,
                     const unsigned char[::1] active, double grad_out):
    cdef Py_ssize_t n_trip = anchor.shape[0]
    cdef Py_ssize_t e = emb.shape[1]
    cdef Py_ssize_t t, k, ia, ip, ineg
    cdef double scale = 2.0 * grad_out / n_trip
    cdef double va, vp, vn
    grad_arr = np.zeros((emb.shape[0], e), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    for t in range(n_trip):
        if not active[t]:
            continue
        ia = anchor[t]
        ip = positive[t]
        ineg = negative[t]
        for k in range(e):
            va = emb[ia, k]
            vp = emb[ip, k]
            vn = emb[ineg, k]
            grad[ia, k] += scale * (vn - vp)
            grad[ip, k] += -scale * (va - vp)
            grad[ineg, k] += scale * (va - vn)
    return grad_arr


def normalize_rows_forward(const double[:, ::1] x):
    cdef Py_ssize_t b = x.shape[0]
    cdef Py_ssize_t e = x.shape[1]
    cdef Py_ssize_t i, k
    cdef double s
    y_arr = np.empty((b, e), dtype=np.float64)
    norms_arr = np.empty(b, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] norms = norms_arr
    for i in range(b):
        s = 0.0
        for k in range(e):
            s += x[i, k] * x[i, k]
        s = sqrt(s)
        if s < NORM_FLOOR:
            s = NORM_FLOOR
        norms[i] = s
        for k in range(e):
            y[i, k] = x[i, k] / s
    return y_arr, norms_arr


def normalize_rows_backward(const double[:, ::1] y, const double[::1] norms,
                            const double[:, ::1] grad_out):
    cdef Py_ssize_t b = y.shape[0]
    cdef Py_ssize_t e = y.shape[1]
    cdef Py_ssize_t i, k
    cdef double dot
    grad_arr = np.empty((b, e), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    for i in range(b):
        dot = 0.0
        for k in range(e):
            dot += grad_out[i, k] * y[i, k]
        for k in range(e):
            grad[i, k] = (grad_out[i, k] - y[i, k] * dot) / norms[i]
    return grad_arr
