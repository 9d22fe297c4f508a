# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled skip-gram negative-sampling kernel.

Mirrors `_sgns_np.train_pairs` exactly (update order, stable sigmoid and
softplus); only the dot-product accumulation order may differ from BLAS.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log1p

cnp.import_array()


cdef inline double _sigmoid(double x) nogil:
    cdef double z
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    z = exp(x)
    return z / (1.0 + z)


cdef inline double _softplus(double x) nogil:
    if x >= 0.0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


def train_pairs(
    double[:, ::1] w_in,
    double[:, ::1] w_out,
    long long[::1] centers,
    long long[::1] contexts,
    long long[:, ::1] negatives,
    double alpha_start,
    double alpha_end,
    long long pair_offset,
    long long total_pairs,
):
    cdef Py_ssize_t n_pairs = centers.shape[0]
    cdef Py_ssize_t dim = w_in.shape[1]
    cdef Py_ssize_t n_neg = negatives.shape[1]
    cdef Py_ssize_t i, j, k
    cdef long long c, o, t
    cdef double alpha, x, s, g, label, loss
    cdef double d_alpha = alpha_end - alpha_start
    cdef double[::1] grad_h = np.zeros(dim, dtype=np.float64)

    loss = 0.0
    with nogil:
        for i in range(n_pairs):
            alpha = alpha_start + d_alpha * ((<double>(pair_offset + i)) / (<double>total_pairs))
            c = centers[i]
            o = contexts[i]
            for k in range(dim):
                grad_h[k] = 0.0
            for j in range(-1, n_neg):
                if j < 0:
                    t = o
                    label = 1.0
                else:
                    t = negatives[i, j]
                    if t == o:
                        continue
                    label = 0.0
                x = 0.0
                for k in range(dim):
                    x += w_in[c, k] * w_out[t, k]
                s = _sigmoid(x)
                if label == 1.0:
                    loss += _softplus(-x)
                else:
                    loss += _softplus(x)
                g = (label - s) * alpha
                for k in range(dim):
                    grad_h[k] += g * w_out[t, k]
                for k in range(dim):
                    w_out[t, k] += g * w_in[c, k]
            for k in range(dim):
                w_in[c, k] += grad_h[k]
    return loss
