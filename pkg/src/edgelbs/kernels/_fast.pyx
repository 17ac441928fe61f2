# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Cython implementation of the hot kernels: random-walk stepping and
skip-gram negative-sampling SGD.  Mirrors edgelbs.kernels._py."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def walk_steps(double[::1] cdfs, long[::1] offsets, long[::1] neighbors,
               long[::1] starts, double[:, ::1] uniforms, long[:, ::1] restarts):
    cdef Py_ssize_t n_walks = uniforms.shape[0]
    cdef Py_ssize_t n_steps = uniforms.shape[1]
    out_arr = np.empty((n_walks, n_steps + 1), dtype=np.int64)
    cdef long[:, ::1] out = out_arr
    cdef Py_ssize_t w, s, lo, hi, mid
    cdef long node
    cdef double u
    for w in range(n_walks):
        node = starts[w]
        out[w, 0] = node
        for s in range(n_steps):
            lo = offsets[node]
            hi = offsets[node + 1]
            if lo == hi:
                node = restarts[w, s]
            else:
                u = uniforms[w, s]
                # binary search: first index with cdf > u (searchsorted side="right")
                while lo < hi:
                    mid = (lo + hi) // 2
                    if cdfs[mid] <= u:
                        lo = mid + 1
                    else:
                        hi = mid
                if lo >= offsets[node + 1]:
                    lo = offsets[node + 1] - 1
                node = neighbors[lo]
            out[w, s + 1] = node
    return out_arr


def sgns_epoch(double[:, ::1] emb_in, double[:, ::1] emb_out,
               long[::1] centers, long[::1] contexts,
               long[:, ::1] negatives, double lr):
    cdef Py_ssize_t n_pairs = negatives.shape[0]
    cdef Py_ssize_t n_neg = negatives.shape[1]
    cdef Py_ssize_t dim = emb_in.shape[1]
    cdef Py_ssize_t i, t, j
    cdef long c, target
    cdef double s, p, g, label, loss = 0.0
    accum_arr = np.zeros(dim, dtype=np.float64)
    cdef double[::1] accum = accum_arr
    for i in range(n_pairs):
        c = centers[i]
        for j in range(dim):
            accum[j] = 0.0
        for t in range(n_neg + 1):
            if t == 0:
                target = contexts[i]
                label = 1.0
            else:
                target = negatives[i, t - 1]
                label = 0.0
            s = 0.0
            for j in range(dim):
                s += emb_in[c, j] * emb_out[target, j]
            if s >= 0:
                p = 1.0 / (1.0 + exp(-s))
            else:
                p = exp(s) / (1.0 + exp(s))
            if label == 1.0:
                loss -= log(p if p > 1e-12 else 1e-12)
            else:
                loss -= log((1.0 - p) if (1.0 - p) > 1e-12 else 1e-12)
            g = (p - label) * lr
            for j in range(dim):
                accum[j] += g * emb_out[target, j]
                emb_out[target, j] -= g * emb_in[c, j]
        for j in range(dim):
            emb_in[c, j] -= accum[j]
    return loss
