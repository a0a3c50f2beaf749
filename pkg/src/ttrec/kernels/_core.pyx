# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for clustering and the contrastive positive loss."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def sq_dist_to_centers(const double[:, ::1] points, const double[:, ::1] centers):
    """Squared Euclidean distance from every point to every center, shape (N, K)."""
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t k = centers.shape[0]
    cdef Py_ssize_t d = points.shape[1]
    if centers.shape[1] != d:
        raise ValueError(f"dimension mismatch: points have {d} columns, centers {centers.shape[1]}")
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] res = out
    cdef Py_ssize_t i, j, f
    cdef double acc, diff
    with nogil:
        for i in range(n):
            for j in range(k):
                acc = 0.0
                for f in range(d):
                    diff = points[i, f] - centers[j, f]
                    acc = acc + diff * diff
                res[i, j] = acc
    return out


def pairwise_sq_sum(const double[:, ::1] members):
    """Sum of squared distances over unordered member pairs, and its gradient.

    Returns ``(total, grad)`` where ``total = sum_{i<j} ||r_i - r_j||^2`` and
    ``grad[i] = d total / d r_i = 2 (n r_i - sum_j r_j)``. The total runs the
    O(n^2 d) pair loop directly; the gradient needs only the column sums.
    """
    cdef Py_ssize_t n = members.shape[0]
    cdef Py_ssize_t d = members.shape[1]
    grad_arr = np.zeros((n, d), dtype=np.float64)
    if n < 2:
        return 0.0, grad_arr
    cdef double[:, ::1] grad = grad_arr
    colsum_arr = np.zeros(d, dtype=np.float64)
    cdef double[::1] colsum = colsum_arr
    cdef Py_ssize_t i, j, f
    cdef double total = 0.0
    cdef double row, diff
    with nogil:
        for i in range(n):
            row = 0.0
            for j in range(i + 1, n):
                for f in range(d):
                    diff = members[i, f] - members[j, f]
                    row = row + diff * diff
            total = total + row
            for f in range(d):
                colsum[f] = colsum[f] + members[i, f]
        for i in range(n):
            for f in range(d):
                grad[i, f] = 2.0 * (n * members[i, f] - colsum[f])
    return total, grad_arr
