# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched kernels: primal active-set QP solve and KKT sensitivity solve.

Same algorithm and constants as ``_fallback.py``.
"""
import numpy as np

from libc.math cimport fabs, sqrt
from libc.stdlib cimport malloc, free

DEF ZERO_ROW = 1e-12
DEF STEP_TOL = 1e-13
DEF DECREASE_TOL = 1e-20
DEF DUAL_TOL = 1e-11
DEF PIVOT_TOL = 1e-14
DEF PENALTY_M = 1e3
DEF GRAD_STEP_TOL = 1e-14

cdef enum:
    OPTIMAL = 0
    INFEASIBLE = 1
    MAX_ITER = 2


cdef int lu_solve(double* K, double* rhs, int dim) noexcept nogil:
    """Gaussian elimination with partial pivoting, in place. Returns 1 if singular."""
    cdef int i, j, c, piv
    cdef double big = 0.0, v, tmp, factor
    for i in range(dim * dim):
        if fabs(K[i]) > big:
            big = fabs(K[i])
    if big == 0.0:
        return 1 if dim > 0 else 0
    for c in range(dim):
        piv = c
        v = fabs(K[c * dim + c])
        for i in range(c + 1, dim):
            if fabs(K[i * dim + c]) > v:
                v = fabs(K[i * dim + c])
                piv = i
        if v <= PIVOT_TOL * big:
            return 1
        if piv != c:
            for j in range(dim):
                tmp = K[c * dim + j]
                K[c * dim + j] = K[piv * dim + j]
                K[piv * dim + j] = tmp
            tmp = rhs[c]
            rhs[c] = rhs[piv]
            rhs[piv] = tmp
        for i in range(c + 1, dim):
            factor = K[i * dim + c] / K[c * dim + c]
            if factor != 0.0:
                for j in range(c, dim):
                    K[i * dim + j] -= factor * K[c * dim + j]
                rhs[i] -= factor * rhs[c]
    for i in range(dim - 1, -1, -1):
        tmp = rhs[i]
        for j in range(i + 1, dim):
            tmp -= K[i * dim + j] * rhs[j]
        rhs[i] = tmp / K[i * dim + i]
    return 0


cdef double dot(const double* a, const double* b, int n) noexcept nogil:
    cdef int i
    cdef double s = 0.0
    for i in range(n):
        s += a[i] * b[i]
    return s


cdef double max_violation(const double* A, const double* b, const char* skip,
                          const double* x, int n, int m) noexcept nogil:
    cdef int i
    cdef double viol = 0.0, v
    for i in range(m):
        if skip[i]:
            continue
        v = dot(&A[i * n], x, n) - b[i]
        if v > viol:
            viol = v
    return viol


cdef int active_set(const double* H, const double* F, const double* A, const double* b,
                    const char* skip, int n, int m, double* x, double* mu,
                    int max_iter, int* iters,
                    char* in_w, int* work, double* K, double* rhs,
                    double* grad, double* p) noexcept nogil:
    cdef int it, i, j, k, dim, block, jmin
    cdef double pmax, xmax, gmax, obj, decrease, alpha, ap, ap_tol, s, dual_tol, lmin
    for i in range(m):
        in_w[i] = 0
        mu[i] = 0.0
    for it in range(1, max_iter + 1):
        iters[0] = it
        k = 0
        for i in range(m):
            if in_w[i]:
                work[k] = i
                k += 1
        dim = n + k
        for i in range(dim * dim):
            K[i] = 0.0
        for i in range(n):
            for j in range(n):
                K[i * dim + j] = H[i * n + j]
        for j in range(k):
            for i in range(n):
                K[i * dim + n + j] = A[work[j] * n + i]
                K[(n + j) * dim + i] = A[work[j] * n + i]
        gmax = 0.0
        for i in range(n):
            grad[i] = dot(&H[i * n], x, n) + F[i]
            rhs[i] = -grad[i]
            if fabs(grad[i]) > gmax:
                gmax = fabs(grad[i])
        for j in range(k):
            rhs[n + j] = 0.0
        if lu_solve(K, rhs, dim):
            return MAX_ITER
        pmax = 0.0
        xmax = 0.0
        obj = 0.0
        decrease = 0.0
        for i in range(n):
            p[i] = rhs[i]
            if fabs(p[i]) > pmax:
                pmax = fabs(p[i])
            if fabs(x[i]) > xmax:
                xmax = fabs(x[i])
        for i in range(n):
            obj += x[i] * (0.5 * dot(&H[i * n], x, n) + F[i])
            decrease += 0.5 * p[i] * dot(&H[i * n], p, n)
        if pmax <= STEP_TOL * (1.0 + xmax) + GRAD_STEP_TOL * gmax or decrease <= DECREASE_TOL * (1.0 + fabs(obj)):
            dual_tol = DUAL_TOL * (1.0 + gmax)
            jmin = -1
            lmin = 0.0
            for j in range(k):
                if jmin < 0 or rhs[n + j] < lmin:
                    lmin = rhs[n + j]
                    jmin = j
            if k == 0 or lmin >= -dual_tol:
                for i in range(m):
                    mu[i] = 0.0
                for j in range(k):
                    mu[work[j]] = rhs[n + j] if rhs[n + j] > 0.0 else 0.0
                return OPTIMAL
            in_w[work[jmin]] = 0
            continue
        alpha = 1.0
        block = -1
        ap_tol = 1e-12 * pmax
        for i in range(m):
            if in_w[i] or skip[i]:
                continue
            ap = dot(&A[i * n], p, n)
            if ap > ap_tol:
                s = (b[i] - dot(&A[i * n], x, n)) / ap
                if s < 0.0:
                    s = 0.0
                if s < alpha:
                    alpha = s
                    block = i
        for i in range(n):
            x[i] += alpha * p[i]
        if block >= 0:
            in_w[block] = 1
    return MAX_ITER


cdef int solve_one(const double* H, const double* F, const double* A, const double* b,
                   const double* x0, int n, int m, double feas_tol, int max_iter,
                   double* x, double* lam, int* iters, double* ws, int* iws, char* cws) noexcept nogil:
    """Phase 1 (if needed) and phase 2 for one problem; ``ws`` sized by ``workspace_size``."""
    cdef int i, j, status, it, attempt, n1 = n + 1, m1 = m + 1, dimmax = n + m + 2
    cdef double nrm, xmax, big, t0
    # workspace layout
    cdef double* An = ws
    cdef double* bn = An + m * n
    cdef double* norms = bn + m
    cdef double* mu = norms + m
    cdef double* K = mu + m1
    cdef double* rhs = K + dimmax * dimmax
    cdef double* grad = rhs + dimmax
    cdef double* p = grad + n1
    cdef double* H1 = p + n1
    cdef double* F1 = H1 + n1 * n1
    cdef double* A1 = F1 + n1
    cdef double* b1 = A1 + m1 * n1
    cdef double* y = b1 + m1
    cdef int* work = iws
    cdef char* skip = cws
    cdef char* skip1 = skip + m
    cdef char* in_w = skip1 + m1

    iters[0] = 0
    for i in range(m):
        lam[i] = 0.0
    for i in range(n):
        x[i] = x0[i]
    for i in range(m):
        nrm = sqrt(dot(&A[i * n], &A[i * n], n))
        norms[i] = nrm
        skip[i] = 1 if nrm <= ZERO_ROW else 0
        if skip[i]:
            if b[i] < -feas_tol:
                return INFEASIBLE
            nrm = 1.0
        for j in range(n):
            An[i * n + j] = A[i * n + j] / nrm
        bn[i] = b[i] / nrm

    if m > 0 and max_violation(An, bn, skip, x, n, m) > feas_tol:
        for i in range(n1 * n1):
            H1[i] = 0.0
        for i in range(n):
            H1[i * n1 + i] = 1.0
        H1[n * n1 + n] = 1e-8
        for i in range(m):
            nrm = sqrt(dot(&An[i * n], &An[i * n], n) + 1.0)
            for j in range(n):
                A1[i * n1 + j] = An[i * n + j] / nrm
            A1[i * n1 + n] = -1.0 / nrm
            b1[i] = bn[i] / nrm
            skip1[i] = skip[i]
        for j in range(n):
            A1[m * n1 + j] = 0.0
        A1[m * n1 + n] = -1.0
        b1[m] = 0.0
        skip1[m] = 0
        xmax = 0.0
        for i in range(n):
            if fabs(x0[i]) > xmax:
                xmax = fabs(x0[i])
        big = PENALTY_M * (1.0 + xmax)
        status = INFEASIBLE
        for attempt in range(3):
            for i in range(n):
                F1[i] = -x0[i]
                y[i] = x0[i]
            F1[n] = big
            t0 = max_violation(An, bn, skip, x0, n, m)
            y[n] = t0 if t0 > 0.0 else 0.0
            it = 0
            status = active_set(H1, F1, A1, b1, skip1, n1, m1, y, mu, max_iter, &it,
                                in_w, work, K, rhs, grad, p)
            iters[0] += it
            for i in range(n):
                x[i] = y[i]
            if status != OPTIMAL:
                return MAX_ITER
            if max_violation(An, bn, skip, x, n, m) <= feas_tol:
                break
            status = INFEASIBLE
            big *= 100.0
        if status != OPTIMAL:
            return INFEASIBLE

    it = 0
    status = active_set(H, F, An, bn, skip, n, m, x, mu, max_iter, &it,
                        in_w, work, K, rhs, grad, p)
    iters[0] += it
    for i in range(m):
        lam[i] = 0.0 if skip[i] else mu[i] / norms[i]
    return status


cdef inline Py_ssize_t workspace_doubles(int n, int m) noexcept nogil:
    cdef Py_ssize_t n1 = n + 1, m1 = m + 1, dimmax = n + m + 2
    return (m * n + 2 * m + m1 + dimmax * dimmax + dimmax + 2 * n1
            + n1 * n1 + n1 + m1 * n1 + m1 + n1)


def qp_batch(double[:, :, ::1] H, double[:, ::1] F, double[:, :, ::1] A, double[:, ::1] b,
             double[:, ::1] x0, double feas_tol=1e-8, int max_iter=200):
    """Solve a batch of ``min 0.5 x'Hx + F'x s.t. A x <= b`` problems.

    Returns ``(x, lam, status, iterations)`` arrays.
    """
    cdef int N = F.shape[0], n = F.shape[1], m = A.shape[1], k
    x_out = np.zeros((N, n))
    lam_out = np.zeros((N, m))
    status_out = np.zeros(N, dtype=np.int32)
    iters_out = np.zeros(N, dtype=np.int32)
    cdef double[:, ::1] xv = x_out
    cdef double[:, ::1] lv = lam_out
    cdef int[::1] sv = status_out
    cdef int[::1] iv = iters_out
    cdef double* ws = <double*> malloc(workspace_doubles(n, m) * sizeof(double))
    cdef int* iws = <int*> malloc((m + 2) * sizeof(int))
    cdef char* cws = <char*> malloc((3 * m + 4) * sizeof(char))
    if ws == NULL or iws == NULL or cws == NULL:
        free(ws); free(iws); free(cws)
        raise MemoryError()
    try:
        with nogil:
            for k in range(N):
                sv[k] = solve_one(&H[k, 0, 0], &F[k, 0], &A[k, 0, 0] if m > 0 else NULL,
                                  &b[k, 0] if m > 0 else NULL, &x0[k, 0], n, m, feas_tol,
                                  max_iter, &xv[k, 0], &lv[k, 0] if m > 0 else NULL,
                                  &iv[k], ws, iws, cws)
    finally:
        free(ws)
        free(iws)
        free(cws)
    return x_out, lam_out, status_out, iters_out


def kkt_backward_batch(double[:, :, ::1] H, double[:, :, ::1] A, double[:, ::1] x,
                       double[:, ::1] lam, char[:, ::1] mask, double[:, ::1] g,
                       double ridge=1e-10):
    """Batched KKT sensitivity solve; see ``_fallback.kkt_backward_one``."""
    cdef int N = x.shape[0], n = x.shape[1], m = A.shape[1]
    cdef int s, i, j, k, dim, r
    du_out = np.zeros((N, n))
    dl_out = np.zeros((N, m))
    flag_out = np.zeros(N, dtype=np.int32)
    cdef double[:, ::1] du = du_out
    cdef double[:, ::1] dl = dl_out
    cdef int[::1] fl = flag_out
    cdef int dimmax = n + m
    cdef double* K = <double*> malloc((2 * dimmax * dimmax + 2 * dimmax + 1) * sizeof(double))
    cdef int* rows = <int*> malloc((m + 1) * sizeof(int))
    if K == NULL or rows == NULL:
        free(K); free(rows)
        raise MemoryError()
    cdef double* K0 = K + dimmax * dimmax
    cdef double* rhs = K0 + dimmax * dimmax
    cdef double* rhs0 = rhs + dimmax
    try:
        with nogil:
            for s in range(N):
                k = 0
                for i in range(m):
                    if mask[s, i]:
                        rows[k] = i
                        k += 1
                dim = n + k
                for i in range(dim * dim):
                    K0[i] = 0.0
                for i in range(n):
                    for j in range(n):
                        K0[i * dim + j] = H[s, i, j]
                for j in range(k):
                    r = rows[j]
                    for i in range(n):
                        K0[i * dim + n + j] = A[s, r, i] * lam[s, r]
                        K0[(n + j) * dim + i] = A[s, r, i]
                for i in range(n):
                    rhs0[i] = -g[s, i]
                for j in range(k):
                    rhs0[n + j] = 0.0
                for i in range(dim * dim):
                    K[i] = K0[i]
                for i in range(dim):
                    rhs[i] = rhs0[i]
                fl[s] = 0
                if lu_solve(K, rhs, dim):
                    fl[s] = 1
                    for i in range(dim * dim):
                        K[i] = K0[i]
                    for i in range(dim):
                        K[i * dim + i] += ridge
                        rhs[i] = rhs0[i]
                    if lu_solve(K, rhs, dim):
                        fl[s] = 2
                        continue
                for i in range(n):
                    du[s, i] = rhs[i]
                for j in range(k):
                    dl[s, rows[j]] = rhs[n + j]
    finally:
        free(K)
        free(rows)
    return du_out, dl_out, flag_out
