"""Pure numpy implementation of the batched QP kernels.

Mirrors ``_kernels.pyx`` step for step so the two backends agree to rounding
error. Used when the compiled extension is unavailable or when
``BARRIERNET_FORCE_PYTHON=1``.
"""
import numpy as np

OPTIMAL = 0
INFEASIBLE = 1
MAX_ITER = 2

ZERO_ROW = 1e-12
STEP_TOL = 1e-13
DECREASE_TOL = 1e-20
DUAL_TOL = 1e-11
PIVOT_TOL = 1e-14
PENALTY_M = 1e3
GRAD_STEP_TOL = 1e-14


def _solve(K, rhs):
    """Dense solve; returns None when the matrix is numerically singular."""
    try:
        lu_ok = np.linalg.cond(K) < 1.0 / PIVOT_TOL
    except np.linalg.LinAlgError:
        return None
    if not lu_ok:
        return None
    return np.linalg.solve(K, rhs)


def _active_set(H, F, A, b, skip, x, max_iter):
    """Primal active-set iterations from a feasible ``x`` (rows normalized).

    Returns ``(x, mu, status, iterations)`` with ``mu`` the multipliers of the
    normalized rows.
    """
    n = H.shape[0]
    m = A.shape[0]
    in_w = np.zeros(m, dtype=bool)
    mu = np.zeros(m)
    for it in range(1, max_iter + 1):
        work = np.flatnonzero(in_w)
        k = work.size
        K = np.zeros((n + k, n + k))
        K[:n, :n] = H
        Aw = A[work]
        K[:n, n:] = Aw.T
        K[n:, :n] = Aw
        grad = H @ x + F
        rhs = np.concatenate([-grad, np.zeros(k)])
        sol = _solve(K, rhs)
        if sol is None:
            return x, mu, MAX_ITER, it
        p = sol[:n]
        lam_w = sol[n:]
        pmax = np.max(np.abs(p))
        obj = 0.5 * x @ H @ x + F @ x
        decrease = 0.5 * p @ H @ p
        if pmax <= STEP_TOL * (1.0 + np.max(np.abs(x))) + GRAD_STEP_TOL * np.max(np.abs(grad)) or decrease <= DECREASE_TOL * (1.0 + abs(obj)):
            dual_tol = DUAL_TOL * (1.0 + np.max(np.abs(grad)))
            if k == 0 or lam_w.min() >= -dual_tol:
                mu[:] = 0.0
                mu[work] = np.maximum(lam_w, 0.0)
                return x, mu, OPTIMAL, it
            # argmin returns the first minimum; work is ascending so ties go to the lowest row
            in_w[work[int(np.argmin(lam_w))]] = False
            continue
        alpha = 1.0
        block = -1
        ap_tol = 1e-12 * pmax
        for i in range(m):
            if in_w[i] or skip[i]:
                continue
            ap = A[i] @ p
            if ap > ap_tol:
                s = (b[i] - A[i] @ x) / ap
                if s < 0.0:
                    s = 0.0
                if s < alpha:
                    alpha = s
                    block = i
        x = x + alpha * p
        if block >= 0:
            in_w[block] = True
    return x, mu, MAX_ITER, max_iter


def _max_violation(A, b, skip, x):
    viol = 0.0
    for i in range(A.shape[0]):
        if skip[i]:
            continue
        v = A[i] @ x - b[i]
        if v > viol:
            viol = v
    return viol


def _phase_one(A, b, skip, x0, feas_tol, max_iter):
    """Elastic phase 1: min 0.5|x - x0|^2 + M t  s.t.  a_i x - t <= b_i, t >= 0."""
    n = x0.size
    m = A.shape[0]
    H1 = np.eye(n + 1)
    H1[n, n] = 1e-8
    A1 = np.zeros((m + 1, n + 1))
    A1[:m, :n] = A
    A1[:m, n] = -1.0
    A1[m, n] = -1.0
    b1 = np.concatenate([b, [0.0]])
    skip1 = np.concatenate([skip, [False]])
    norm1 = np.sqrt(np.sum(A1 * A1, axis=1))
    A1 = A1 / norm1[:, None]
    b1 = b1 / norm1
    big = PENALTY_M * (1.0 + np.max(np.abs(x0)))
    x = x0
    iters = 0
    for _ in range(3):
        F1 = np.concatenate([-x0, [big]])
        y0 = np.concatenate([x0, [max(0.0, _max_violation(A, b, skip, x0))]])
        y, _, status, it = _active_set(H1, F1, A1, b1, skip1, y0, max_iter)
        iters += it
        if status != OPTIMAL:
            return y[:n], MAX_ITER, iters
        x = y[:n]
        if _max_violation(A, b, skip, x) <= feas_tol:
            return x, OPTIMAL, iters
        big *= 100.0
    return x, INFEASIBLE, iters


def solve_one(H, F, A, b, x0, feas_tol=1e-8, max_iter=200):
    """Solve min 0.5 x'Hx + F'x s.t. A x <= b from the initial guess ``x0``.

    Returns ``(x, lam, status, iterations)``; ``lam`` is on the original
    (unnormalized) rows.
    """
    H = np.asarray(H, dtype=float)
    F = np.asarray(F, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    n = H.shape[0]
    m = A.shape[0]
    lam = np.zeros(m)
    norms = np.sqrt(np.sum(A * A, axis=1)) if m else np.zeros(0)
    skip = norms <= ZERO_ROW
    if np.any(skip & (b < -feas_tol)):
        return np.array(x0, dtype=float), lam, INFEASIBLE, 0
    safe = np.where(skip, 1.0, norms)
    An = A / safe[:, None]
    bn = b / safe
    x = np.array(x0, dtype=float)
    iters = 0
    if m and _max_violation(An, bn, skip, x) > feas_tol:
        x, status, iters = _phase_one(An, bn, skip, x, feas_tol, max_iter)
        if status != OPTIMAL:
            return x, lam, status, iters
    x, mu, status, it = _active_set(H, F, An, bn, skip, x, max_iter)
    iters += it
    lam = np.where(skip, 0.0, mu / safe)
    return x, lam, status, iters


def qp_batch(H, F, A, b, x0, feas_tol=1e-8, max_iter=200):
    """Batched :func:`solve_one` over the leading axis."""
    N, n = F.shape
    m = A.shape[1]
    x = np.empty((N, n))
    lam = np.empty((N, m))
    status = np.empty(N, dtype=np.int32)
    iters = np.empty(N, dtype=np.int32)
    for k in range(N):
        x[k], lam[k], status[k], iters[k] = solve_one(H[k], F[k], A[k], b[k], x0[k], feas_tol, max_iter)
    return x, lam, status, iters


def kkt_backward_one(H, A, x, lam, mask, g, ridge=1e-10):
    """Solve the KKT sensitivity system restricted to the masked rows.

    System: [[H, A_k' D(lam_k)], [A_k, 0]] [d_u; d_lam_k] = [-g; 0].
    Returns ``(d_u, d_lam, flag)`` with flag 0 = ok, 1 = ridge applied,
    2 = singular (zeros returned).
    """
    n = H.shape[0]
    m = A.shape[0]
    rows = np.flatnonzero(mask)
    k = rows.size
    K = np.zeros((n + k, n + k))
    K[:n, :n] = H
    Ak = A[rows]
    K[:n, n:] = Ak.T * lam[rows][None, :]
    K[n:, :n] = Ak
    rhs = np.concatenate([-np.asarray(g, dtype=float), np.zeros(k)])
    flag = 0
    sol = _solve(K, rhs)
    if sol is None:
        flag = 1
        sol = _solve(K + ridge * np.eye(n + k), rhs)
        if sol is None:
            return np.zeros(n), np.zeros(m), 2
    d_lam = np.zeros(m)
    d_lam[rows] = sol[n:]
    return sol[:n], d_lam, flag


def kkt_backward_batch(H, A, x, lam, mask, g):
    N, n = x.shape
    m = A.shape[1]
    d_u = np.empty((N, n))
    d_lam = np.empty((N, m))
    flags = np.empty(N, dtype=np.int32)
    for k in range(N):
        d_u[k], d_lam[k], flags[k] = kkt_backward_one(H[k], A[k], x[k], lam[k], mask[k], g[k])
    return d_u, d_lam, flags
