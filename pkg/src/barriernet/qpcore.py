"""Dense convex QP solver with duals and KKT diagnostics.

Solves ``min 0.5 u'Hu + F'u  s.t.  G u <= h,  lb <= u <= ub`` by a primal
active-set method. Box bounds are expanded to inequality rows internally and
reported through separate multipliers so callers can keep them out of any
gradient assembly.
"""
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import _backend

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"

STATUS_NAMES = {
    _backend.OPTIMAL: OPTIMAL,
    _backend.INFEASIBLE: INFEASIBLE,
    _backend.MAX_ITER: MAX_ITER,
}


@dataclass(frozen=True)
class SolverConfig:
    act_tol: float = 1e-7
    feas_tol: float = 1e-8
    max_iter: int = 200
    backend: Optional[str] = None  # "cython", "python" or None for the import-time choice

    def kernels(self):
        if self.backend is None:
            return _backend.kernels
        if self.backend == "python":
            return _backend.fallback
        if self.backend == "cython":
            if _backend.BACKEND != "cython":
                raise RuntimeError("compiled kernels are not available")
            return _backend.kernels
        raise ValueError(f"unknown backend {self.backend!r}")


@dataclass
class QpProblem:
    """One pointwise QP: cost ``0.5 u'Hu + F'u``, rows ``G u <= h``, box ``lb <= u <= ub``."""

    H: np.ndarray
    F: np.ndarray
    G: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.F = np.atleast_1d(np.asarray(self.F, dtype=float))
        q = self.F.size
        self.G = np.zeros((0, q)) if self.G is None else np.asarray(self.G, dtype=float).reshape(-1, q)
        self.h = np.zeros(0) if self.h is None else np.atleast_1d(np.asarray(self.h, dtype=float))
        self.lb = np.full(q, -np.inf) if self.lb is None else np.broadcast_to(np.asarray(self.lb, dtype=float), (q,)).copy()
        self.ub = np.full(q, np.inf) if self.ub is None else np.broadcast_to(np.asarray(self.ub, dtype=float), (q,)).copy()
        self.validate()

    @property
    def q(self) -> int:
        return self.F.size

    @property
    def r(self) -> int:
        return self.G.shape[0]

    def validate(self):
        q = self.q
        if self.H.shape != (q, q):
            raise ValueError(f"H has shape {self.H.shape}, expected {(q, q)}")
        if self.h.shape != (self.G.shape[0],):
            raise ValueError("G and h disagree on the number of rows")
        if not np.allclose(self.H, self.H.T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(self.H).max())):
            raise ValueError("H is not symmetric")
        if np.any(self.lb > self.ub):
            raise ValueError("lb > ub")

    def objective(self, u):
        u = np.asarray(u, dtype=float)
        return 0.5 * u @ self.H @ u + self.F @ u


@dataclass
class QpSolution:
    u_star: np.ndarray
    lambda_star: np.ndarray
    lambda_lb: np.ndarray
    lambda_ub: np.ndarray
    active_set: tuple
    status: str
    iterations: int = 0
    bounds_active: tuple = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


class BatchSolution(NamedTuple):
    u: np.ndarray
    lam: np.ndarray
    lam_lb: np.ndarray
    lam_ub: np.ndarray
    status: np.ndarray
    iterations: np.ndarray


def as_buffer(a, dtype=float):
    """Writable C-contiguous array, as the compiled kernels require."""
    return np.require(a, dtype=dtype, requirements=["C", "W"])


def expand_rows(G, h, lb, ub):
    """Stack ``[G; I; -I]`` and ``[h; ub; -lb]`` along the last two axes."""
    q = G.shape[-1]
    lead = G.shape[:-2]
    eye = np.broadcast_to(np.eye(q), lead + (q, q))
    A = np.concatenate([G, eye, -eye], axis=-2)
    b = np.concatenate([h, np.broadcast_to(ub, lead + (q,)), -np.broadcast_to(lb, lead + (q,))], axis=-1)
    return as_buffer(A), as_buffer(b)


def solve_qp_batch(H, F, G, h, lb, ub, config: Optional[SolverConfig] = None) -> BatchSolution:
    """Solve N independent QPs; leading axis is the batch.

    Shapes: ``H (N,q,q)``, ``F (N,q)``, ``G (N,r,q)``, ``h (N,r)``, ``lb``/``ub``
    broadcastable to ``(N,q)``. ``status`` holds the integer codes from
    ``_backend``.
    """
    config = config or SolverConfig()
    H = as_buffer(H)
    F = as_buffer(F)
    N, q = F.shape
    G = as_buffer(np.reshape(G, (N, -1, q)))
    h = as_buffer(np.reshape(h, (N, -1)))
    r = G.shape[1]
    lb = np.broadcast_to(np.asarray(lb, dtype=float), (N, q))
    ub = np.broadcast_to(np.asarray(ub, dtype=float), (N, q))
    A, b = expand_rows(G, h, lb, ub)
    x0 = np.clip(np.linalg.solve(H, -F[..., None])[..., 0], lb, ub) if N else np.zeros((0, q))
    x0 = as_buffer(x0)
    u, lam, status, iters = config.kernels().qp_batch(H, F, A, b, x0, config.feas_tol, config.max_iter)
    return BatchSolution(u, lam[:, :r], lam[:, r + q:], lam[:, r:r + q], status, iters)


def solve_qp(problem: QpProblem, config: Optional[SolverConfig] = None) -> QpSolution:
    config = config or SolverConfig()
    sol = solve_qp_batch(
        problem.H[None], problem.F[None], problem.G[None], problem.h[None],
        problem.lb[None], problem.ub[None], config,
    )
    u = sol.u[0]
    status = STATUS_NAMES[int(sol.status[0])]
    slack = problem.G @ u - problem.h
    active = tuple(int(i) for i in np.flatnonzero(slack >= -config.act_tol))
    bounds_active = tuple(
        int(i) for i in np.flatnonzero((u - problem.ub >= -config.act_tol) | (problem.lb - u >= -config.act_tol))
    )
    return QpSolution(
        u_star=u,
        lambda_star=sol.lam[0],
        lambda_lb=sol.lam_lb[0],
        lambda_ub=sol.lam_ub[0],
        active_set=active,
        status=status,
        iterations=int(sol.iterations[0]),
        bounds_active=bounds_active,
    )


def kkt_residual(problem: QpProblem, solution: QpSolution) -> float:
    """Largest of the stationarity, primal, dual and complementarity residuals."""
    u = np.asarray(solution.u_star, dtype=float)
    lam = np.asarray(solution.lambda_star, dtype=float)
    lam_lb = np.asarray(solution.lambda_lb, dtype=float)
    lam_ub = np.asarray(solution.lambda_ub, dtype=float)
    stat = problem.H @ u + problem.F + problem.G.T @ lam + lam_ub - lam_lb
    slack = problem.G @ u - problem.h
    with np.errstate(invalid="ignore"):
        up = np.where(np.isfinite(problem.ub), u - problem.ub, -np.inf)
        lo = np.where(np.isfinite(problem.lb), problem.lb - u, -np.inf)
    primal = max(0.0, np.max(slack, initial=0.0), np.max(up, initial=0.0), np.max(lo, initial=0.0))
    duals = np.concatenate([lam, lam_lb, lam_ub])
    dual = max(0.0, -np.min(duals, initial=0.0))
    with np.errstate(invalid="ignore"):
        comp = np.concatenate([
            lam * slack,
            np.where(np.isfinite(up), lam_ub * up, 0.0),
            np.where(np.isfinite(lo), lam_lb * lo, 0.0),
        ])
    return float(max(np.max(np.abs(stat), initial=0.0), primal, dual, np.max(np.abs(comp), initial=0.0)))
