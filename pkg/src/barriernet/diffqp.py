"""The BarrierNet neuron: a QP whose solution map is differentiated through its KKT conditions.

Cost convention: the layer tracks a reference control ``f_ref`` with
``0.5 (u - f_ref)' H (u - f_ref)``, i.e. ``F = -H f_ref``. With ``H = 2I`` this
is ``|u - f_ref|^2``. ``H`` is either given or built from a lower-triangular
factor as ``L L' + eps I``.

Backward pass. At the solution the KKT conditions are

    H u + F + A' lam = 0,    D(lam) (A u - b) = 0

over every expanded row (HOCBF rows and active box bounds). Differentiating
and solving the adjoint system

    [[H, A_k' D(lam_k)], [A_k, 0]] [d_u; d_lam] = [-dl/du; 0]

on the strictly active rows gives ``dl/dF = d_u``,
``dl/dH = 0.5 (d_u u' + u d_u')`` and ``dl/dh = -D(lam) d_lam``. Box rows take
part in the solve (they pin coordinates of ``u``) but receive no gradient.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional

import numpy as np

from . import qpcore
from ._backend import OPTIMAL, INFEASIBLE
from .cbf import HocbfRow
from .qpcore import SolverConfig

log = logging.getLogger(__name__)

H_EPS = 1e-6
W_SLACK = 1e4
LAM_TOL = 1e-9


class QpInfeasibleError(RuntimeError):
    pass


@dataclass
class BarrierLayerInput:
    f_ref: np.ndarray
    penalties: np.ndarray  # (|S|, m): one penalty vector per constraint row
    rows: List[HocbfRow] = field(default_factory=list)
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    H: Optional[np.ndarray] = None
    H_factor: Optional[np.ndarray] = None
    relax: bool = False

    def __post_init__(self):
        self.f_ref = np.atleast_1d(np.asarray(self.f_ref, dtype=float))
        q = self.f_ref.size
        self.penalties = np.atleast_2d(np.asarray(self.penalties, dtype=float))
        if np.any(self.penalties <= 0):
            raise ValueError("penalties must be strictly positive")
        self.lb = np.full(q, -np.inf) if self.lb is None else np.broadcast_to(np.asarray(self.lb, dtype=float), (q,))
        self.ub = np.full(q, np.inf) if self.ub is None else np.broadcast_to(np.asarray(self.ub, dtype=float), (q,))

    @property
    def q(self):
        return self.f_ref.size

    def cost_matrix(self):
        if self.H_factor is not None:
            L = np.tril(np.asarray(self.H_factor, dtype=float))
            return L @ L.T + H_EPS * np.eye(self.q)
        if self.H is not None:
            return np.atleast_2d(np.asarray(self.H, dtype=float))
        return 2.0 * np.eye(self.q)

    def qp_data(self):
        """``(H, F, G, h)`` over the rows that enter the QP (dropped rows excluded)."""
        H = self.cost_matrix()
        F = -H @ self.f_ref
        rows = [r for r in self.rows if r.status != "dropped"]
        G = np.array([r.G_row for r in rows], dtype=float).reshape(len(rows), self.q)
        h = np.array([r.h_val for r in rows], dtype=float)
        return H, F, G, h, rows


@dataclass
class ForwardCache:
    H: np.ndarray
    F: np.ndarray
    G: np.ndarray
    h: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    lam_lb: np.ndarray
    lam_ub: np.ndarray
    rows: list
    inp: BarrierLayerInput
    status: str = qpcore.OPTIMAL
    relaxed: bool = False


@dataclass
class LayerGradients:
    dH: np.ndarray
    dF: np.ndarray
    dh: np.ndarray
    d_penalties: np.ndarray
    d_f_ref: np.ndarray
    d_H_factor: Optional[np.ndarray] = None
    flag: str = "ok"  # "ok", "ridge" or "singular"


def _relaxed_solve(H, F, G, h, lb, ub, config):
    """Slack on every HOCBF row: ``G u - s <= h``, ``s >= 0``, cost ``+ W_SLACK |s|^2``."""
    q, r = F.size, G.shape[0]
    Ha = np.zeros((q + r, q + r))
    Ha[:q, :q] = H
    Ha[q:, q:] = 2.0 * W_SLACK * np.eye(r)
    Fa = np.concatenate([F, np.zeros(r)])
    Ga = np.hstack([G, -np.eye(r)])
    lba = np.concatenate([lb, np.zeros(r)])
    uba = np.concatenate([ub, np.full(r, np.inf)])
    return qpcore.solve_qp(qpcore.QpProblem(Ha, Fa, Ga, h, lba, uba), config)


def layer_forward(inp: BarrierLayerInput, config: Optional[SolverConfig] = None):
    """Solve the neuron's QP. Returns ``(u_star, cache)``."""
    config = config or SolverConfig()
    H, F, G, h, rows = inp.qp_data()
    for r in inp.rows:
        if r.status == "infeasible-row" and not inp.relax:
            raise QpInfeasibleError(f"row {r.name!r} has zero control gain and negative bound")
    sol = qpcore.solve_qp(qpcore.QpProblem(H, F, G, h, inp.lb, inp.ub), config)
    relaxed = False
    if sol.status == qpcore.INFEASIBLE:
        if not inp.relax:
            raise QpInfeasibleError("HOCBF rows conflict with the control bounds")
        log.info("event=relaxed rows=%d", G.shape[0])
        aug = _relaxed_solve(H, F, G, h, inp.lb, inp.ub, config)
        if not aug.ok:
            raise QpInfeasibleError(f"relaxed QP failed with status {aug.status}")
        q = inp.q
        sol = qpcore.QpSolution(aug.u_star[:q], aug.lambda_star, aug.lambda_lb[:q], aug.lambda_ub[:q],
                                aug.active_set, qpcore.OPTIMAL, aug.iterations)
        relaxed = True
    elif sol.status != qpcore.OPTIMAL:
        raise QpInfeasibleError(f"QP solve failed with status {sol.status}")
    cache = ForwardCache(H, F, G, h, inp.lb.copy(), inp.ub.copy(), sol.u_star, sol.lambda_star,
                         sol.lambda_lb, sol.lambda_ub, rows, inp, sol.status, relaxed)
    return sol.u_star, cache


def active_mask(H, F, A, b, u, lam):
    """Rows that are primal-active with a multiplier clearly above zero.

    Active rows with a vanishing multiplier are treated as inactive, which is
    the limit of the solution map from the interior.
    """
    scale = 1.0 + np.max(np.abs(F), axis=-1, initial=0.0) + np.max(np.abs(np.einsum("...ij,...j->...i", H, u)), axis=-1, initial=0.0)
    norms = np.sqrt(np.sum(A * A, axis=-1))
    with np.errstate(invalid="ignore"):
        slack = np.where(np.isfinite(b), np.einsum("...ij,...j->...i", A, u) - b, -np.inf)
    return (lam * norms > LAM_TOL * np.asarray(scale)[..., None]) & (slack >= -1e-6 * (1.0 + np.abs(np.where(np.isfinite(b), b, 0.0))))


class BatchForward(NamedTuple):
    H: np.ndarray
    F: np.ndarray
    A: np.ndarray
    b: np.ndarray
    u: np.ndarray
    lam: np.ndarray  # over expanded rows [G; I; -I]
    status: np.ndarray
    r: int


def forward_batch(H, F, G, h, lb, ub, config: Optional[SolverConfig] = None) -> BatchForward:
    config = config or SolverConfig()
    H = qpcore.as_buffer(H)
    F = qpcore.as_buffer(F)
    N, q = F.shape
    G = qpcore.as_buffer(np.reshape(G, (N, -1, q)))
    h = qpcore.as_buffer(np.reshape(h, (N, -1)))
    sol = qpcore.solve_qp_batch(H, F, G, h, lb, ub, config)
    A, b = qpcore.expand_rows(G, h, np.broadcast_to(lb, (N, q)), np.broadcast_to(ub, (N, q)))
    lam = np.concatenate([sol.lam, sol.lam_ub, sol.lam_lb], axis=1)
    return BatchForward(H, F, A, b, sol.u, lam, sol.status, G.shape[1])


def backward_batch(fwd: BatchForward, dl_du, config: Optional[SolverConfig] = None):
    """Returns ``(dF, dh, flags)``; ``dh`` covers the HOCBF rows only."""
    config = config or SolverConfig()
    dl_du = qpcore.as_buffer(dl_du)
    mask = active_mask(fwd.H, fwd.F, fwd.A, fwd.b, fwd.u, fwd.lam)
    mask &= (fwd.status == OPTIMAL)[:, None]
    d_u, d_lam, flags = config.kernels().kkt_backward_batch(
        fwd.H, fwd.A, qpcore.as_buffer(fwd.u), qpcore.as_buffer(fwd.lam),
        qpcore.as_buffer(mask, np.int8), dl_du,
    )
    bad = fwd.status != OPTIMAL
    if np.any(bad):
        d_u[bad] = 0.0
        d_lam[bad] = 0.0
    dh_all = -fwd.lam * d_lam
    return d_u, dh_all[:, :fwd.r], flags


def layer_backward(cache: ForwardCache, dL_du, config: Optional[SolverConfig] = None) -> LayerGradients:
    inp = cache.inp
    q = inp.q
    fwd = BatchForward(
        cache.H[None], cache.F[None], *qpcore.expand_rows(cache.G[None], cache.h[None], cache.lb[None], cache.ub[None]),
        cache.u[None], np.concatenate([cache.lam, cache.lam_ub, cache.lam_lb])[None],
        np.array([OPTIMAL]), cache.G.shape[0],
    )
    dF, dh, flags = backward_batch(fwd, np.asarray(dL_du, dtype=float).reshape(1, q), config)
    dF, dh = dF[0], dh[0]
    flag = {0: "ok", 1: "ridge", 2: "singular"}[int(flags[0])]
    if flag != "ok":
        log.info("event=kkt_%s rows=%d", flag, cache.G.shape[0])
    u = cache.u
    dH = 0.5 * (np.outer(dF, u) + np.outer(u, dF))
    d_f_ref = -cache.H @ dF
    d_pen = np.zeros_like(inp.penalties)
    for j, row in enumerate(cache.rows):
        if row.trainable and j < d_pen.shape[0]:
            d_pen[j, : len(row.partials)] += dh[j] * np.asarray(row.partials)
    d_factor = None
    if inp.H_factor is not None:
        # total derivative through H = L L' + eps I, including F = -H f_ref
        f = inp.f_ref
        GH = dH - 0.5 * (np.outer(dF, f) + np.outer(f, dF))
        d_factor = np.tril(2.0 * GH @ np.tril(inp.H_factor))
    return LayerGradients(dH=dH, dF=dF, dh=dh, d_penalties=d_pen, d_f_ref=d_f_ref, d_H_factor=d_factor, flag=flag)


# Finite-difference verification -----------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    skipped: bool = False
    reason: str = ""
    errors: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.skipped or self.max_rel_error <= 1e-4


def _relative_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    mag = np.maximum(np.abs(a), np.abs(b))
    err = np.abs(a - b)
    return float(np.max(np.where(mag < floor, err, err / np.maximum(mag, floor)), initial=0.0))


def grad_check(inp: BarrierLayerInput, dL_du, rebuild: Optional[Callable] = None,
               step=1e-5, config: Optional[SolverConfig] = None,
               backward: Optional[Callable] = None, floor: Optional[float] = None) -> GradCheckReport:
    """Compare analytic layer gradients with central differences of ``dL_du . u*``.

    ``rebuild(penalties) -> rows`` enables the penalty check. ``backward`` lets
    tests substitute a broken backward pass. Returns a skipped report when a
    perturbation changes the active set. Entries below ``floor`` in magnitude
    are compared absolutely; by default the floor tracks the differencing noise.
    """
    config = config or SolverConfig()
    g = np.asarray(dL_du, dtype=float)
    u0, cache = layer_forward(inp, config)
    grads = (backward or layer_backward)(cache, g, config)
    H, F, G, h = cache.H, cache.F, cache.G, cache.h
    lb, ub = cache.lb, cache.ub

    def signature(u, Hm, Fm, Gm, hm):
        A, b = qpcore.expand_rows(Gm[None], hm[None], lb[None], ub[None])
        with np.errstate(invalid="ignore"):
            slack = np.where(np.isfinite(b[0]), A[0] @ u - b[0], -np.inf)
        return tuple(np.flatnonzero(slack >= -1e-7 * (1.0 + np.abs(np.where(np.isfinite(b[0]), b[0], 0.0)))))

    base_sig = signature(u0, H, F, G, h)

    def raw(Hm, Fm, Gm, hm):
        sol = qpcore.solve_qp(qpcore.QpProblem(Hm, Fm, Gm, hm, lb, ub), config)
        if not sol.ok:
            raise _Flip("perturbed solve not optimal")
        if signature(sol.u_star, Hm, Fm, Gm, hm) != base_sig:
            raise _Flip("active set changed under perturbation")
        return g @ sol.u_star

    def central(fn, x0):
        x0 = np.asarray(x0, dtype=float)
        out = np.zeros_like(x0)
        for idx in np.ndindex(x0.shape):
            xp = x0.copy()
            xm = x0.copy()
            xp[idx] += step
            xm[idx] -= step
            out[idx] = (fn(xp) - fn(xm)) / (2 * step)
        return out

    # near-zero gradients are compared absolutely, down to the differencing noise
    if floor is None:
        floor = max(1e-6, 1e-10 * np.linalg.norm(g) * (1.0 + np.linalg.norm(u0)) / step)

    def _rel_err(a, b):
        return _relative_error(a, b, floor)

    report = GradCheckReport()
    try:
        report.errors["F"] = _rel_err(grads.dF, central(lambda v: raw(H, v, G, h), F))
        if G.shape[0]:
            report.errors["h"] = _rel_err(grads.dh, central(lambda v: raw(H, F, G, v), h))
        report.errors["f_ref"] = _rel_err(grads.d_f_ref, central(lambda v: raw(H, -H @ v, G, h), inp.f_ref))
        if inp.H_factor is None:
            q = inp.q
            fd = np.zeros((q, q))
            for i in range(q):
                for j in range(i, q):
                    E = np.zeros((q, q))
                    E[i, j] += 1.0
                    if i != j:
                        E[j, i] += 1.0
                    fd[i, j] = (raw(H + step * E, F, G, h) - raw(H - step * E, F, G, h)) / (2 * step)
            sym = np.where(np.eye(q, dtype=bool), grads.dH, 2.0 * grads.dH)
            report.errors["H"] = _rel_err(np.triu(sym), np.triu(fd))
        else:
            L0 = np.tril(np.asarray(inp.H_factor, dtype=float))

            def via_factor(Lm):
                Lm = np.tril(Lm)
                Hm = Lm @ Lm.T + H_EPS * np.eye(inp.q)
                return raw(Hm, -Hm @ inp.f_ref, G, h)

            fd = np.tril(central(via_factor, L0))
            report.errors["H_factor"] = _rel_err(grads.d_H_factor, fd)
        if rebuild is not None and G.shape[0]:

            def via_pen(p):
                rows = [r for r in rebuild(p) if r.status != "dropped"]
                Gm = np.array([r.G_row for r in rows], dtype=float).reshape(len(rows), inp.q)
                hm = np.array([r.h_val for r in rows], dtype=float)
                return raw(H, F, Gm, hm)

            report.errors["penalties"] = _rel_err(grads.d_penalties, central(via_pen, inp.penalties))
    except _Flip as exc:
        report.skipped = True
        report.reason = str(exc)
        return report
    report.max_rel_error = max(report.errors.values(), default=0.0)
    return report


class _Flip(Exception):
    pass


def random_instance(rng, q_max=3, r_max=4, factor=None):
    """Random layer input with HOCBF-shaped rows, plus the ``rebuild`` for penalty checks.

    Each row mimics a relative-degree-2 linear row,
    ``h = c2 + (p1 + p2) c1 + p1 p2 c0``, with random coefficients.
    """
    q = int(rng.integers(1, q_max + 1))
    r = int(rng.integers(0, r_max + 1))
    G = rng.normal(size=(r, q))
    c = rng.normal(size=(r, 3)) * np.array([1.0, 1.0, 2.0])
    pen = rng.uniform(0.3, 3.0, size=(max(r, 1), 2))

    def rebuild(p):
        rows = []
        for j in range(r):
            p1, p2 = p[j]
            h = c[j, 2] + (p1 + p2) * c[j, 1] + p1 * p2 * c[j, 0]
            partials = np.array([c[j, 1] + p2 * c[j, 0], c[j, 1] + p1 * c[j, 0]])
            rows.append(HocbfRow(G[j].copy(), float(h), partials, name=f"row{j}"))
        return rows

    if factor is None:
        factor = bool(rng.integers(0, 2))
    H_factor = None
    if factor:
        H_factor = np.tril(rng.normal(size=(q, q)))
        H_factor[np.diag_indices(q)] = rng.uniform(0.5, 2.0, size=q)
    bounds = rng.integers(0, 2)
    lb = -rng.uniform(1.0, 4.0, size=q) if bounds else None
    ub = rng.uniform(1.0, 4.0, size=q) if bounds else None
    f_ref = rng.normal(scale=2.0, size=q)
    inp = BarrierLayerInput(f_ref, pen, rebuild(pen), lb, ub, H_factor=H_factor)
    return inp, rebuild


def sweep_grad_check(count=500, seed=7, max_draws=None, backward=None, config=None, floor=None):
    """Run :func:`grad_check` until ``count`` non-skipped instances are collected.

    Infeasible draws are redrawn. Returns a summary dict.
    """
    rng = np.random.default_rng(seed)
    max_draws = 20 * count + 100 if max_draws is None else max_draws
    errors, skipped, infeasible, draws = [], 0, 0, 0
    while len(errors) < count and draws < max_draws:
        draws += 1
        inp, rebuild = random_instance(rng)
        g = rng.normal(size=inp.q)
        try:
            rep = grad_check(inp, g, rebuild=rebuild, config=config, backward=backward, floor=floor)
        except QpInfeasibleError:
            infeasible += 1
            continue
        if rep.skipped:
            skipped += 1
            continue
        errors.append(rep.max_rel_error)
    errors = np.asarray(errors)
    return {
        "checked": int(errors.size),
        "skipped": skipped,
        "infeasible_draws": infeasible,
        "max_rel_error": float(errors.max(initial=0.0)),
        "passed": int(np.sum(errors <= 1e-4)),
        "pass_rate": float(np.mean(errors <= 1e-4)) if errors.size else 0.0,
    }
