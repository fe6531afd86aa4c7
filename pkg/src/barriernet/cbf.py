"""High-order control barrier functions with trainable penalty factors.

Every evaluator accepts states of shape ``(..., n)`` and broadcasts over the
leading axes, so rows for a whole training batch are assembled in one call.
For relative degree ``m`` the softened sequence is

    psi_0 = b,   psi_i = d/dt psi_{i-1} + p_i * alpha_i(psi_{i-1}),

with the time derivatives of the penalties taken as zero (they are held
constant over each control interval). The last member is affine in ``u`` and
gives one QP row ``G u <= h``.
"""
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class ClassK:
    """``alpha(s) = gain * s**power``; ``power`` is 1 (linear) or an odd integer >= 3."""

    kind: str = "linear"
    gain: float = 1.0
    power: int = 1

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("class-K gain must be positive")
        if self.kind == "linear":
            if self.power != 1:
                raise ValueError("linear class-K has power 1")
        elif self.kind == "odd_power":
            if self.power < 3 or self.power % 2 == 0:
                raise ValueError("odd_power class-K needs an odd power >= 3")
        else:
            raise ValueError(f"unknown class-K kind {self.kind!r}")

    @classmethod
    def odd_power(cls, power, gain=1.0):
        return cls("odd_power", gain, power)

    def __call__(self, s):
        return self.gain * np.power(s, self.power)

    def deriv(self, s):
        if self.power == 1:
            return self.gain * np.ones_like(np.asarray(s, dtype=float))
        return self.gain * self.power * np.power(s, self.power - 1)


LINEAR = ClassK()


@dataclass
class HocbfConstraint:
    """Safety function ``b`` with hand-coded Lie derivatives.

    ``lie_f`` holds ``L_f b`` (and ``L_f^2 b`` when ``rel_degree`` is 2);
    ``lie_gf`` returns ``L_g L_f^{m-1} b`` with shape ``(..., q)``.
    """

    name: str
    rel_degree: int
    b_eval: Callable
    lie_f: Sequence[Callable]
    lie_gf: Callable
    classk: Sequence[ClassK] = field(default_factory=lambda: (LINEAR, LINEAR))

    def __post_init__(self):
        if self.rel_degree not in (1, 2):
            raise ValueError("only relative degree 1 and 2 are supported")
        if len(self.lie_f) < self.rel_degree:
            raise ValueError("need one drift Lie derivative per relative degree")
        self.classk = tuple(self.classk)
        if len(self.classk) < self.rel_degree:
            self.classk = self.classk + (LINEAR,) * (self.rel_degree - len(self.classk))

    def b(self, x):
        return self.b_eval(np.asarray(x, dtype=float))


@dataclass
class HocbfRow:
    """One row ``G_row . u <= h_val`` plus ``dh/dp_i`` for the backward pass."""

    G_row: np.ndarray
    h_val: float
    partials: np.ndarray
    trainable: bool = True
    name: str = ""
    status: str = "ok"  # "ok", "dropped" (0 <= h) or "infeasible-row" (0 <= h < 0)


def _penalties(p, m):
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != m:
        raise ValueError(f"expected {m} penalties, got shape {p.shape}")
    return [p[..., i] for i in range(m)]


def psi_eval(constraint: HocbfConstraint, x, penalties, u=None):
    """Return ``[psi_0, ..., psi_m]``.

    ``psi_0 .. psi_{m-1}`` do not depend on the control. ``psi_m`` does; it is
    evaluated at ``u`` (the drift part alone when ``u`` is None).
    """
    x = np.asarray(x, dtype=float)
    m = constraint.rel_degree
    p = _penalties(penalties, m)
    a = constraint.classk
    b = constraint.b(x)
    lf = constraint.lie_f[0](x)
    out = [b]
    if m == 2:
        out.append(lf + p[0] * a[0](b))
    G, h, _ = assemble_rows(constraint, x, penalties)
    last = h
    if u is not None:
        last = h - np.sum(G * np.asarray(u, dtype=float), axis=-1)
    out.append(last)
    return out


def assemble_rows(constraint: HocbfConstraint, x, penalties):
    """Vectorized row assembly: returns ``(G, h, dh_dp)``.

    Shapes ``(..., q)``, ``(...)`` and ``(..., m)``.
    """
    x = np.asarray(x, dtype=float)
    m = constraint.rel_degree
    p = _penalties(penalties, m)
    a = constraint.classk
    b = constraint.b(x)
    lf = constraint.lie_f[0](x)
    G = -np.asarray(constraint.lie_gf(x), dtype=float)
    if m == 1:
        h = lf + p[0] * a[0](b)
        dh = a[0](b)[..., None]
    else:
        lf2 = constraint.lie_f[1](x)
        psi1 = lf + p[0] * a[0](b)
        h = lf2 + p[0] * a[0].deriv(b) * lf + p[1] * a[1](psi1)
        dh1 = a[0].deriv(b) * lf + p[1] * a[1].deriv(psi1) * a[0](b)
        dh2 = a[1](psi1)
        dh = np.stack([dh1, dh2], axis=-1)
    return G, np.asarray(h, dtype=float), np.asarray(dh, dtype=float)


def assemble_row(constraint: HocbfConstraint, x, z=None, penalties=(1.0, 1.0)) -> HocbfRow:
    """Single-state row. ``z`` is accepted for interface symmetry; penalties carry its effect."""
    p = np.asarray(penalties, dtype=float)[: constraint.rel_degree]
    G, h, dh = assemble_rows(constraint, x, p)
    status = "ok"
    if not np.any(G):
        status = "dropped" if h >= 0 else "infeasible-row"
    return HocbfRow(G_row=G, h_val=float(h), partials=dh, name=constraint.name, status=status)


def _rk4_drift(system, x, dt, t=0.0):
    f = system.f
    k1 = f(x, t)
    k2 = f(x + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = f(x + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = f(x + dt * k3, t + dt)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def lie_check(constraint: HocbfConstraint, system, x, dt=1e-4, t=0.0):
    """Compare the hand-coded Lie derivatives with differences along the dynamics.

    Drift derivatives use central differences along the (RK4) flow of ``f``;
    the control term uses central differences of ``L_f^{m-1} b`` along each
    column of ``g``.
    """
    if not 1e-6 <= dt <= 1e-3:
        raise ValueError("dt must lie in [1e-6, 1e-3]")
    x = np.asarray(x, dtype=float)
    fwd = _rk4_drift(system, x, dt, t)
    bwd = _rk4_drift(system, x, -dt, t)
    b0, bf, bb = constraint.b(x), constraint.b(fwd), constraint.b(bwd)
    report = {}
    report["lf"] = abs(constraint.lie_f[0](x) - (bf - bb) / (2 * dt))
    if constraint.rel_degree == 2:
        report["lf2"] = abs(constraint.lie_f[1](x) - (bf - 2 * b0 + bb) / dt**2)
        inner = constraint.lie_f[0]
    else:
        inner = constraint.b
    g = np.asarray(system.g(x, t))
    num = np.array([(inner(x + dt * g[:, j]) - inner(x - dt * g[:, j])) / (2 * dt) for j in range(g.shape[1])])
    report["lgf"] = float(np.max(np.abs(np.asarray(constraint.lie_gf(x)) - num)))
    return report


# Case-study constraints -------------------------------------------------------


def rear_end_constraint(phi=1.8, delta=0.0, classk=LINEAR) -> HocbfConstraint:
    """Rear-end gap on state ``(x_p, v_p, x, v)``: ``b = x_p - x - phi v - delta``.

    Relative degree 1. Differentiating ``b`` along the double integrator gives
    ``L_f b = v_p - v`` and ``L_g b = -phi``.
    """

    def b(x):
        return x[..., 0] - x[..., 2] - phi * x[..., 3] - delta

    def lf(x):
        return x[..., 1] - x[..., 3]

    def lg(x):
        return np.full(x.shape[:-1] + (1,), -phi)

    return HocbfConstraint("rear_end", 1, b, (lf,), lg, (classk,))


def circle_constraint(xo, yo, R, classk=(LINEAR, LINEAR)) -> HocbfConstraint:
    """Disk obstacle for the unicycle ``(x, y, theta, v)``: ``b = |p - o|^2 - R^2``."""

    def b(x):
        return (x[..., 0] - xo) ** 2 + (x[..., 1] - yo) ** 2 - R**2

    def lf(x):
        dx, dy, th, v = x[..., 0] - xo, x[..., 1] - yo, x[..., 2], x[..., 3]
        return 2 * dx * v * np.cos(th) + 2 * dy * v * np.sin(th)

    def lf2(x):
        return 2 * x[..., 3] ** 2

    def lgf(x):
        dx, dy, th, v = x[..., 0] - xo, x[..., 1] - yo, x[..., 2], x[..., 3]
        c, s = np.cos(th), np.sin(th)
        return np.stack([-2 * dx * v * s + 2 * dy * v * c, 2 * dx * c + 2 * dy * s], axis=-1)

    return HocbfConstraint("circle", 2, b, (lf, lf2), lgf, classk)


def superquadric_constraint(center, R, classk=(LINEAR, LINEAR)) -> HocbfConstraint:
    """Quartic box-like obstacle on ``(px, vx, py, vy, pz, vz)``: ``b = sum (p - o)^4 - R^4``."""
    o = np.asarray(center, dtype=float)

    def _split(x):
        d = np.stack([x[..., 0] - o[0], x[..., 2] - o[1], x[..., 4] - o[2]], axis=-1)
        v = np.stack([x[..., 1], x[..., 3], x[..., 5]], axis=-1)
        return d, v

    def b(x):
        d, _ = _split(x)
        return np.sum(d**4, axis=-1) - R**4

    def lf(x):
        d, v = _split(x)
        return np.sum(4 * d**3 * v, axis=-1)

    def lf2(x):
        d, v = _split(x)
        return np.sum(12 * d**2 * v**2, axis=-1)

    def lgf(x):
        d, _ = _split(x)
        return 4 * d**3

    return HocbfConstraint("superquadric", 2, b, (lf, lf2), lgf, classk)
