"""Control-affine dynamics, RK4 integration with zero-order hold, and the case-study scenarios."""
import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import cbf

log = logging.getLogger(__name__)

SCENARIOS = ("merging", "nav2d", "nav3d")


class NonFiniteStateError(RuntimeError):
    pass


class InfeasibleStepError(RuntimeError):
    """Raised by :func:`rollout` when the controller reports an infeasible QP."""

    def __init__(self, step, trajectory):
        super().__init__(f"controller infeasible at step {step}")
        self.step = step
        self.trajectory = trajectory


@dataclass
class AffineSystem:
    """``x' = f(x, t) + g(x, t) u`` with box control bounds."""

    name: str
    n: int
    q: int
    f: Callable
    g: Callable
    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self):
        self.u_min = np.broadcast_to(np.asarray(self.u_min, dtype=float), (self.q,)).copy()
        self.u_max = np.broadcast_to(np.asarray(self.u_max, dtype=float), (self.q,)).copy()

    def dynamics(self, x, u, t=0.0):
        return self.f(x, t) + self.g(x, t) @ u


def double_integrator(dim=1, u_bound=np.inf, name=None) -> AffineSystem:
    """Per-axis ``(p, v)`` pairs interleaved: ``(p1, v1, p2, v2, ...)``."""

    def f(x, t=0.0):
        out = np.zeros_like(x)
        out[0::2] = x[1::2]
        return out

    g0 = np.zeros((2 * dim, dim))
    for i in range(dim):
        g0[2 * i + 1, i] = 1.0

    def g(x, t=0.0):
        return g0

    return AffineSystem(name or f"double_integrator{dim}", 2 * dim, dim, f, g, -u_bound, u_bound)


def unicycle(u_min=(-2.0, -5.0), u_max=(2.0, 5.0)) -> AffineSystem:
    """State ``(x, y, theta, v)``, controls (turn rate, acceleration)."""

    def f(x, t=0.0):
        return np.array([x[3] * math.cos(x[2]), x[3] * math.sin(x[2]), 0.0, 0.0])

    g0 = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

    def g(x, t=0.0):
        return g0

    return AffineSystem("unicycle", 4, 2, f, g, u_min, u_max)


def preceding_accel(profile, t):
    """Scripted acceleration of the preceding vehicle (constant speed plus optional braking)."""
    if not profile or profile.get("brake_start") is None:
        return 0.0
    t0 = profile["brake_start"]
    if t0 <= t < t0 + profile.get("brake_duration", 0.0):
        return -abs(profile.get("brake_decel", 0.0))
    return 0.0


def merging_system(profile=None, u_bound=5.0) -> AffineSystem:
    """Ego double integrator plus scripted preceding vehicle: ``(x_p, v_p, x, v)``."""
    profile = dict(profile or {})

    def f(x, t=0.0):
        a_p = preceding_accel(profile, t)
        if x[1] <= 0.0 and a_p < 0.0:
            a_p = 0.0
        return np.array([x[1], a_p, x[3], 0.0])

    g0 = np.array([[0.0], [0.0], [0.0], [1.0]])

    def g(x, t=0.0):
        return g0

    return AffineSystem("merging", 4, 1, f, g, -u_bound, u_bound)


def rk4(system: AffineSystem, x, u, dt, t=0.0):
    """One RK4 step with ``u`` held constant over ``[t, t + dt]``."""
    k1 = system.dynamics(x, u, t)
    k2 = system.dynamics(x + 0.5 * dt * k1, u, t + 0.5 * dt)
    k3 = system.dynamics(x + 0.5 * dt * k2, u, t + 0.5 * dt)
    k4 = system.dynamics(x + dt * k3, u, t + dt)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step(system: AffineSystem, x, u, dt, t=0.0):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float).reshape(system.q)
    clipped = np.clip(u, system.u_min, system.u_max)
    if np.any(np.abs(clipped - u) > 1e-9 * (1.0 + np.abs(u))):
        log.warning("event=control_clamped system=%s t=%.6g", system.name, t)
    with np.errstate(over="ignore", invalid="ignore"):  # checked just below
        x_next = rk4(system, x, clipped, dt, t)
    if not np.all(np.isfinite(x_next)):
        raise NonFiniteStateError(f"non-finite state after step at t={t:.6g}: {x_next}")
    return x_next


# Configuration -------------------------------------------------------------


@dataclass
class ScenarioConfig:
    """Scenario parameters; the JSON form has the same keys."""

    scenario: str
    dt: float = 0.02
    horizon: int = 1500
    u_min: List[float] = field(default_factory=list)
    u_max: List[float] = field(default_factory=list)
    obstacle: Optional[List[float]] = None
    R: Optional[float] = None
    phi: float = 1.8
    delta: float = 0.0
    L: Optional[float] = None
    destination: Optional[List[float]] = None
    dest_arc: Optional[dict] = None
    dest_tol: float = 0.5
    init_low: List[float] = field(default_factory=list)
    init_high: List[float] = field(default_factory=list)
    preceding: Optional[dict] = None
    reference: dict = field(default_factory=dict)
    expert_penalties: Optional[List[float]] = None  # fixed penalties of the expert QP; ones when unset

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.R is not None and self.R <= 0:
            raise ValueError("R must be positive")
        if self.phi <= 0:
            raise ValueError("phi must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


CONFIG_DIR = Path(__file__).with_name("configs")


def default_config(name) -> ScenarioConfig:
    """Load one of the shipped configs (``merging``, ``nav2d``, ``nav3d``)."""
    return ScenarioConfig.load(CONFIG_DIR / f"{name}.json")


# Scenarios -----------------------------------------------------------------


@dataclass
class Episode:
    x0: np.ndarray
    destination: Optional[np.ndarray] = None
    seed: Optional[int] = None


@dataclass
class Scenario:
    config: ScenarioConfig
    system: AffineSystem
    constraints: List[cbf.HocbfConstraint]
    observe: Callable  # (x, episode) -> z
    reference: Callable  # (x, episode) -> nominal control
    done: Callable  # (x, episode) -> bool

    @property
    def name(self):
        return self.config.scenario

    def b_values(self, x):
        return np.array([c.b(x) for c in self.constraints], dtype=float)

    def is_safe(self, x, tol=0.0):
        return bool(np.all(self.b_values(x) >= -tol))

    def sample_episode(self, rng, max_tries=1000) -> Episode:
        """Uniform draw from the configured boxes, rejected until inside every safe set."""
        cfg = self.config
        for _ in range(max_tries):
            dest = self._sample_destination(rng)
            x0 = rng.uniform(cfg.init_low, cfg.init_high)
            if cfg.scenario == "nav2d":
                # third entry is a heading offset relative to the line of sight
                x0[2] = math.atan2(dest[1] - x0[1], dest[0] - x0[0]) + x0[2]
            ep = Episode(np.asarray(x0, dtype=float), dest)
            if self.initial_safe(ep.x0):
                return ep
        raise RuntimeError("could not sample an initial state inside the safe set")

    def initial_safe(self, x0):
        """Initial state inside ``C_1 ∩ ... ∩ C_m`` (the ``psi_i`` at unit penalties)."""
        for c in self.constraints:
            psi = cbf.psi_eval(c, x0, np.ones(c.rel_degree))
            if any(v < 0 for v in psi[:-1]):
                return False
        return True

    def _sample_destination(self, rng):
        cfg = self.config
        if cfg.dest_arc:
            arc = cfg.dest_arc
            ang = math.radians(arc["angle_deg"] + rng.uniform(-arc["half_width_deg"], arc["half_width_deg"]))
            c = np.asarray(arc["center"], dtype=float)
            return c + arc["radius"] * np.array([math.cos(ang), math.sin(ang)])
        if cfg.destination is not None:
            return np.asarray(cfg.destination, dtype=float)
        return None


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def _arrived(offset, heading, tol):
    """Within ``tol`` of the destination, or already past it (behind the motion) within ``5 tol``."""
    dist = float(np.linalg.norm(offset))
    return dist <= tol or (dist <= 5 * tol and float(np.dot(offset, heading)) < 0.0)


def make_scenario(config: ScenarioConfig) -> Scenario:
    cfg = config
    ref = dict(cfg.reference)
    if cfg.scenario == "merging":
        system = merging_system(cfg.preceding, u_bound=cfg.u_max[0] if cfg.u_max else 5.0)
        system.u_min = np.asarray(cfg.u_min or [-5.0], dtype=float)
        constraint = cbf.rear_end_constraint(cfg.phi, cfg.delta)
        v_des, k_v = ref.get("v_des", 20.0), ref.get("k_v", 0.5)

        def observe(x, ep=None):
            return np.asarray(x, dtype=float).copy()

        def reference(x, ep=None):
            return np.clip(np.array([k_v * (v_des - x[3])]), system.u_min, system.u_max)

        def done(x, ep=None):
            return cfg.L is not None and x[2] >= cfg.L

        return Scenario(cfg, system, [constraint], observe, reference, done)

    if cfg.scenario == "nav2d":
        system = unicycle(cfg.u_min or (-2.0, -5.0), cfg.u_max or (2.0, 5.0))
        xo, yo = cfg.obstacle
        constraint = cbf.circle_constraint(xo, yo, cfg.R)
        k_th, k_v, k_d, v_max = ref.get("k_theta", 1.5), ref.get("k_v", 1.0), ref.get("k_d", 1.0), ref.get("v_max", 5.0)

        def observe(x, ep):
            return np.concatenate([x, ep.destination])

        def reference(x, ep):
            d = ep.destination - x[:2]
            dist = math.hypot(d[0], d[1])
            heading = _wrap(math.atan2(d[1], d[0]) - x[2])
            v_des = min(v_max, k_d * dist)
            return np.clip(np.array([k_th * heading, k_v * (v_des - x[3])]), system.u_min, system.u_max)

        def done(x, ep):
            d = ep.destination - x[:2]
            return _arrived(d, np.array([math.cos(x[2]), math.sin(x[2])]), cfg.dest_tol)

        return Scenario(cfg, system, [constraint], observe, reference, done)

    if cfg.scenario == "nav3d":
        system = double_integrator(3, name="nav3d")
        system.u_min = np.asarray(cfg.u_min or [-10.0] * 3, dtype=float)
        system.u_max = np.asarray(cfg.u_max or [10.0] * 3, dtype=float)
        constraint = cbf.superquadric_constraint(cfg.obstacle, cfg.R)
        k_v, k_d, v_max = ref.get("k_v", 2.0), ref.get("k_d", 1.0), ref.get("v_max", 4.0)

        def observe(x, ep=None):
            return np.asarray(x, dtype=float).copy()

        def reference(x, ep):
            p, v = x[0::2], x[1::2]
            d = ep.destination - p
            dist = float(np.linalg.norm(d))
            v_des = min(v_max, k_d * dist) * d / max(dist, 1e-9)
            return np.clip(k_v * (v_des - v), system.u_min, system.u_max)

        def done(x, ep):
            return _arrived(ep.destination - x[0::2], x[1::2], cfg.dest_tol)

        return Scenario(cfg, system, [constraint], observe, reference, done)

    raise ValueError(f"unknown scenario {cfg.scenario!r}")


# Rollouts ------------------------------------------------------------------


@dataclass
class Trajectory:
    """Per-step records; row ``k`` holds the state at ``times[k]`` and the control applied from it."""

    times: np.ndarray
    states: np.ndarray
    observations: np.ndarray
    controls: np.ndarray
    b_values: np.ndarray
    flags: list
    final_state: np.ndarray
    constraint_names: tuple = ()
    final_b: Optional[np.ndarray] = None
    dt: float = float("nan")

    def __len__(self):
        return len(self.times)

    @property
    def min_b(self):
        vals = [np.min(self.b_values, axis=0)] if len(self) else []
        if self.final_b is not None:
            vals.append(self.final_b)
        if not vals:
            return np.full(len(self.constraint_names), np.inf)
        return np.min(np.vstack(vals), axis=0)

    def columns(self):
        n = self.states.shape[1]
        d = self.observations.shape[1]
        q = self.controls.shape[1]
        names = self.constraint_names or tuple(f"c{j}" for j in range(self.b_values.shape[1]))
        return (["t"] + [f"x{i}" for i in range(n)] + [f"z{i}" for i in range(d)]
                + [f"u{i}" for i in range(q)] + [f"b_{nm}" for nm in names] + ["flags"])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            for k in range(len(self)):
                nums = np.concatenate([[self.times[k]], self.states[k], self.observations[k],
                                       self.controls[k], self.b_values[k]])
                w.writerow([format(v, ".17g") for v in nums] + ["|".join(self.flags[k])])
            nums = np.concatenate([[len(self) * self.dt], self.final_state])
            w.writerow(["#final"] + [format(v, ".17g") for v in nums])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        final = [r for r in body if r and r[0] == "#final"]
        body = [r for r in body if r and r[0] != "#final"]
        n = sum(1 for c in header if c.startswith("x"))
        d = sum(1 for c in header if c.startswith("z"))
        q = sum(1 for c in header if c.startswith("u"))
        names = tuple(c[2:] for c in header if c.startswith("b_"))
        m = len(names)
        data = np.array([[float(v) for v in r[:-1]] for r in body]).reshape(len(body), 1 + n + d + q + m)
        flags = [tuple(f for f in r[-1].split("|") if f) for r in body]
        final_state = np.array([float(v) for v in final[0][2:]]) if final else np.zeros(n)
        dt = float(data[1, 0] - data[0, 0]) if len(body) > 1 else float("nan")
        if final and len(body) == 1:
            dt = float(final[0][1])
        s = 1
        return cls(
            times=data[:, 0], states=data[:, s:s + n], observations=data[:, s + n:s + n + d],
            controls=data[:, s + n + d:s + n + d + q], b_values=data[:, s + n + d + q:],
            flags=flags, final_state=final_state, constraint_names=names, dt=dt,
        )


def rollout(scenario: Scenario, controller, episode: Episode, horizon=None) -> Trajectory:
    """Closed-loop simulation; ``controller(x, z, t)`` returns ``(u, flags)``.

    Stops after ``horizon`` steps or when the scenario's goal test fires. Raises
    :class:`InfeasibleStepError` (carrying the partial trajectory) when the
    controller flags an infeasible step.
    """
    cfg = scenario.config
    horizon = cfg.horizon if horizon is None else horizon
    sys_ = scenario.system
    x = np.asarray(episode.x0, dtype=float).copy()
    names = tuple(c.name for c in scenario.constraints)
    times, states, obs, controls, bs, flags = [], [], [], [], [], []
    t = 0.0

    def build(final):
        d = len(scenario.observe(x, episode))
        return Trajectory(
            times=np.array(times, dtype=float),
            states=np.array(states, dtype=float).reshape(-1, sys_.n),
            observations=np.array(obs, dtype=float).reshape(-1, d),
            controls=np.array(controls, dtype=float).reshape(-1, sys_.q),
            b_values=np.array(bs, dtype=float).reshape(-1, len(names)),
            flags=flags, final_state=final.copy(), constraint_names=names,
            final_b=scenario.b_values(final), dt=cfg.dt,
        )

    for k in range(horizon):
        if scenario.done(x, episode):
            break
        z = scenario.observe(x, episode)
        u, fl = controller(x, z, t)
        fl = tuple(fl or ())
        times.append(t)
        states.append(x.copy())
        obs.append(z)
        controls.append(np.asarray(u, dtype=float).reshape(sys_.q))
        bs.append(scenario.b_values(x))
        flags.append(fl)
        if "infeasible" in fl:
            for f_ in fl:
                log.info("event=%s step=%d t=%.6g scenario=%s", f_, k, t, scenario.name)
            raise InfeasibleStepError(k, build(x))
        if "relaxed" in fl:
            log.info("event=relaxed step=%d t=%.6g scenario=%s", k, t, scenario.name)
        x = step(sys_, x, controls[-1], cfg.dt, t)
        t = (k + 1) * cfg.dt
    return build(x)
