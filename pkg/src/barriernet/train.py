"""Expert data, imitation training and the three evaluated controllers.

Controllers share one QP path:

* ``barriernet``: network outputs ``(f_ref, penalties)``, the QP layer is trained end to end;
* ``fc``: the network output is applied directly;
* ``dfb``: the ``fc`` network followed by a fixed HOCBF-QP filter with unit penalties.

The expert is the same QP with fixed penalties tracking the scenario's nominal reference.
"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import cbf, diffqp, systems
from ._backend import OPTIMAL
from .net import Adam, Mlp, Sgd
from .qpcore import SolverConfig
from .systems import Episode, ScenarioConfig, Trajectory

log = logging.getLogger(__name__)

EPS_SAFE = 1e-3
MODEL_KINDS = ("barriernet", "fc", "dfb")


class TrainingDivergedError(RuntimeError):
    pass


# QP assembly ----------------------------------------------------------------


def expert_penalties(scenario: systems.Scenario):
    m = max(c.rel_degree for c in scenario.constraints)
    p = scenario.config.expert_penalties
    p = np.ones(m) if p is None else np.asarray(p, dtype=float)
    return np.broadcast_to(p[:m], (len(scenario.constraints), m)).copy()


def assemble_batch(scenario: systems.Scenario, X, penalties):
    """Rows for every constraint at states ``X (N,n)``; ``penalties`` is ``(N,|S|,m)``.

    Returns ``G (N,|S|,q)``, ``h (N,|S|)`` and ``dh_dp (N,|S|,m)``.
    """
    X = np.atleast_2d(X)
    Gs, hs, dps = [], [], []
    for j, c in enumerate(scenario.constraints):
        G, h, dp = cbf.assemble_rows(c, X, penalties[:, j, : c.rel_degree])
        Gs.append(G)
        hs.append(h)
        dps.append(dp)
    return np.stack(Gs, axis=1), np.stack(hs, axis=1), np.stack(dps, axis=1)


def qp_forward(scenario, X, f_ref, penalties, config=None):
    """Batched layer forward with cost ``|u - f_ref|^2``."""
    N, q = f_ref.shape
    G, h, dp = assemble_batch(scenario, X, penalties)
    H = np.broadcast_to(2.0 * np.eye(q), (N, q, q))
    sys_ = scenario.system
    fwd = diffqp.forward_batch(H, -2.0 * f_ref, G, h, sys_.u_min, sys_.u_max, config)
    return fwd, dp


def expert_controls(scenario, X, episode, config=None):
    """Expert QP controls at many states of one episode."""
    X = np.atleast_2d(X)
    f = np.array([scenario.reference(x, episode) for x in X]).reshape(len(X), -1)
    pen = np.broadcast_to(expert_penalties(scenario), (len(X),) + expert_penalties(scenario).shape)
    fwd, _ = qp_forward(scenario, X, f, pen, config)
    return fwd.u, fwd.status


# Controllers ------------------------------------------------------------------


class QpController:
    """``(x, z, t) -> (u, flags)`` wrapper with solve-time bookkeeping."""

    def __init__(self, scenario, policy, relax=False):
        self.scenario = scenario
        self.policy = policy  # (x, z) -> (f_ref (q,), penalties (|S|,m) or None)
        self.relax = relax
        self.solve_times = []

    def __call__(self, x, z, t):
        sys_ = self.scenario.system
        t0 = time.perf_counter()
        f, pen = self.policy(x, z)
        if pen is None:
            u = np.clip(f, sys_.u_min, sys_.u_max)
            self.solve_times.append(time.perf_counter() - t0)
            return u, ()
        fwd, _ = qp_forward(self.scenario, x[None], f[None], pen[None])
        self.solve_times.append(time.perf_counter() - t0)
        if fwd.status[0] == OPTIMAL:
            return fwd.u[0], ()
        if not self.relax:
            return np.clip(f, sys_.u_min, sys_.u_max), ("infeasible",)
        rows = [cbf.assemble_row(c, x, penalties=pen[j, : c.rel_degree]) for j, c in enumerate(self.scenario.constraints)]
        inp = diffqp.BarrierLayerInput(f, pen, rows, sys_.u_min, sys_.u_max, relax=True)
        try:
            u, cache = diffqp.layer_forward(inp)
        except diffqp.QpInfeasibleError:
            return np.clip(f, sys_.u_min, sys_.u_max), ("infeasible",)
        return u, (("relaxed",) if cache.relaxed else ())


def make_expert(scenario, episode, relax=False):
    pen = expert_penalties(scenario)
    return QpController(scenario, lambda x, z: (scenario.reference(x, episode), pen), relax)


def make_controller(kind, model: Mlp, scenario, relax=False):
    if kind == "barriernet":

        def policy(x, z):
            f, p, _ = model.forward(z)
            return f[0], p[0]

    elif kind == "fc":

        def policy(x, z):
            return model.forward(z)[0][0], None

    elif kind == "dfb":
        unit = np.ones((len(scenario.constraints), max(c.rel_degree for c in scenario.constraints)))

        def policy(x, z):
            return model.forward(z)[0][0], unit

    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return QpController(scenario, policy, relax)


# Dataset ----------------------------------------------------------------------


@dataclass
class Dataset:
    config: ScenarioConfig
    trajectories: List[Trajectory] = field(default_factory=list)
    episodes: List[Episode] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    def samples(self, indices=None, stride=1):
        """Stacked ``(Z, X, U, traj_id)`` over the selected trajectories."""
        indices = range(len(self)) if indices is None else indices
        Z, X, U, T = [], [], [], []
        for i in indices:
            tr = self.trajectories[i]
            sel = slice(None, None, stride)
            Z.append(tr.observations[sel])
            X.append(tr.states[sel])
            U.append(tr.controls[sel])
            T.append(np.full(len(tr.times[sel]), i))
        if not Z:
            return np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0, dtype=int)
        return np.vstack(Z), np.vstack(X), np.vstack(U), np.concatenate(T)

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for i, (tr, ep) in enumerate(zip(self.trajectories, self.episodes)):
            name = f"traj_{i:04d}.csv"
            tr.to_csv(out / name)
            files.append({
                "file": name,
                "x0": ep.x0.tolist(),
                "destination": None if ep.destination is None else np.asarray(ep.destination).tolist(),
                "seed": ep.seed,
            })
        manifest = {"scenario": self.config.to_dict(), "count": len(files), "trajectories": files, "meta": self.meta}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, in_dir):
        src = Path(in_dir)
        manifest = json.loads((src / "manifest.json").read_text())
        cfg = ScenarioConfig.from_dict(manifest["scenario"])
        trajs, eps = [], []
        for entry in manifest["trajectories"]:
            trajs.append(Trajectory.from_csv(src / entry["file"]))
            dest = entry["destination"]
            eps.append(Episode(np.array(entry["x0"]), None if dest is None else np.array(dest), entry.get("seed")))
        return cls(cfg, trajs, eps, manifest.get("meta", {}))


def generate_dataset(config: ScenarioConfig, count, seed=7, max_attempts=None) -> Dataset:
    """``count`` safe expert rollouts. Unsafe or infeasible ones are discarded and redrawn."""
    scenario = systems.make_scenario(config)
    max_attempts = 10 * count + 10 if max_attempts is None else max_attempts
    ds = Dataset(config, meta={"seed": seed, "expert_penalties": expert_penalties(scenario).tolist(), "discarded": 0})
    attempts = 0
    while len(ds) < count:
        if attempts >= max_attempts:
            raise RuntimeError(f"only {len(ds)} of {count} expert rollouts succeeded in {attempts} attempts")
        ep = scenario.sample_episode(np.random.default_rng([seed, attempts]))
        ep.seed = attempts
        attempts += 1
        try:
            tr = systems.rollout(scenario, make_expert(scenario, ep), ep)
        except systems.InfeasibleStepError as exc:
            log.info("event=expert_discarded reason=infeasible step=%d attempt=%d", exc.step, attempts)
            ds.meta["discarded"] += 1
            continue
        if len(tr) == 0 or np.min(tr.min_b) < -EPS_SAFE:
            log.info("event=expert_discarded reason=unsafe min_b=%.6g attempt=%d", float(np.min(tr.min_b)), attempts)
            ds.meta["discarded"] += 1
            continue
        ds.trajectories.append(tr)
        ds.episodes.append(ep)
    return ds


# Training ---------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 32
    seed: int = 7
    val_fraction: float = 0.1
    stride: int = 1  # keep every stride-th sample of each trajectory
    hidden: Sequence[int] = (128, 128)
    c_max: float = 10.0
    boundary_fraction: float = 0.05
    boundary_weight: float = 0.5

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.hidden = tuple(self.hidden)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainResult:
    model: Mlp
    kind: str
    initial_loss: tuple  # (train, val) before the first update
    curve: list  # (epoch, train_loss, val_loss) per epoch
    optimizer: object = None
    infeasible_samples: int = 0


def split_trajectories(n, val_fraction, seed):
    """90/10-style split by trajectory index."""
    idx = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    n_val = min(n_val, n - 1) if n > 1 else 0
    return np.sort(idx[n_val:]), np.sort(idx[:n_val])


def trajectory_weights(ds: Dataset, cfg: TrainConfig):
    """Down-weight nav trajectories that pass near the obstacle boundary."""
    w = np.ones(len(ds))
    if ds.config.scenario in ("nav2d", "nav3d") and ds.config.R:
        thresh = cfg.boundary_fraction * ds.config.R**2
        for i, tr in enumerate(ds.trajectories):
            if np.min(tr.min_b) < thresh:
                w[i] = cfg.boundary_weight
    return w


def new_model(kind, scenario, d, cfg: TrainConfig):
    q = scenario.system.q
    if kind == "barriernet":
        m = max(c.rel_degree for c in scenario.constraints)
        return Mlp.create(d, q, len(scenario.constraints), m, cfg.hidden, cfg.c_max, cfg.seed)
    if kind in ("fc", "dfb"):
        return Mlp.create(d, q, 0, 0, cfg.hidden, cfg.c_max, cfg.seed)
    raise ValueError(f"unknown model kind {kind!r}")


def batch_loss(kind, model, scenario, Z, X, U, w, need_grad=True, solver=None):
    """Weighted MSE ``sum w |u - u_e|^2 / sum w`` and optionally its parameter gradients."""
    f, pen, cache = model.forward(Z)
    wsum = float(np.sum(w))
    if kind == "barriernet":
        fwd, dp = qp_forward(scenario, X, f, pen, solver)
        ok = fwd.status == OPTIMAL
        u = np.where(ok[:, None], fwd.u, f)
        w = np.where(ok, w, 0.0)
    else:
        u = f
        ok = np.ones(len(f), dtype=bool)
    err = u - U
    loss = float(np.sum(w[:, None] * err**2) / wsum)
    if not need_grad:
        return loss, None, int(np.sum(~ok))
    dL_du = 2.0 * w[:, None] * err / wsum
    if kind == "barriernet":
        dF, dh, _ = diffqp.backward_batch(fwd, dL_du, solver)
        dL_df = -2.0 * dF
        dL_dp = dh[:, :, None] * dp
        grads = model.backward(cache, dL_df, dL_dp)
    else:
        grads = model.backward(cache, dL_du)
    return loss, grads, int(np.sum(~ok))


def _full_loss(kind, model, scenario, Z, X, U, w, chunk=4096):
    if len(Z) == 0:
        return float("nan")
    total = 0.0
    for s in range(0, len(Z), chunk):
        sl = slice(s, s + chunk)
        part, _, _ = batch_loss(kind, model, scenario, Z[sl], X[sl], U[sl], w[sl], need_grad=False)
        total += part * float(np.sum(w[sl]))
    return total / float(np.sum(w))


def train(kind, ds: Dataset, cfg: Optional[TrainConfig] = None, model: Optional[Mlp] = None,
          resume: Optional[dict] = None) -> TrainResult:
    """Minibatch imitation training. ``dfb`` trains the same network as ``fc``.

    ``resume`` holds ``{"optimizer": state, "epoch": k, "curve": [...]}`` from a
    checkpoint; training then continues at epoch ``k + 1``.
    """
    cfg = cfg or TrainConfig()
    if len(ds) == 0:
        raise ValueError("empty dataset")
    scenario = systems.make_scenario(ds.config)
    fit_kind = "fc" if kind == "dfb" else kind
    tr_idx, va_idx = split_trajectories(len(ds), cfg.val_fraction, cfg.seed)
    tw = trajectory_weights(ds, cfg)
    Z, X, U, T = ds.samples(tr_idx, cfg.stride)
    W = tw[T]
    Zv, Xv, Uv, Tv = ds.samples(va_idx, cfg.stride)
    Wv = tw[Tv] if len(Tv) else np.zeros(0)
    if model is None:
        model = new_model(kind, scenario, Z.shape[1], cfg)
        model.set_normalization(Z)
    params = model.params
    opt = Adam(params, cfg.lr) if cfg.optimizer == "adam" else Sgd(params, cfg.lr)
    start = 1
    curve = []
    if resume:
        opt.load_state(resume["optimizer"])
        start = int(resume["epoch"]) + 1
        curve = [tuple(r) for r in resume.get("curve", [])]
    init = (_full_loss(fit_kind, model, scenario, Z, X, U, W), _full_loss(fit_kind, model, scenario, Zv, Xv, Uv, Wv))
    rng = np.random.default_rng([cfg.seed, start])
    n_bad = 0
    for epoch in range(start, start + cfg.epochs):
        order = rng.permutation(len(Z))
        for s in range(0, len(Z), cfg.batch_size):
            b = order[s: s + cfg.batch_size]
            loss, grads, bad = batch_loss(fit_kind, model, scenario, Z[b], X[b], U[b], W[b])
            n_bad += bad
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} batch {s // cfg.batch_size} (loss={loss}, lr={cfg.lr}); "
                    "lower the learning rate"
                )
            opt.step(params, grads)
        tl = _full_loss(fit_kind, model, scenario, Z, X, U, W)
        vl = _full_loss(fit_kind, model, scenario, Zv, Xv, Uv, Wv)
        if not np.isfinite(tl):
            raise TrainingDivergedError(f"non-finite training loss after epoch {epoch} (lr={cfg.lr})")
        curve.append((epoch, tl, vl))
        log.info("event=epoch kind=%s epoch=%d train_loss=%.6g val_loss=%.6g", kind, epoch, tl, vl)
    if n_bad:
        log.info("event=infeasible_samples kind=%s count=%d", kind, n_bad)
    return TrainResult(model, kind, init, curve, opt, n_bad)


# Evaluation -------------------------------------------------------------------


def rollout_metrics(kind, model, scenario, episode, relax=False):
    """Roll out one controller and collect the per-rollout metrics."""
    ctrl = make_expert(scenario, episode, relax) if kind == "expert" else make_controller(kind, model, scenario, relax)
    out = {"kind": kind, "infeasible": False, "error": None}
    try:
        tr = systems.rollout(scenario, ctrl, episode)
    except systems.InfeasibleStepError as exc:
        tr = exc.trajectory
        out["infeasible"] = True
        out["error"] = f"infeasible step {exc.step}"
    except systems.NonFiniteStateError as exc:
        out["error"] = str(exc)
        out["min_b"] = float("-inf")
        return out, None
    mb = tr.min_b
    out["min_b"] = float(np.min(mb)) if len(mb) else float("inf")
    out["min_b_per_constraint"] = [float(v) for v in mb]
    out["steps"] = len(tr)
    out["relaxed_steps"] = sum("relaxed" in f for f in tr.flags)
    out["mean_solve_us"] = float(np.mean(ctrl.solve_times) * 1e6) if ctrl.solve_times else 0.0
    if len(tr):
        ue, st = expert_controls(scenario, tr.states, episode)
        good = st == OPTIMAL
        out["control_mse"] = float(np.mean(np.sum((tr.controls[good] - ue[good]) ** 2, axis=1))) if np.any(good) else float("nan")
    else:
        out["control_mse"] = float("nan")
    if episode.destination is not None:
        if scenario.name == "nav2d":
            pos = tr.final_state[:2]
        else:
            pos = tr.final_state[0::2]
        out["dest_error"] = float(np.linalg.norm(pos - episode.destination))
    if scenario.name == "merging":
        S = np.vstack([tr.states, tr.final_state[None]])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(S[:, 3] > 1e-9, (S[:, 0] - S[:, 2]) / S[:, 3], np.inf)
        out["min_gap_ratio"] = float(np.min(ratio))
    return out, tr


def evaluate(kind, model, config: ScenarioConfig, episodes, perturbations=None, relax=False):
    """Metrics for each episode under each perturbation (dicts of config overrides).

    Returns a list of ``{"perturbation": ..., "runs": [...]}`` entries.
    """
    perturbations = perturbations or [{}]
    results = []
    for pert in perturbations:
        scenario = systems.make_scenario(config.replace(**pert))
        runs = []
        for ep in episodes:
            m, _ = rollout_metrics(kind, model, scenario, ep, relax)
            runs.append(m)
        results.append({"perturbation": dict(pert), "runs": runs})
    return results


def sample_episodes(config: ScenarioConfig, count, seed):
    scenario = systems.make_scenario(config)
    rng = np.random.default_rng(seed)
    return [scenario.sample_episode(rng) for _ in range(count)]


def end_to_end_grad_error(kind, model: Mlp, scenario, Z, X, U, w=None, probes=40, seed=0, step=1e-5):
    """Largest relative error between backprop and central differences of the batch loss.

    Probes ``probes`` random parameter entries. Returns ``(max_rel_error, skipped)``
    where ``skipped`` counts probes whose perturbation changed a QP active set.
    """
    w = np.ones(len(Z)) if w is None else np.asarray(w, dtype=float)
    _, grads, _ = batch_loss(kind, model, scenario, Z, X, U, w)
    params = model.params
    rng = np.random.default_rng(seed)

    def signature():
        if kind != "barriernet":
            return None
        f, pen, _ = model.forward(Z)
        fwd, _ = qp_forward(scenario, X, f, pen)
        return diffqp.active_mask(fwd.H, fwd.F, fwd.A, fwd.b, fwd.u, fwd.lam).tobytes()

    base = signature()
    worst, skipped = 0.0, 0
    for _ in range(probes):
        k = int(rng.integers(len(params)))
        idx = tuple(int(rng.integers(s)) for s in params[k].shape)
        old = params[k][idx]
        params[k][idx] = old + step
        lp, _, _ = batch_loss(kind, model, scenario, Z, X, U, w, need_grad=False)
        sp = signature()
        params[k][idx] = old - step
        lm, _, _ = batch_loss(kind, model, scenario, Z, X, U, w, need_grad=False)
        sm = signature()
        params[k][idx] = old
        if sp != base or sm != base:
            skipped += 1
            continue
        fd = (lp - lm) / (2 * step)
        an = grads[k][idx]
        mag = max(abs(fd), abs(an))
        worst = max(worst, abs(fd - an) if mag < 1e-6 else abs(fd - an) / mag)
    return worst, skipped
