"""Acceptance criteria 1-8.

Each test prints one ``criterion N: PASS|FAIL`` line (also repeated in the
pytest terminal summary) and asserts the pinned tolerance. The closed-loop
criteria train real models and take a few minutes in total.
"""
import time

import numpy as np
import pytest

from barriernet import cbf, diffqp, systems, train
from barriernet.qpcore import QpProblem, solve_qp
from barriernet.systems import default_config
from barriernet.train import TrainConfig

from conftest import ACCEPTANCE_LINES
from oracles import brute_force_qp, rear_end_row, superquadric_row, unicycle_row

# pinned tolerances
QP_TOL = 1e-6
QP_RUNTIME_S = 30.0
GRAD_REL_TOL = 1e-4
GRAD_ABS_FLOOR = 1e-6
EPS_SAFE = 1e-3
GAP_RATIO_MIN = 1.8 - 0.01
SOLVE_BUDGET_US = 10_000.0
IDENTITY_TOL = 1e-12
PROGRESS_FRACTION = 0.10
EVAL_ROLLOUTS = 50
SWEEP_R = (6.0, 7.0, 8.0, 9.0)
MERGE_SEEDS = range(10)

slow = pytest.mark.slow


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def unsafe(runs):
    return [r for r in runs if r["min_b"] < -EPS_SAFE or r["infeasible"]]


# Shared trained models ------------------------------------------------------------


@pytest.fixture(scope="module")
def nav2d_models():
    cfg = default_config("nav2d")
    ds = train.generate_dataset(cfg, 100, seed=1)
    tc = TrainConfig(epochs=30, stride=2)
    bn = train.train("barriernet", ds, tc).model
    fc = train.train("fc", ds, tc).model
    eps = train.sample_episodes(cfg, EVAL_ROLLOUTS, seed=99)
    return cfg, {"barriernet": bn, "fc": fc, "dfb": fc}, eps


@pytest.fixture(scope="module")
def nav2d_results(nav2d_models):
    cfg, models, eps = nav2d_models
    sweep = [{"R": R} for R in SWEEP_R]
    return {kind: train.evaluate(kind, models[kind], cfg, eps, sweep) for kind in ("barriernet", "dfb", "fc")}


@pytest.fixture(scope="module")
def nav3d_results():
    cfg = default_config("nav3d")
    ds = train.generate_dataset(cfg, 50, seed=1)
    bn = train.train("barriernet", ds, TrainConfig(epochs=30, stride=2)).model
    eps = train.sample_episodes(cfg, EVAL_ROLLOUTS, seed=99)
    return train.evaluate("barriernet", bn, cfg, eps)[0]["runs"]


@pytest.fixture(scope="module")
def merging_models():
    """One BarrierNet and one FC model per seed, trained without preceding-vehicle braking."""
    ds = train.generate_dataset(default_config("merging"), 40, seed=1)
    out = {}
    for seed in MERGE_SEEDS:
        tc = TrainConfig(epochs=20, seed=seed)
        out[seed] = {kind: train.train(kind, ds, tc).model for kind in ("barriernet", "fc")}
    return out


@pytest.fixture(scope="module")
def merging_results(merging_models):
    cfg = default_config("merging")
    eps = train.sample_episodes(cfg, EVAL_ROLLOUTS, seed=99)
    return train.evaluate("barriernet", merging_models[0]["barriernet"], cfg, eps)[0]["runs"]


# Criteria -------------------------------------------------------------------------


def test_criterion_1_qp_oracle():
    rng = np.random.default_rng(20240)
    worst_u = worst_lam = 0.0
    solve_time = 0.0
    t_total = time.perf_counter()
    for _ in range(1000):
        q = int(rng.integers(1, 6))
        r = int(rng.integers(0, 7))
        M = rng.normal(size=(q, q))
        H = M @ M.T + 0.5 * np.eye(q)
        F = rng.normal(size=q) * 3
        G = rng.normal(size=(r, q))
        h = G @ rng.normal(size=q) + rng.uniform(0.05, 2.0, size=r)  # strictly feasible point known
        t0 = time.perf_counter()
        sol = solve_qp(QpProblem(H, F, G, h))
        solve_time += time.perf_counter() - t0
        ref_u, ref_lam = brute_force_qp(H, F, G, h)
        assert sol.ok
        worst_u = max(worst_u, float(np.max(np.abs(sol.u_star - ref_u))))
        worst_lam = max(worst_lam, float(np.max(np.abs(sol.lambda_star - ref_lam), initial=0.0)))
    total = time.perf_counter() - t_total
    ok = worst_u <= QP_TOL and worst_lam <= QP_TOL and total < QP_RUNTIME_S
    report(1, ok, f"max |u - u_bf| = {worst_u:.2e}, max |lam - lam_bf| = {worst_lam:.2e} (tol {QP_TOL:g}); "
                  f"solver {solve_time:.2f} s, total with oracle {total:.2f} s (< {QP_RUNTIME_S:g} s)")
    assert ok


def test_criterion_2_gradient_fidelity():
    t0 = time.perf_counter()
    s = diffqp.sweep_grad_check(500, seed=7, floor=GRAD_ABS_FLOOR)
    ok = s["checked"] == 500 and s["passed"] == 500 and s["max_rel_error"] <= GRAD_REL_TOL
    report(2, ok, f"{s['passed']}/{s['checked']} instances within rel {GRAD_REL_TOL:g} (floor {GRAD_ABS_FLOOR:g}), "
                  f"max rel error {s['max_rel_error']:.2e}, {s['skipped']} boundary skips, "
                  f"{time.perf_counter() - t0:.1f} s")
    assert ok


@slow
def test_criterion_3_safety(nav2d_results, nav3d_results, merging_results):
    parts, ok = [], True
    for entry in nav2d_results["barriernet"]:
        runs = entry["runs"]
        bad = unsafe(runs)
        ok &= not bad and len(runs) == EVAL_ROLLOUTS
        parts.append(f"nav2d R={entry['perturbation']['R']:g} min b {min(r['min_b'] for r in runs):.4g}")
    for name, runs in (("nav3d", nav3d_results), ("merging", merging_results)):
        ok &= not unsafe(runs) and len(runs) == EVAL_ROLLOUTS
        parts.append(f"{name} min b {min(r['min_b'] for r in runs):.4g}")
    report(3, ok, f"{EVAL_ROLLOUTS} rollouts each, bound -{EPS_SAFE:g} with no infeasible steps; " + "; ".join(parts))
    assert ok


@slow
def test_criterion_4_baseline_contrast(nav2d_results):
    by_r = {kind: {e["perturbation"]["R"]: e["runs"] for e in res} for kind, res in nav2d_results.items()}
    fc_unsafe_9 = sum(r["min_b"] < 0 for r in by_r["fc"][9.0])
    bn_safe_9 = not unsafe(by_r["barriernet"][9.0])
    dfb_safe_6 = not unsafe(by_r["dfb"][6.0])
    mse = {k: float(np.mean([r["control_mse"] for r in by_r[k][6.0]])) for k in ("barriernet", "dfb", "fc")}
    ok = fc_unsafe_9 >= 1 and bn_safe_9 and dfb_safe_6 and mse["dfb"] > mse["barriernet"]
    report(4, ok, f"R=9: FC unsafe in {fc_unsafe_9}/{EVAL_ROLLOUTS}, BarrierNet safe={bn_safe_9}; "
                  f"R=6: DFB safe={dfb_safe_6}, control MSE DFB {mse['dfb']:.3f} > BarrierNet {mse['barriernet']:.3f} "
                  f"(FC {mse['fc']:.3f})")
    assert ok


@slow
def test_criterion_5_merging_gap_ratio(merging_models):
    brk = default_config("merging_braking")
    eps = train.sample_episodes(brk, 20, seed=5)
    bn_ratios, fc_ratios = [], []
    for seed in MERGE_SEEDS:
        for kind, acc in (("barriernet", bn_ratios), ("fc", fc_ratios)):
            runs = train.evaluate(kind, merging_models[seed][kind], brk, eps)[0]["runs"]
            acc.append(min(r["min_gap_ratio"] for r in runs))
    fc_violations = sum(r < 1.8 for r in fc_ratios)
    ok = min(bn_ratios) >= GAP_RATIO_MIN and fc_violations >= 1
    report(5, ok, f"braking profile, 20 rollouts per seed: BarrierNet min gap/speed over 10 seeds "
                  f"{min(bn_ratios):.4f} (>= {GAP_RATIO_MIN:g}); FC seeds below 1.8: {fc_violations}/10 "
                  f"(worst {min(fc_ratios):.4f})")
    assert ok


@slow
def test_criterion_6_solve_time(nav2d_results, nav3d_results, merging_results):
    means = {
        "nav2d": float(np.mean([r["mean_solve_us"] for e in nav2d_results["barriernet"] for r in e["runs"]])),
        "nav3d": float(np.mean([r["mean_solve_us"] for r in nav3d_results])),
        "merging": float(np.mean([r["mean_solve_us"] for r in merging_results])),
    }
    ok = max(means.values()) <= SOLVE_BUDGET_US
    report(6, ok, "mean per-step BarrierNet forward (net + QP) "
                  + ", ".join(f"{k} {v:.0f} us" for k, v in means.items()) + f" (<= {SOLVE_BUDGET_US:g} us)")
    assert ok


def test_criterion_7_psi_identity():
    rng = np.random.default_rng(77)
    n = 10_000
    cases = {
        "nav2d": (cbf.circle_constraint(32.5, 25.0, 6.0), unicycle_row(32.5, 25.0, 6.0),
                  rng.uniform([-20, -20, -np.pi, 0], [60, 60, np.pi, 8], size=(n, 4))),
        "nav3d": (cbf.superquadric_constraint((10.0, 10.5, 9.5), 3.0), superquadric_row((10.0, 10.5, 9.5), 3.0),
                  rng.uniform(-5, 25, size=(n, 6))),
        "merging": (cbf.rear_end_constraint(1.8, 0.0), rear_end_row(1.8, 0.0),
                    rng.uniform([0, 0, 0, 0], [100, 30, 100, 30], size=(n, 4))),
    }
    parts, ok = [], True
    for name, (con, (_, h_fn, abs_fn), X) in cases.items():
        P = rng.uniform(0.1, 10, size=(n, con.rel_degree))
        _, h, _ = cbf.assemble_rows(con, X, P)
        cols = list(X.T) + list(P.T)
        h_sym = np.asarray(h_fn(*cols), float)
        scale = np.maximum(1.0, np.asarray(abs_fn(*cols), float))  # sum of |terms| of the expansion
        rel = float(np.max(np.abs(h - h_sym) / scale))
        ok &= rel <= IDENTITY_TOL
        parts.append(f"{name} {rel:.1e}")
    report(7, ok, f"{n} states per scenario, max |h - h_sym| / sum|terms| <= {IDENTITY_TOL:g}: " + ", ".join(parts))
    assert ok


@slow
def test_criterion_8_training_progress():
    # expert penalties sit inside (0, c_max) and the reference law is smooth in z: the labels are reachable
    ds = train.generate_dataset(default_config("merging"), 10, seed=7)
    res = train.train("barriernet", ds, TrainConfig(epochs=50))
    epoch0 = res.initial_loss[0]
    first = next((e for e, tl, _ in res.curve if tl < PROGRESS_FRACTION * epoch0), None)
    ok = first is not None
    report(8, ok, f"default hyperparameters, epoch-0 MSE {epoch0:.4g}; below {PROGRESS_FRACTION:.0%} at epoch {first}, "
                  f"final {res.curve[-1][1]:.4g}")
    assert ok
