import logging
import math

import numpy as np
import pytest

from barriernet import systems, train
from barriernet.systems import Episode, ScenarioConfig, default_config, make_scenario, rollout, step


def test_double_integrator_steps():
    di = systems.double_integrator(1)
    assert np.allclose(step(di, [0.0, 10.0], [0.0], 0.1), [1.0, 10.0], atol=1e-15)
    x = step(di, [0.0, 10.0], [2.0], 0.1)
    assert x[0] == pytest.approx(1.01, abs=1e-14) and x[1] == pytest.approx(10.2, abs=1e-14)


def test_double_integrator_matches_analytic_flow():
    rng = np.random.default_rng(0)
    di = systems.double_integrator(3)
    for _ in range(50):
        x, u, dt = rng.normal(size=6), rng.normal(size=3), rng.uniform(0.01, 1.0)
        p, v = x[0::2], x[1::2]
        exact = np.empty(6)
        exact[0::2] = p + v * dt + 0.5 * u * dt**2
        exact[1::2] = v + u * dt
        assert np.allclose(systems.rk4(di, x, u, dt), exact, rtol=0, atol=1e-13)


def test_unicycle_straight_line():
    x = step(systems.unicycle(), [0.0, 0.0, 0.0, 1.0], [0.0, 0.0], 0.5)
    assert np.allclose(x, [0.5, 0.0, 0.0, 1.0], atol=1e-15)


def test_unicycle_constant_turn_closed_form():
    uni = systems.unicycle()
    x0 = np.array([1.0, -2.0, 0.3, 2.0])
    w, dt = 0.8, 0.05
    th = x0[2] + w * dt
    exact = np.array([x0[0] + x0[3] / w * (math.sin(th) - math.sin(x0[2])),
                      x0[1] - x0[3] / w * (math.cos(th) - math.cos(x0[2])), th, x0[3]])
    assert np.max(np.abs(systems.rk4(uni, x0, [w, 0.0], dt) - exact)) <= 1e-9


def test_unicycle_local_error_order():
    # halving dt should cut the one-step RK4 error by about 2^5
    uni = systems.unicycle()
    x0 = np.array([0.0, 0.0, 0.2, 1.5])
    u = np.array([1.2, 0.8])

    def err(dt):
        fine = x0
        for k in range(64):
            fine = systems.rk4(uni, fine, u, dt / 64, k * dt / 64)
        return np.max(np.abs(systems.rk4(uni, x0, u, dt) - fine))

    ratio = err(0.2) / err(0.1)
    assert 20 < ratio < 45


def test_step_clamps_with_warning(caplog):
    di = systems.double_integrator(1, u_bound=1.0)
    with caplog.at_level(logging.WARNING, logger="barriernet.systems"):
        x = step(di, [0.0, 0.0], [5.0], 1.0)
    assert x[1] == pytest.approx(1.0)
    assert "control_clamped" in caplog.text


def test_non_finite_state_raises():
    uni = systems.unicycle(u_min=(-np.inf, -np.inf), u_max=(np.inf, np.inf))
    with pytest.raises(systems.NonFiniteStateError):
        step(uni, [0.0, 0.0, 0.0, 1e308], [0.0, 1e308], 10.0)


def test_dynamics_are_locally_lipschitz():
    rng = np.random.default_rng(1)
    uni = systems.unicycle()
    for _ in range(200):
        x = rng.uniform([-10, -10, -np.pi, 0], [10, 10, np.pi, 8])
        y = x + rng.normal(scale=1e-3, size=4)
        u = rng.uniform(-2, 2, size=2)
        ratio = np.linalg.norm(uni.dynamics(x, u) - uni.dynamics(y, u)) / np.linalg.norm(x - y)
        assert ratio <= 1.0 + 8.0  # |d f / d x| <= 1 + v_max on this box


def test_scenario_constraints():
    nav = make_scenario(default_config("nav2d"))
    x = np.array([1.0, 2.0, 0.0, 1.0])
    assert nav.constraints[0].b(x) == pytest.approx((1 - 32.5) ** 2 + (2 - 25) ** 2 - 36)
    assert nav.constraints[0].rel_degree == 2
    cfg3 = default_config("nav3d").replace(R=2.0)
    c3 = make_scenario(cfg3).constraints[0]
    x3 = np.array([1.0, 0.0, 2.0, 0.0, 3.0, 0.0])
    o = np.array(cfg3.obstacle)
    assert c3.b(x3) == pytest.approx(np.sum((x3[0::2] - o) ** 4) - 16)
    assert c3.rel_degree == 2
    merge = make_scenario(default_config("merging"))
    assert merge.constraints[0].b(np.array([30.0, 10.0, 0.0, 10.0])) == pytest.approx(12.0)
    assert merge.constraints[0].rel_degree == 1


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        ScenarioConfig("highway")
    for bad in ({"dt": 0.0}, {"R": -1.0}, {"phi": 0.0}, {"horizon": -1}):
        with pytest.raises(ValueError):
            ScenarioConfig("nav2d", **bad)
    with pytest.raises(ValueError):
        ScenarioConfig.from_dict({"scenario": "nav2d", "speed": 3})
    cfg = default_config("nav2d")
    cfg.save(tmp_path / "c.json")
    assert ScenarioConfig.load(tmp_path / "c.json") == cfg


def test_zero_horizon_gives_empty_trajectory():
    sc = make_scenario(default_config("merging"))
    ep = sc.sample_episode(np.random.default_rng(0))
    traj = rollout(sc, lambda x, z, t: (sc.reference(x, ep), ()), ep, horizon=0)
    assert len(traj) == 0 and traj.states.shape == (0, 4)
    assert np.array_equal(traj.final_state, ep.x0)


def nav2d_episode(sc):
    start = np.array([-10.0, 5.5])
    dest = sc._sample_destination(np.random.default_rng(0))
    heading = math.atan2(dest[1] - start[1], dest[0] - start[0])
    return Episode(np.array([start[0], start[1], heading, 5.0]), dest)


def test_nav2d_expert_is_safe():
    sc = make_scenario(default_config("nav2d"))
    ep = nav2d_episode(sc)
    traj = rollout(sc, train.make_expert(sc, ep), ep)
    assert traj.min_b[0] >= 0.0
    assert np.linalg.norm(traj.final_state[:2] - ep.destination) <= 5 * sc.config.dest_tol


def test_nav2d_proportional_through_obstacle_collides():
    sc = make_scenario(default_config("nav2d"))
    start = np.array([-10.0, 5.5])
    o = np.array(sc.config.obstacle)
    ep = Episode(np.array([start[0], start[1], math.atan2(*(o - start)[::-1]), 5.0]), 2 * o - start)
    traj = rollout(sc, lambda x, z, t: (sc.reference(x, ep), ()), ep)
    assert traj.min_b[0] < 0.0


def test_rollout_is_deterministic():
    sc = make_scenario(default_config("nav3d"))
    ep = sc.sample_episode(np.random.default_rng(3))
    a = rollout(sc, train.make_expert(sc, ep), ep, horizon=200)
    b = rollout(sc, train.make_expert(sc, ep), ep, horizon=200)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.controls, b.controls)
    assert np.allclose(np.diff(a.times), sc.config.dt)


def test_initial_states_in_safe_set():
    rng = np.random.default_rng(4)
    for name in ("nav2d", "nav3d", "merging"):
        sc = make_scenario(default_config(name))
        for _ in range(50):
            ep = sc.sample_episode(rng)
            for c in sc.constraints:
                psi = systems.cbf.psi_eval(c, ep.x0, np.ones(c.rel_degree))
                assert all(v >= 0 for v in psi[:-1])


def test_csv_round_trip(tmp_path):
    sc = make_scenario(default_config("nav2d"))
    ep = nav2d_episode(sc)
    traj = rollout(sc, train.make_expert(sc, ep), ep, horizon=120)
    traj.to_csv(tmp_path / "t.csv")
    back = systems.Trajectory.from_csv(tmp_path / "t.csv")
    header = (tmp_path / "t.csv").read_text().splitlines()[0].split(",")
    assert header[:5] == ["t", "x0", "x1", "x2", "x3"] and header[-1] == "flags"
    for name in ("times", "states", "observations", "controls", "b_values", "final_state"):
        assert np.max(np.abs(getattr(back, name) - getattr(traj, name))) <= 1e-12
    assert back.flags == traj.flags
    assert back.dt == pytest.approx(sc.config.dt)


def test_infeasible_controller_propagates_step():
    sc = make_scenario(default_config("merging"))
    ep = sc.sample_episode(np.random.default_rng(0))
    calls = []

    def ctrl(x, z, t):
        calls.append(t)
        return np.zeros(1), ("infeasible",) if len(calls) == 4 else ()

    with pytest.raises(systems.InfeasibleStepError) as exc:
        rollout(sc, ctrl, ep)
    assert exc.value.step == 3 and len(exc.value.trajectory) == 4
