"""Tests for closed-loop episodes, traces, and the paired benchmark."""

import csv
import json

import numpy as np
import pytest

from adaptctl import closed_loop as cl
from adaptctl import dpc
from adaptctl.dynamics import collect_dataset, get_system, plant_step
from adaptctl.encoder import init_basis
from adaptctl.nn import params_digest

from _fixtures import linear_control_stack


@pytest.fixture(scope="module")
def stack():
    """Trained basis and policy on the linear family, shared per module."""
    return linear_control_stack(seed=5, fit_basis=True, policy_iters=250)


@pytest.fixture(scope="module")
def raw_stack():
    """Untrained stack for mechanics tests that ignore control quality."""
    return linear_control_stack(seed=0)


def tank_stack(seed=0):
    """Minimal untrained two-tank stack to exercise task inputs."""
    rng = np.random.default_rng(seed)
    spec = get_system("two_tank")
    basis = init_basis("two_tank", 3, [8], rng)
    datasets = [
        collect_dataset(spec, {"d1": 0.08, "d2": 0.03}, 30, np.random.default_rng(seed + 1)),
        collect_dataset(spec, {"d1": 0.07, "d2": 0.05}, 30, np.random.default_rng(seed + 2)),
    ]
    bank = dpc.build_coefficient_bank(basis, datasets)
    problem = dpc.default_problem("two_tank")
    policy = dpc.init_policy(problem, bank, [8], rng)
    return basis, bank, problem, policy


# ---------------------------------------------------------------------------
# configuration objects


def test_adapt_config_validation():
    with pytest.raises(ValueError):
        cl.AdaptConfig(window=0)
    with pytest.raises(ValueError):
        cl.AdaptConfig(period=0)
    with pytest.raises(ValueError):
        cl.AdaptConfig(warmup=0)
    with pytest.raises(ValueError):
        cl.AdaptConfig(refit_trigger=-0.5)


def test_switch_schedule_validation():
    with pytest.raises(ValueError):
        cl.SwitchSchedule((5,), ())
    with pytest.raises(ValueError):
        cl.SwitchSchedule((5, 5), ({"nu": 1.0}, {"nu": 2.0}))
    with pytest.raises(ValueError):
        cl.SwitchSchedule((0,), ({"nu": 1.0},))


def test_single_random_switch_in_window():
    spec = get_system("van_der_pol")
    for seed in range(5):
        sched = cl.SwitchSchedule.single_random(spec, np.random.default_rng(seed), 10, 20)
        assert 10 <= sched.steps[0] <= 20
        assert set(sched.params[0]) == {"mu", "d"}


def test_piecewise_xi_segments():
    prob = dpc.default_problem("two_tank")
    xi = cl.piecewise_xi(prob, 10, 4, np.random.default_rng(0))
    assert xi.shape == (11, 2)
    assert np.array_equal(xi[0], xi[3]) and np.array_equal(xi[4], xi[7])
    assert not np.array_equal(xi[3], xi[4])
    assert np.all(xi[:, 1] >= xi[:, 0] + 0.05)


# ---------------------------------------------------------------------------
# adaptive episodes


def test_fedpc_trace_shapes(raw_stack):
    basis, _, problem, policy = raw_stack
    trace = cl.run_fedpc_episode(policy, basis, problem, {"nu": -0.5},
                                 np.array([1.0]), 12, np.random.default_rng(0),
                                 adapt=cl.AdaptConfig(window=30, period=5))
    assert trace.steps == 12
    assert trace.states.shape == (13, 1)
    assert trace.controls.shape == (13, 1)
    assert np.all(np.isnan(trace.controls[-1]))
    assert np.all(np.isfinite(trace.controls[:-1]))
    assert trace.coeffs.shape == (13, basis.size)
    assert np.all(trace.ctrl_seconds >= 0.0)
    assert trace.ctrl_seconds[-1] == 0.0
    assert np.allclose(trace.times, 0.05 * np.arange(13))
    assert trace.summary["warmup_seconds"] > 0.0
    assert trace.summary["fit_failures"] == 0


def test_refits_follow_period(raw_stack):
    basis, _, problem, policy = raw_stack
    trace = cl.run_fedpc_episode(policy, basis, problem, {"nu": -0.5},
                                 np.array([1.0]), 12, np.random.default_rng(1),
                                 adapt=cl.AdaptConfig(window=30, period=5))
    assert trace.summary["refit_steps"] == [0, 5, 10]
    changes = [k for k in range(1, 13)
               if not np.array_equal(trace.coeffs[k], trace.coeffs[k - 1])]
    assert set(changes) <= {5, 10}


def test_switch_swaps_plant_silently(raw_stack):
    basis, _, problem, policy = raw_stack
    old, new = {"nu": -1.0}, {"nu": 2.0}
    sched = cl.SwitchSchedule((6,), (new,))
    trace = cl.run_fedpc_episode(policy, basis, problem, old, np.array([0.8]),
                                 10, np.random.default_rng(2),
                                 adapt=cl.AdaptConfig(window=20, period=50),
                                 switches=sched)
    assert list(trace.nu_ids) == [0] * 6 + [1] * 5
    spec = get_system("synthetic_linear")
    for k, params in ((5, old), (6, new)):
        want = plant_step(spec, params, trace.states[k], trace.controls[k],
                          problem.dt)
        assert np.allclose(trace.states[k + 1], want, atol=1e-12)
    # The coefficients were not touched at the switch (period is 50).
    assert np.array_equal(trace.coeffs[6], trace.coeffs[5])
    assert trace.summary["param_history"][1] == {"step": 6, "params": new}


def test_small_window_warns(raw_stack):
    basis, _, problem, policy = raw_stack
    with pytest.warns(RuntimeWarning, match="identification window"):
        cl.run_fedpc_episode(policy, basis, problem, {"nu": 0.0}, np.array([0.5]),
                             2, np.random.default_rng(3),
                             adapt=cl.AdaptConfig(window=2, period=9))


def test_trained_policy_regulates(stack):
    basis, _, problem, policy = stack
    digest_before = params_digest([*basis.nets, policy.net])
    trace = cl.run_fedpc_episode(policy, basis, problem, {"nu": -0.5},
                                 np.array([1.0]), 40, np.random.default_rng(4))
    assert abs(trace.states[-1, 0]) < 0.25
    assert trace.summary["mse"] < 0.5
    assert params_digest([*basis.nets, policy.net]) == digest_before


def test_task_inputs_flow_through_episode():
    basis, _, problem, policy = tank_stack()
    xi = cl.piecewise_xi(problem, 8, 4, np.random.default_rng(5))
    trace = cl.run_fedpc_episode(policy, basis, problem, {"d1": 0.08, "d2": 0.03},
                                 np.array([0.4, 0.4]), 8, np.random.default_rng(6),
                                 adapt=cl.AdaptConfig(window=15, period=4),
                                 xi_traj=xi)
    assert np.array_equal(trace.refs[:, 0], xi[:, 0])
    assert np.array_equal(trace.refs[:, 1], xi[:, 1])
    assert not np.array_equal(trace.refs[0], trace.refs[5])
    assert np.all(np.isfinite(trace.controls[:-1]))


def test_excitation_free_starts_from_zero(raw_stack):
    basis, _, problem, policy = raw_stack
    trace = cl.run_fedpc_episode(policy, basis, problem, {"nu": -0.5},
                                 np.array([1.0]), 10, np.random.default_rng(8),
                                 adapt=cl.AdaptConfig(window=10, period=4,
                                                      excitation_free=True))
    assert trace.summary["warmup_seconds"] == 0.0
    # No side trajectory: the first refit at step 4 is the first fit at all.
    assert np.all(trace.coeffs[:4] == 0.0)
    assert trace.summary["refit_steps"][0] == 4
    assert np.any(trace.coeffs[4] != 0.0)


def test_warmup_decoupled_from_window(raw_stack):
    basis, _, problem, policy = raw_stack
    kw = dict(params={"nu": -0.5}, x0=np.array([1.0]), steps=8)
    long_warm = cl.run_fedpc_episode(policy, basis, problem, rng=np.random.default_rng(9),
                                     adapt=cl.AdaptConfig(window=10, period=4, warmup=30),
                                     **kw)
    wide_window = cl.run_fedpc_episode(policy, basis, problem, rng=np.random.default_rng(9),
                                       adapt=cl.AdaptConfig(window=30, period=4),
                                       **kw)
    # Both fit the initial coefficients from the same 30 warm-up rows.
    assert np.array_equal(long_warm.coeffs[0], wide_window.coeffs[0])
    # The first refit sees a 10-row buffer in one run and 30 in the other.
    assert not np.array_equal(long_warm.coeffs[4], wide_window.coeffs[4])


def test_refit_trigger_keeps_consistent_incumbent(raw_stack):
    basis, _, problem, policy = raw_stack
    trace = cl.run_fedpc_episode(policy, basis, problem, {"nu": -0.5},
                                 np.array([1.0]), 10, np.random.default_rng(10),
                                 adapt=cl.AdaptConfig(window=20, period=3,
                                                      refit_trigger=1e9))
    # The incumbent always survives an absurdly lenient trigger.
    assert trace.summary["refit_steps"] == [0]
    assert trace.summary["skipped_refits"] == 3
    assert trace.summary["buffer_resets"] == 0
    assert all(np.array_equal(trace.coeffs[k], trace.coeffs[0])
               for k in range(trace.steps + 1))


def test_refit_trigger_resets_buffer_on_switch(stack):
    basis, _, problem, policy = stack
    adapt = cl.AdaptConfig(window=12, period=3, refit_trigger=40.0)
    sched = cl.SwitchSchedule((6,), ({"nu": 0.5},))
    trace = cl.run_fedpc_episode(policy, basis, problem, {"nu": -1.0},
                                 np.array([0.8]), 24, np.random.default_rng(11),
                                 adapt=adapt, switches=sched)
    assert trace.summary["buffer_resets"] == 1
    assert trace.summary["skipped_refits"] >= 2
    adopted = [k for k in trace.summary["refit_steps"] if k > 6]
    assert adopted, "no refit was adopted after the plant changed"
    # Between the reset and the re-fit the incumbent stays in charge.
    first = adopted[0]
    assert np.array_equal(trace.coeffs[first - 1], trace.coeffs[6])
    assert not np.array_equal(trace.coeffs[first], trace.coeffs[6])
    # The same trigger never fires when the plant stays put.
    plain = cl.run_fedpc_episode(policy, basis, problem, {"nu": -1.0},
                                 np.array([0.8]), 24, np.random.default_rng(11),
                                 adapt=adapt)
    assert plain.summary["buffer_resets"] == 0
    assert plain.summary["refit_steps"] == [0]


def test_fedpc_rejects_mismatched_stack(raw_stack):
    basis, _, _, policy = raw_stack
    other = dpc.default_problem("van_der_pol")
    with pytest.raises(ValueError):
        cl.run_fedpc_episode(policy, basis, other, {"mu": 1.0, "d": 1.0},
                             np.zeros(2), 3, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# baseline episodes


def test_mpc_episode_follows_plant():
    problem = dpc.default_problem("synthetic_linear")
    problem.horizon = 10
    params = {"nu": -0.5}
    trace = cl.run_mpc_episode(problem, params, np.array([1.0]), 5, ftol=1e-6)
    spec = get_system("synthetic_linear")
    x = np.array([1.0])
    for k in range(5):
        x = plant_step(spec, params, x, trace.controls[k], problem.dt)
        assert np.allclose(trace.states[k + 1], x, atol=1e-12)
    assert trace.coeffs is None
    assert trace.summary["mean_iterations"] > 0
    assert 0.0 <= trace.summary["converged_fraction"] <= 1.0
    assert trace.summary["mse"] < 1.0


# ---------------------------------------------------------------------------
# metrics and persistence


def make_toy_trace():
    states = np.array([[0.0], [1.0], [3.5]])
    controls = np.array([[0.2], [2.0], [np.nan]])
    refs = np.zeros((3, 1))
    return cl.EpisodeTrace(
        system="synthetic_linear", algorithm="fe_dpc", dt=0.05,
        states=states, controls=controls, refs=refs,
        nu_ids=np.zeros(3, dtype=int), ctrl_seconds=np.array([0.01, 0.02, 0.0]),
        coeffs=np.arange(6.0).reshape(3, 2))


def test_metrics_hand_computed():
    trace = make_toy_trace()
    problem = dpc.default_problem("synthetic_linear")
    got = cl.compute_metrics(trace, problem)
    # mse over rows of (x - ref)^2: (0 + 1 + 12.25) / 3.
    assert got["mse"] == pytest.approx((0.0 + 1.0 + 12.25) / 3.0)
    assert got["final_error"] == pytest.approx(3.5)
    assert got["state_violations"] == 1       # 3.5 is outside [-3, 3]
    assert got["control_violations"] == 1     # 2.0 is outside [-1, 1]
    assert got["mean_ctrl_seconds"] == pytest.approx(0.015)
    assert got["total_ctrl_seconds"] == pytest.approx(0.03)


def test_trace_rejects_ragged_columns():
    from adaptctl import autodiff as ad
    with pytest.raises(ad.DimensionError):
        cl.EpisodeTrace(
            system="synthetic_linear", algorithm="fe_dpc", dt=0.05,
            states=np.zeros((3, 1)), controls=np.zeros((2, 1)),
            refs=np.zeros((3, 1)), nu_ids=np.zeros(3, dtype=int),
            ctrl_seconds=np.zeros(3))


def test_trace_csv_and_sidecar(tmp_path, raw_stack):
    basis, _, problem, policy = raw_stack
    trace = cl.run_fedpc_episode(policy, basis, problem, {"nu": 0.2},
                                 np.array([0.5]), 4, np.random.default_rng(7),
                                 adapt=cl.AdaptConfig(window=10, period=3))
    path = tmp_path / "episode.csv"
    cl.save_trace(path, trace)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    want_header = (["t", "x1", "u1", "ref1", "nu_id"]
                   + [f"c{i + 1}" for i in range(basis.size)] + ["ctrl_seconds"])
    assert rows[0] == want_header
    assert len(rows) == 6
    body = rows[1:]
    assert float(body[0][1]) == trace.states[0, 0]
    assert float(body[2][2]) == trace.controls[2, 0]
    assert np.isnan(float(body[-1][2]))
    assert int(body[3][4]) == trace.nu_ids[3]
    summary = json.loads((tmp_path / "episode.json").read_text())
    assert summary["mse"] == trace.summary["mse"]
    assert summary["refit_steps"] == [0, 3]


# ---------------------------------------------------------------------------
# paired benchmark


def test_benchmark_suite_pairs_conditions(stack):
    basis, _, problem, policy = stack
    problem.horizon = 10
    table = cl.benchmark_suite(policy, basis, problem, n_episodes=2, steps=8,
                               seed=11, adapt=cl.AdaptConfig(window=20, period=4),
                               mpc_kwargs={"ftol": 1e-6, "max_iters": 120})
    assert set(table) >= {"fe_dpc", "wb_mpc", "speedup", "per_episode"}
    assert len(table["per_episode"]["fe_dpc"]) == 2
    for fed, wbm in zip(table["per_episode"]["fe_dpc"], table["per_episode"]["wb_mpc"]):
        assert fed["param_history"][0]["params"] == wbm["param_history"][0]["params"]
    assert table["speedup"] > 1.0
    assert table["fe_dpc"]["control_violations"] == 0
    assert table["wb_mpc"]["control_violations"] == 0
