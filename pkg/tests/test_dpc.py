"""Tests for control tasks, coefficient banks, and policy training."""

import numpy as np
import pytest

from adaptctl import autodiff as ad
from adaptctl import dpc
from adaptctl.dynamics import get_system
from adaptctl.encoder import infer_coefficients
from adaptctl.nn import params_digest

from _fixtures import linear_control_stack as small_setup
from _fixtures import linear_family_datasets
from _oracles import finite_diff_grad, rel_err


# ---------------------------------------------------------------------------
# control problems


def test_default_problems_cover_registry():
    for name in ("van_der_pol", "two_tank", "glycolytic", "quadrotor", "synthetic_linear"):
        prob = dpc.default_problem(name)
        spec = get_system(name)
        assert prob.state_weights.shape == (spec.state_dim,)
        assert prob.control_weights.shape == (spec.control_dim,)
        assert prob.control_box.shape == (spec.control_dim, 2)
        assert prob.horizon >= 1


def test_quadrotor_terminal_targets_hover():
    prob = dpc.default_problem("quadrotor")
    assert np.all(prob.state_weights == 0.0)
    assert np.all(prob.control_weights == 0.0)
    assert prob.target[2] == 0.4
    on = np.flatnonzero(prob.terminal_weights)
    assert tuple(on) == (2, 3, 4, 5, 9, 10, 11)


def test_problem_rejects_bad_ref_dim():
    with pytest.raises(ad.DimensionError):
        dpc.ControlProblem(
            system="van_der_pol", horizon=5, dt=0.1, substeps=1,
            state_weights=np.zeros(2), control_weights=np.ones(1),
            terminal_weights=np.ones(2), target=np.zeros(2),
            ref_dims=(7,), ref_low=np.zeros(1), ref_high=np.ones(1))


def test_reference_places_task_entries():
    prob = dpc.default_problem("two_tank")
    ref = prob.reference(np.array([[0.2, 0.35], [0.4, 0.6]]))
    assert ref.shape == (2, 2)
    assert np.array_equal(ref, [[0.2, 0.35], [0.4, 0.6]])
    single = prob.reference(np.array([0.3, 0.5]))
    assert single.shape == (2,)
    assert np.array_equal(single, [0.3, 0.5])


def test_stacked_sampling_orders_tank_levels():
    prob = dpc.default_problem("two_tank")
    xi = prob.sample_xi(np.random.default_rng(3), 500)
    assert xi.shape == (500, 2)
    assert np.all(xi[:, 0] >= 0.15) and np.all(xi[:, 0] <= 0.5)
    assert np.all(xi[:, 1] >= xi[:, 0] + 0.05)
    assert np.all(xi[:, 1] <= 0.8)
    ranges = prob.xi_ranges()
    assert np.allclose(ranges[1], [0.2, 0.8])


# ---------------------------------------------------------------------------
# coefficient bank


def test_bank_rows_match_individual_fits():
    basis, bank, _, _ = small_setup()
    datasets = linear_family_datasets(np.linspace(-1.5, 0.5, 3), 40, 1)
    for row, ds in zip(bank.coeffs, datasets):
        fit = infer_coefficients(basis, ds.xs, ds.us, ds.xnext)
        assert np.array_equal(row, fit.c)


def test_bank_sampling_modes():
    bank = dpc.CoefficientBank("synthetic_linear",
                               np.array([[0.0, 1.0], [2.0, 3.0]]),
                               [{"nu": -1.0}, {"nu": 1.0}])
    rng = np.random.default_rng(0)
    pure = bank.sample(rng, 64, mixture=0.0)
    assert all(any(np.array_equal(row, b) for b in bank.coeffs) for row in pure)
    mixed = bank.sample(rng, 64, mixture=1.0)
    lo = bank.coeffs.min(axis=0) - 1e-12
    hi = bank.coeffs.max(axis=0) + 1e-12
    assert np.all(mixed >= lo) and np.all(mixed <= hi)
    assert any(not any(np.array_equal(row, b) for b in bank.coeffs) for row in mixed)


def test_bank_input_stats_floor():
    coeffs = np.array([[1.0, 5.0], [1.0, 9.0], [1.0, 7.0]])
    bank = dpc.CoefficientBank("synthetic_linear", coeffs, [{}] * 3)
    shift, scale = bank.input_stats()
    assert np.allclose(shift, [1.0, 7.0])
    assert scale[0] == pytest.approx(0.05 * scale[1])
    assert scale[1] == pytest.approx(coeffs[:, 1].std())


def test_bank_roundtrip_exact(tmp_path):
    _, bank, _, _ = small_setup()
    path = tmp_path / "bank.json"
    dpc.save_bank(path, bank)
    back = dpc.load_bank(path)
    assert back.system == bank.system
    assert np.array_equal(back.coeffs, bank.coeffs)
    assert back.params == bank.params


def test_bank_rejects_other_kind(tmp_path):
    path = tmp_path / "not_bank.json"
    path.write_text('{"kind": "policy"}')
    with pytest.raises(ValueError, match="not a coefficient bank"):
        dpc.load_bank(path)


# ---------------------------------------------------------------------------
# policy network


def test_policy_output_strictly_inside_box():
    _, _, problem, policy = small_setup()
    rng = np.random.default_rng(5)
    x = rng.uniform(-100, 100, size=(64, policy.state_dim))
    c = rng.uniform(-50, 50, size=(64, policy.coeff_dim))
    u = dpc.eval_policy(policy, x, coeffs=c)
    lo, hi = problem.control_box[:, 0], problem.control_box[:, 1]
    assert np.all(u > lo) and np.all(u < hi)


def test_eval_policy_matches_tape():
    _, _, _, policy = small_setup()
    rng = np.random.default_rng(6)
    x = rng.normal(size=(5, policy.state_dim))
    c = rng.normal(size=(5, policy.coeff_dim))
    on_tape = dpc.policy_controls(policy, ad.Value(x), None, c)
    frozen = dpc.eval_policy(policy, x, coeffs=c)
    assert np.allclose(on_tape.data, frozen, atol=1e-15)
    one = dpc.eval_policy(policy, x[0], coeffs=c[0])
    assert np.allclose(one, frozen[0], atol=1e-15)


def test_policy_squash_formula():
    # Single affine layer with hand-set weights makes the squash checkable
    # end to end: u = mid + half * tanh(w @ (f - shift) / scale + b).
    _, bank, problem, _ = small_setup(basis_size=2)
    rng = np.random.default_rng(7)
    policy = dpc.init_policy(problem, bank, [], rng)
    policy.net.weights[0].data[:] = np.array([[0.5, -1.0, 2.0]])
    policy.net.biases[0].data[:] = np.array([0.25])
    feats = np.array([0.3, -0.2, 0.8])
    z = (feats - policy.in_shift) / policy.in_scale
    raw = policy.net.weights[0].data @ z + 0.25
    want = policy.u_mid + policy.u_half * np.tanh(raw)
    got = dpc.eval_policy(policy, feats[:1], coeffs=feats[1:])
    assert np.allclose(got, want, atol=1e-15)


def test_policy_checkpoint_roundtrip(tmp_path):
    _, _, _, policy = small_setup()
    path = tmp_path / "policy.json"
    dpc.save_policy(path, policy)
    back = dpc.load_policy(path)
    assert params_digest([back.net]) == params_digest([policy.net])
    assert np.array_equal(back.in_shift, policy.in_shift)
    assert np.array_equal(back.in_scale, policy.in_scale)
    assert np.array_equal(back.u_mid, policy.u_mid)
    assert np.array_equal(back.u_half, policy.u_half)
    x = np.array([[0.4], [-0.2]])
    c = np.tile(np.linspace(0.1, 0.4, policy.coeff_dim), (2, 1))
    assert np.array_equal(dpc.eval_policy(back, x, coeffs=c),
                          dpc.eval_policy(policy, x, coeffs=c))


def test_policy_feature_width_validation():
    _, _, _, policy = small_setup()
    with pytest.raises(ad.DimensionError):
        dpc.eval_policy(policy, np.zeros((3, policy.state_dim + 1)),
                        coeffs=np.zeros((3, policy.coeff_dim)))


# ---------------------------------------------------------------------------
# rollout and loss


def test_rollout_lengths_and_start():
    basis, bank, problem, policy = small_setup()
    rng = np.random.default_rng(8)
    x0 = rng.uniform(-1, 1, size=(4, 1))
    c = bank.sample(rng, 4)
    states, controls = dpc.rollout_policy(policy, basis, problem, x0, None, c)
    assert len(states) == problem.horizon + 1
    assert len(controls) == problem.horizon
    assert np.array_equal(states[0].data, x0)
    assert states[-1].data.shape == (4, 1)
    assert controls[0].data.shape == (4, 1)


def test_loss_breakdown_sums_to_loss():
    basis, bank, problem, policy = small_setup(seed=2)
    rng = np.random.default_rng(9)
    x0 = rng.uniform(-1, 1, size=(6, 1))
    c = bank.sample(rng, 6)
    states, controls = dpc.rollout_policy(policy, basis, problem, x0, None, c)
    loss, parts = dpc.dpc_loss(problem, states, controls, problem.reference(np.zeros((6, 0))))
    total = sum(parts.values())
    assert abs(total - float(loss.data)) <= 1e-12 * max(1.0, abs(total))
    assert set(parts) == {"stage_state", "stage_control", "terminal",
                          "state_penalty", "control_penalty"}


def test_loss_terms_hand_computed():
    prob = dpc.default_problem("van_der_pol")
    x0 = ad.Value(np.array([[0.5, -0.5]]))
    x1 = ad.Value(np.array([[3.0, 0.0]]))
    u0 = ad.Value(np.array([[2.0]]))
    loss, parts = dpc.dpc_loss(prob, [x0, x1], [u0], np.zeros((1, 2)))
    assert parts["stage_state"] == 0.0
    assert parts["stage_control"] == pytest.approx(4.0)
    assert parts["terminal"] == pytest.approx(9.0)
    # x1 exceeds the state box upper bound 2.0 by exactly 1.0.
    assert parts["state_penalty"] == pytest.approx(100.0)
    assert parts["control_penalty"] == 0.0
    assert float(loss.data) == pytest.approx(113.0)


def test_control_penalty_zero_under_squash():
    basis, bank, problem, policy = small_setup(seed=3)
    rng = np.random.default_rng(10)
    x0 = rng.uniform(-1, 1, size=(5, 1))
    c = bank.sample(rng, 5)
    states, controls = dpc.rollout_policy(policy, basis, problem, x0, None, c)
    _, parts = dpc.dpc_loss(problem, states, controls, problem.reference(np.zeros((5, 0))))
    assert parts["control_penalty"] == 0.0


def test_loss_gradient_matches_finite_differences():
    basis, bank, problem, policy = small_setup(seed=4, basis_size=2)
    problem.horizon = 3
    rng = np.random.default_rng(11)
    x0 = rng.uniform(-0.5, 0.5, size=(2, 1))
    c = bank.sample(rng, 2)
    ref = problem.reference(np.zeros((2, 0)))

    def run():
        states, controls = dpc.rollout_policy(policy, basis, problem, x0, None, c)
        loss, _ = dpc.dpc_loss(problem, states, controls, ref)
        return loss

    loss = run()
    ad.backward(loss)
    got = [ad.grad_of(p).copy() for p in policy.net.parameters()]
    want = finite_diff_grad(lambda: float(run().data),
                            [p.data for p in policy.net.parameters()])
    for g, w in zip(got, want):
        assert rel_err(g, w) < 1e-4


def test_train_policy_reduces_loss():
    basis, bank, problem, policy = small_setup(seed=5, fit_basis=True)
    problem.horizon = 25
    cfg = dpc.DpcTrainConfig(lr=5e-3, iters=250, batch=32, mixture=0.3)
    history = dpc.train_policy(policy, basis, problem, bank, cfg,
                               np.random.default_rng(12))
    assert len(history) == 250
    assert np.mean(history[-50:]) < 0.45 * np.mean(history[:50])


def test_train_policy_early_stop():
    basis, bank, problem, policy = small_setup(seed=6)
    cfg = dpc.DpcTrainConfig(iters=50, batch=4, target_loss=1e12)
    history = dpc.train_policy(policy, basis, problem, bank, cfg,
                               np.random.default_rng(13))
    assert len(history) == 1


def test_train_policy_validates_widths():
    basis, bank, problem, policy = small_setup(seed=7)
    wide = dpc.CoefficientBank(bank.system, np.hstack([bank.coeffs, bank.coeffs]),
                               bank.params)
    cfg = dpc.DpcTrainConfig(iters=1, batch=2)
    with pytest.raises(ad.DimensionError):
        dpc.train_policy(policy, basis, problem, wide, cfg, np.random.default_rng(0))


def test_train_policy_validates_system():
    basis, bank, problem, policy = small_setup(seed=8)
    other = dpc.default_problem("van_der_pol")
    with pytest.raises(ValueError):
        dpc.train_policy(policy, basis, other, bank,
                         dpc.DpcTrainConfig(iters=1), np.random.default_rng(0))
