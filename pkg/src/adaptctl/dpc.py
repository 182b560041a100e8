"""Offline policy learning against the learned surrogate model.

A control task is a finite-horizon objective over one system family:
running and terminal quadratic costs around a reference, soft state box
constraints enforced by squared hinge penalties, and hard actuator boxes
enforced by construction (the policy squashes its output through a scaled
tanh, so control bounds cannot be violated at all).

The policy is an MLP that maps (state, task parameters, mixing
coefficients) to a control vector. Training is self-supervised: sample a
batch of start states, tasks, and coefficient vectors, roll the policy
through the surrogate dynamics on the tape, and descend the task loss.
No expert trajectories and no plant interaction are involved; the plant
is only touched later, at evaluation time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Value
from .dynamics import TransitionDataset, get_system, rk4_step
from .encoder import BasisSet, TrainingDivergedError, fe_rhs, infer_coefficients


# ---------------------------------------------------------------------------
# task definition


@dataclass
class ControlProblem:
    """Finite-horizon objective for one system family.

    Weight vectors are per-dimension multipliers on squared errors, so a
    zero entry drops that dimension from the cost. References are built
    from `target` with the entries listed in `ref_dims` replaced by task
    parameters xi; systems with a fixed goal use an empty `ref_dims` and
    have no task input at all.

    When `ref_stacked` is true, task parameters are sampled cumulatively
    (each entry is the previous one plus a draw from its range), which
    expresses ordered references such as a second tank level that must sit
    above the first.
    """

    system: str
    horizon: int
    dt: float
    substeps: int
    state_weights: np.ndarray
    control_weights: np.ndarray
    terminal_weights: np.ndarray
    target: np.ndarray
    ref_dims: tuple = ()
    ref_low: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ref_high: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ref_stacked: bool = False
    train_box: np.ndarray | None = None
    state_box: np.ndarray | None = None
    control_box: np.ndarray | None = None
    penalty_weight: float = 100.0

    def __post_init__(self):
        spec = get_system(self.system)
        n, nu = spec.state_dim, spec.control_dim
        self.state_weights = np.asarray(self.state_weights, dtype=float).reshape(n)
        self.control_weights = np.asarray(self.control_weights, dtype=float).reshape(nu)
        self.terminal_weights = np.asarray(self.terminal_weights, dtype=float).reshape(n)
        self.target = np.asarray(self.target, dtype=float).reshape(n)
        self.ref_dims = tuple(int(d) for d in self.ref_dims)
        k = len(self.ref_dims)
        self.ref_low = np.asarray(self.ref_low, dtype=float).reshape(k)
        self.ref_high = np.asarray(self.ref_high, dtype=float).reshape(k)
        if any(d < 0 or d >= n for d in self.ref_dims):
            raise ad.DimensionError(f"ref_dims {self.ref_dims} outside state of width {n}")
        if np.any(self.ref_high < self.ref_low):
            raise ValueError("ref_high must be >= ref_low")
        if self.train_box is None:
            self.train_box = spec.init_bounds.copy()
        self.train_box = np.asarray(self.train_box, dtype=float).reshape(n, 2)
        if self.state_box is not None:
            self.state_box = np.asarray(self.state_box, dtype=float).reshape(n, 2)
        if self.control_box is None:
            self.control_box = spec.control_bounds.copy()
        self.control_box = np.asarray(self.control_box, dtype=float).reshape(nu, 2)
        if np.any(self.control_box[:, 1] <= self.control_box[:, 0]):
            raise ValueError("control_box must have positive width")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")

    @property
    def task_dim(self) -> int:
        return len(self.ref_dims)

    def sample_xi(self, rng: np.random.Generator, batch: int) -> np.ndarray:
        """Draw task parameters, shape (batch, task_dim)."""
        k = self.task_dim
        draws = rng.uniform(self.ref_low, self.ref_high, size=(batch, k))
        return np.cumsum(draws, axis=1) if self.ref_stacked and k else draws

    def xi_ranges(self) -> np.ndarray:
        """Effective (low, high) per task entry, shape (task_dim, 2)."""
        lo, hi = self.ref_low, self.ref_high
        if self.ref_stacked and self.task_dim:
            lo, hi = np.cumsum(lo), np.cumsum(hi)
        return np.stack([lo, hi], axis=1)

    def reference(self, xi: np.ndarray) -> np.ndarray:
        """Full-state reference rows for task parameters xi."""
        xi = np.asarray(xi, dtype=float)
        single = xi.ndim == 1
        rows = np.atleast_2d(xi)
        ref = np.tile(self.target, (rows.shape[0], 1))
        for j, d in enumerate(self.ref_dims):
            ref[:, d] = rows[:, j]
        return ref[0] if single else ref


def default_problem(name: str) -> ControlProblem:
    """Stock control task for each registered system family."""
    spec = get_system(name)
    n, nu = spec.state_dim, spec.control_dim
    if name == "van_der_pol":
        # Drive the state to the origin. The running state cost keeps
        # whole trajectories near the origin rather than merely landing
        # there — for reversed-rotation members a wide excursion is
        # unrecoverable, so mid-trajectory drift must already be
        # penalised — while the dominant terminal weight sets the
        # precision of the final approach.
        return ControlProblem(
            system=name, horizon=30, dt=spec.default_dt, substeps=1,
            state_weights=np.ones(n), control_weights=0.1 * np.ones(nu),
            terminal_weights=100.0 * np.ones(n), target=np.zeros(n),
            train_box=spec.state_bounds, state_box=spec.state_bounds,
        )
    if name == "two_tank":
        # Track ordered level references; the upper tank reference sits
        # strictly above the lower one because the plumbing only permits
        # steady states with x2 > x1.
        return ControlProblem(
            system=name, horizon=40, dt=spec.default_dt, substeps=1,
            state_weights=np.ones(n), control_weights=np.ones(nu),
            terminal_weights=np.ones(n), target=np.zeros(n),
            ref_dims=(0, 1), ref_low=np.array([0.15, 0.05]),
            ref_high=np.array([0.5, 0.3]), ref_stacked=True,
            train_box=spec.state_bounds, state_box=spec.state_bounds,
        )
    if name == "glycolytic":
        # Only the actuated first metabolite tracks a reference; the other
        # six states evolve freely and carry no cost.
        w = np.zeros(n)
        w[0] = 1.0
        return ControlProblem(
            system=name, horizon=50, dt=spec.default_dt, substeps=1,
            state_weights=w, control_weights=np.ones(nu),
            terminal_weights=w, target=np.zeros(n),
            ref_dims=(0,), ref_low=np.array([0.5]), ref_high=np.array([1.5]),
            state_box=spec.state_bounds,
        )
    if name == "quadrotor":
        # Hover task: no running cost, terminal cost on altitude and on
        # linear and angular rates. Attitude angles and horizontal position
        # are free; the onboard loops level the vehicle once rates die out.
        p = np.zeros(n)
        p[[2, 3, 4, 5, 9, 10, 11]] = 1.0
        target = np.zeros(n)
        target[2] = 0.4
        return ControlProblem(
            system=name, horizon=50, dt=spec.default_dt, substeps=1,
            state_weights=np.zeros(n), control_weights=np.zeros(nu),
            terminal_weights=p, target=target,
            state_box=spec.state_bounds,
        )
    if name == "synthetic_linear":
        # Unit actuation caps the controllable region at |x| < 1/|nu|, so
        # train from a box where every family member can be regulated.
        return ControlProblem(
            system=name, horizon=20, dt=spec.default_dt, substeps=1,
            state_weights=np.ones(n), control_weights=0.1 * np.ones(nu),
            terminal_weights=np.ones(n), target=np.zeros(n),
            train_box=np.array([[-1.0, 1.0]]), state_box=spec.state_bounds,
        )
    raise KeyError(f"no default control problem for system '{name}'")


# ---------------------------------------------------------------------------
# coefficient bank


@dataclass
class CoefficientBank:
    """Empirical distribution of mixing coefficients over a family.

    Rows are coefficient vectors identified from training systems. The
    policy is trained against draws from this bank, optionally blended
    pairwise, so that at run time it generalizes across the coefficient
    region the family actually occupies.
    """

    system: str
    coeffs: np.ndarray
    params: list

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] == 0:
            raise ad.DimensionError("coefficient bank needs a (entries, B) matrix")
        if len(self.params) != self.coeffs.shape[0]:
            raise ValueError("one parameter record per bank entry required")

    @property
    def size(self) -> int:
        return self.coeffs.shape[0]

    @property
    def dim(self) -> int:
        return self.coeffs.shape[1]

    def sample(self, rng: np.random.Generator, batch: int, mixture: float = 0.0) -> np.ndarray:
        """Draw (batch, B) coefficient rows, blending pairs with probability `mixture`."""
        idx = rng.integers(0, self.size, size=batch)
        out = self.coeffs[idx].copy()
        if mixture > 0.0 and self.size > 1:
            blend = rng.random(batch) < mixture
            other = rng.integers(0, self.size, size=batch)
            alpha = rng.random(batch)
            rows = np.flatnonzero(blend)
            out[rows] = (alpha[rows, None] * out[rows]
                         + (1.0 - alpha[rows, None]) * self.coeffs[other[rows]])
        return out

    def input_stats(self):
        """Per-dimension (shift, scale) for normalizing coefficient inputs.

        The scale is the standard deviation floored at five percent of the
        largest one, so nearly constant dimensions do not blow up inputs
        when a run-time fit lands slightly off the bank.
        """
        shift = self.coeffs.mean(axis=0)
        std = self.coeffs.std(axis=0)
        floor = max(0.05 * float(std.max()), 1e-6)
        return shift, np.maximum(std, floor)


def build_coefficient_bank(basis: BasisSet, datasets, lam: float | None = None) -> CoefficientBank:
    """Identify one coefficient vector per dataset and stack them."""
    rows, params = [], []
    for ds in datasets:
        if ds.system != basis.system:
            raise ValueError(f"dataset for '{ds.system}' cannot enter a '{basis.system}' bank")
        fit = infer_coefficients(basis, ds.xs, ds.us, ds.xnext, lam)
        rows.append(fit.c)
        params.append(dict(ds.params))
    return CoefficientBank(basis.system, np.stack(rows), params)


def save_bank(path, bank: CoefficientBank) -> None:
    doc = {
        "kind": "coefficient_bank",
        "format_version": 1,
        "system": bank.system,
        "coeffs": [list(map(float, row)) for row in bank.coeffs],
        "params": bank.params,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_bank(path) -> CoefficientBank:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("kind") != "coefficient_bank":
        raise ValueError(f"{path} is not a coefficient bank file")
    if doc.get("format_version") != 1:
        raise ValueError(f"unsupported bank format {doc.get('format_version')}")
    return CoefficientBank(doc["system"], np.array(doc["coeffs"]), doc["params"])


# ---------------------------------------------------------------------------
# policy network


@dataclass
class PolicyNet:
    """Control policy u = squash(net((features - shift) / scale)).

    Features are the concatenation of state, task parameters, and mixing
    coefficients. The squash maps the last layer through u_mid + u_half *
    tanh(.), which keeps every output strictly inside the actuator box.
    Shift and scale are frozen at initialization and live in the
    checkpoint, since the network weights are only meaningful relative to
    them.
    """

    system: str
    net: nn.Mlp
    state_dim: int
    task_dim: int
    coeff_dim: int
    in_shift: np.ndarray
    in_scale: np.ndarray
    u_mid: np.ndarray
    u_half: np.ndarray

    def __post_init__(self):
        self.in_shift = np.asarray(self.in_shift, dtype=float)
        self.in_scale = np.asarray(self.in_scale, dtype=float)
        self.u_mid = np.asarray(self.u_mid, dtype=float)
        self.u_half = np.asarray(self.u_half, dtype=float)
        want = self.state_dim + self.task_dim + self.coeff_dim
        if self.net.in_dim != want:
            raise ad.DimensionError(
                f"policy net expects {self.net.in_dim} inputs, features have {want}")
        if self.in_shift.shape != (want,) or self.in_scale.shape != (want,):
            raise ad.DimensionError("input shift/scale must match the feature width")
        if np.any(self.in_scale <= 0):
            raise ValueError("input scales must be strictly positive")
        if self.u_mid.shape != (self.net.out_dim,) or self.u_half.shape != (self.net.out_dim,):
            raise ad.DimensionError("output squash must match the control width")
        if np.any(self.u_half <= 0):
            raise ValueError("control box must have positive width")

    @property
    def control_dim(self) -> int:
        return self.net.out_dim


def init_policy(
    problem: ControlProblem,
    bank: CoefficientBank,
    hidden,
    rng: np.random.Generator,
) -> PolicyNet:
    """Fresh policy for a task, with input scaling frozen from the data.

    States are centered and scaled by the training box, task parameters by
    their sampling ranges, and coefficients by bank statistics.
    """
    spec = get_system(problem.system)
    if bank.system != problem.system:
        raise ValueError("coefficient bank and problem refer to different systems")
    sx = 0.5 * (problem.train_box[:, 0] + problem.train_box[:, 1])
    wx = np.maximum(0.5 * (problem.train_box[:, 1] - problem.train_box[:, 0]), 1e-6)
    ranges = problem.xi_ranges()
    st = 0.5 * (ranges[:, 0] + ranges[:, 1])
    wt = np.maximum(0.5 * (ranges[:, 1] - ranges[:, 0]), 1e-6)
    sc, wc = bank.input_stats()
    sizes = [spec.state_dim + problem.task_dim + bank.dim, *hidden, spec.control_dim]
    box = problem.control_box
    return PolicyNet(
        system=problem.system,
        net=nn.init_mlp(sizes, rng),
        state_dim=spec.state_dim,
        task_dim=problem.task_dim,
        coeff_dim=bank.dim,
        in_shift=np.concatenate([sx, st, sc]),
        in_scale=np.concatenate([wx, wt, wc]),
        u_mid=0.5 * (box[:, 0] + box[:, 1]),
        u_half=0.5 * (box[:, 1] - box[:, 0]),
    )


def policy_controls(policy: PolicyNet, x, xi, coeffs) -> Value:
    """Tape evaluation on a batch: x (m, n) Value, xi and coeffs arrays."""
    parts = [x]
    if policy.task_dim:
        parts.append(np.atleast_2d(np.asarray(xi, dtype=float)))
    parts.append(coeffs if isinstance(coeffs, Value)
                 else np.atleast_2d(np.asarray(coeffs, dtype=float)))
    z = ad.concat(parts, axis=1)
    z = ad.mul(ad.sub(z, policy.in_shift), 1.0 / policy.in_scale)
    raw = policy.net.forward(z)
    return ad.tanh_affine(raw, policy.u_half, policy.u_mid)


def eval_policy(policy: PolicyNet, x, xi=None, coeffs=None) -> np.ndarray:
    """Frozen numpy evaluation; accepts single vectors or batches."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    rows = np.atleast_2d(x)
    m = rows.shape[0]
    if policy.task_dim:
        t = np.atleast_2d(np.asarray(xi, dtype=float))
        t = np.broadcast_to(t, (m, policy.task_dim))
    else:
        t = np.zeros((m, 0))
    c = np.atleast_2d(np.asarray(coeffs, dtype=float))
    c = np.broadcast_to(c, (m, policy.coeff_dim))
    feats = np.concatenate([rows, t, c], axis=1)
    if feats.shape[1] != policy.net.in_dim:
        raise ad.DimensionError(
            f"policy features have width {feats.shape[1]}, net expects {policy.net.in_dim}")
    raw = policy.net.eval_np((feats - policy.in_shift) / policy.in_scale)
    u = policy.u_mid + policy.u_half * np.tanh(raw)
    return u[0] if single else u


def save_policy(path, policy: PolicyNet) -> None:
    doc = {
        "kind": "policy",
        "format_version": 1,
        "system": policy.system,
        "state_dim": policy.state_dim,
        "task_dim": policy.task_dim,
        "coeff_dim": policy.coeff_dim,
        "in_shift": nn._encode_array(policy.in_shift),
        "in_scale": nn._encode_array(policy.in_scale),
        "u_mid": nn._encode_array(policy.u_mid),
        "u_half": nn._encode_array(policy.u_half),
        "net": nn.mlp_to_dict(policy.net),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_policy(path) -> PolicyNet:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("kind") != "policy":
        raise ValueError(f"{path} is not a policy file")
    if doc.get("format_version") != 1:
        raise ValueError(f"unsupported policy format {doc.get('format_version')}")
    return PolicyNet(
        system=doc["system"],
        net=nn.mlp_from_dict(doc["net"]),
        state_dim=doc["state_dim"],
        task_dim=doc["task_dim"],
        coeff_dim=doc["coeff_dim"],
        in_shift=nn._decode_array(doc["in_shift"]),
        in_scale=nn._decode_array(doc["in_scale"]),
        u_mid=nn._decode_array(doc["u_mid"]),
        u_half=nn._decode_array(doc["u_half"]),
    )


# ---------------------------------------------------------------------------
# rollout and loss


def rollout_policy(policy: PolicyNet, basis: BasisSet, problem: ControlProblem,
                   x0: np.ndarray, xi: np.ndarray, coeffs: np.ndarray):
    """Closed policy-surrogate rollout on the tape.

    All rows of the batch advance together: x0 (m, n), xi (m, task_dim),
    coeffs (m, B). Returns (states, controls), lists of Values of length
    horizon + 1 and horizon. Controls are held over integrator substeps.
    """
    x = Value(np.atleast_2d(np.asarray(x0, dtype=float)))
    states, controls = [x], []
    for _ in range(problem.horizon):
        u = policy_controls(policy, x, xi, coeffs)
        x = rk4_step(lambda s, a: fe_rhs(basis, coeffs, s, a),
                     x, u, problem.dt, problem.substeps)
        states.append(x)
        controls.append(u)
    return states, controls


def _sum_values(vals):
    total = vals[0]
    for v in vals[1:]:
        total = ad.add(total, v)
    return total


def dpc_loss(problem: ControlProblem, states, controls, ref: np.ndarray):
    """Task loss over a rollout batch, averaged over rows.

    Returns (loss, breakdown) where breakdown maps term names to floats
    that sum to the loss: stage_state, stage_control, terminal,
    state_penalty, control_penalty. The control penalty is reported for
    completeness but is exactly zero whenever controls come from the
    squashing policy, which cannot leave the actuator box.
    """
    if len(states) != len(controls) + 1:
        raise ad.DimensionError("need one more state than controls")
    m = states[0].data.shape[0]
    ref = np.atleast_2d(np.asarray(ref, dtype=float))
    inv_m = 1.0 / m
    terms = []

    q, r, p = problem.state_weights, problem.control_weights, problem.terminal_weights
    if np.any(q != 0.0):
        stage_state = _sum_values(
            [ad.vsum(ad.mul(ad.square(ad.sub(x, ref)), q)) for x in states[:-1]])
    else:
        stage_state = Value(np.zeros(()))
    if np.any(r != 0.0):
        stage_control = _sum_values(
            [ad.vsum(ad.mul(ad.square(u), r)) for u in controls])
    else:
        stage_control = Value(np.zeros(()))
    terminal = ad.vsum(ad.mul(ad.square(ad.sub(states[-1], ref)), p))
    terms = [stage_state, stage_control, terminal]

    if problem.state_box is not None:
        lo, hi = problem.state_box[:, 0], problem.state_box[:, 1]
        hinges = []
        for x in states:
            hinges.append(ad.vsum(ad.square(ad.relu(ad.sub(lo, x)))))
            hinges.append(ad.vsum(ad.square(ad.relu(ad.sub(x, hi)))))
        state_pen = ad.mul(_sum_values(hinges), problem.penalty_weight)
    else:
        state_pen = Value(np.zeros(()))
    terms.append(state_pen)

    # Control bounds hold by construction, so this term never contributes
    # gradient; it is computed off the tape purely to report the split.
    lo, hi = problem.control_box[:, 0], problem.control_box[:, 1]
    ctrl_pen = 0.0
    for u in controls:
        du = u.data
        ctrl_pen += float(np.sum(np.maximum(lo - du, 0.0) ** 2)
                          + np.sum(np.maximum(du - hi, 0.0) ** 2))
    ctrl_pen *= problem.penalty_weight * inv_m

    loss = ad.add(ad.mul(_sum_values(terms), inv_m), ctrl_pen)
    breakdown = {
        "stage_state": float(stage_state.data) * inv_m,
        "stage_control": float(stage_control.data) * inv_m,
        "terminal": float(terminal.data) * inv_m,
        "state_penalty": float(state_pen.data) * inv_m,
        "control_penalty": ctrl_pen,
    }
    return loss, breakdown


# ---------------------------------------------------------------------------
# training


@dataclass
class DpcTrainConfig:
    lr: float = 1e-3
    iters: int = 1500
    batch: int = 64
    mixture: float = 0.25
    # Gaussian jitter on sampled coefficients, in units of the bank's
    # per-dimension spread. Online identification never reproduces the
    # bank rows exactly, so training on perturbed coefficients keeps the
    # policy usable under imperfect identification.
    coeff_noise: float = 0.0
    target_loss: float | None = None


def train_policy(
    policy: PolicyNet,
    basis: BasisSet,
    problem: ControlProblem,
    bank: CoefficientBank,
    cfg: DpcTrainConfig,
    rng: np.random.Generator,
) -> list:
    """Self-supervised policy optimization; returns the loss history.

    Every iteration draws fresh start states from the training box, fresh
    task parameters, and fresh coefficient rows from the bank, so the
    policy never sees a fixed dataset it could overfit.
    """
    if basis.system != problem.system or bank.system != problem.system:
        raise ValueError("policy, basis, and bank must describe the same system")
    if bank.dim != policy.coeff_dim or bank.dim != basis.size:
        raise ad.DimensionError("coefficient width mismatch between basis, bank, and policy")
    opt = nn.Adam(policy.net.parameters(), lr=cfg.lr)
    history = []
    for it in range(cfg.iters):
        x0 = rng.uniform(problem.train_box[:, 0], problem.train_box[:, 1],
                         size=(cfg.batch, policy.state_dim))
        xi = problem.sample_xi(rng, cfg.batch)
        coeffs = bank.sample(rng, cfg.batch, cfg.mixture)
        if cfg.coeff_noise > 0:
            _, spread = bank.input_stats()
            coeffs = coeffs + cfg.coeff_noise * spread * rng.standard_normal(coeffs.shape)
        states, controls = rollout_policy(policy, basis, problem, x0, xi, coeffs)
        loss, _ = dpc_loss(problem, states, controls, problem.reference(xi))
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDivergedError(it, detail="policy loss is not finite")
        ad.backward(loss)
        opt.step()
        history.append(value)
        if cfg.target_loss is not None and value <= cfg.target_loss:
            break
    return history
