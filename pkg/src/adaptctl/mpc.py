"""Receding-horizon control by direct shooting on the true dynamics.

This is the comparison baseline: it is given the exact plant parameters
and solves every step's finite-horizon problem online with first-order
updates through a differentiable rollout. The objective is the same one
the policy trains against, so closed-loop comparisons measure the online
versus offline split rather than differing costs.

The solver is projected Adam with a monotone acceptance rule: each
proposed step is halved until the clipped candidate does not increase the
objective, moments update from the raw gradient either way. Termination
is by the projected gradient map, max |U - clip(U - g)| <= tol, which
handles active actuator bounds correctly (a boundary point with an
inward-pushing gradient is stationary).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .dpc import ControlProblem, dpc_loss
from .dynamics import eval_rhs, get_system, rk4_step


@dataclass
class OcpSolution:
    """One solved open-loop problem.

    `states` is the rollout of the true dynamics under `controls` from the
    queried start state, so states[0] is x0 and states[k+1] follows from
    controls[k].
    """

    controls: np.ndarray
    states: np.ndarray
    objective: float
    breakdown: dict
    iterations: int
    converged: bool
    reason: str
    seconds: float
    history: list = field(default_factory=list)


def shift_controls(u_prev: np.ndarray) -> np.ndarray:
    """Warm start for the next step: drop the first move, repeat the last."""
    u = np.asarray(u_prev, dtype=float)
    return np.concatenate([u[1:], u[-1:]], axis=0)


def _clip(problem: ControlProblem, u: np.ndarray) -> np.ndarray:
    return np.clip(u, problem.control_box[:, 0], problem.control_box[:, 1])


def _evaluate(problem, spec, params, x0, u_plan, ref, want_grad):
    """Objective (and optionally its gradient) of one control plan."""
    u_val = Value(u_plan)
    x = Value(np.atleast_2d(x0))
    states, controls = [x], []
    for k in range(problem.horizon):
        u_k = u_val[k : k + 1]
        x = rk4_step(lambda s, a: eval_rhs(spec, params, s, a),
                     x, u_k, problem.dt, problem.substeps)
        states.append(x)
        controls.append(u_k)
    loss, parts = dpc_loss(problem, states, controls, ref)
    value = float(loss.data)
    traj = np.concatenate([s.data for s in states], axis=0)
    if not want_grad:
        return value, None, parts, traj
    ad.backward(loss)
    return value, ad.grad_of(u_val).copy(), parts, traj


def solve_ocp(
    problem: ControlProblem,
    params: dict,
    x0: np.ndarray,
    xi=None,
    u_init: np.ndarray | None = None,
    lr: float = 0.05,
    max_iters: int = 500,
    tol: float = 1e-5,
    ftol: float = 1e-8,
    patience: int = 10,
    max_halvings: int = 6,
) -> OcpSolution:
    """Solve one open-loop problem on the true dynamics.

    `params` are the exact plant parameters; `u_init` warm starts the
    plan (zeros otherwise, clipped into the actuator box either way).
    Returns the best iterate seen.

    Stops as converged on the projected gradient criterion (`tol`) or when
    `patience` consecutive accepted steps each improve the objective by
    less than `ftol * max(1, |f|)`; the latter is what makes warm-started
    solves cheap, since a shifted previous plan is already near-stationary.
    `reason` records which rule ended the run ("gradient", "progress",
    "stalled", or "budget").
    """
    spec = get_system(problem.system)
    x0 = np.asarray(x0, dtype=float).reshape(spec.state_dim)
    ref = np.atleast_2d(problem.reference(
        np.zeros(0) if xi is None else np.asarray(xi, dtype=float)))
    n_u = spec.control_dim
    if u_init is None:
        u = np.zeros((problem.horizon, n_u))
    else:
        u = np.array(u_init, dtype=float).reshape(problem.horizon, n_u)
    u = _clip(problem, u)

    t0 = time.perf_counter()
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m1 = np.zeros_like(u)
    m2 = np.zeros_like(u)
    best = None
    history = []
    converged = False
    reason = "budget"
    stall = 0
    iters = 0
    for it in range(1, max_iters + 1):
        value, grad, parts, traj = _evaluate(problem, spec, params, x0, u, ref, True)
        iters = it
        if best is None or value < best[0]:
            best = (value, u.copy(), parts, traj)
        history.append(value)
        pg = np.max(np.abs(u - _clip(problem, u - grad)))
        if pg <= tol:
            converged = True
            reason = "gradient"
            break
        m1 = beta1 * m1 + (1.0 - beta1) * grad
        m2 = beta2 * m2 + (1.0 - beta2) * grad * grad
        step = lr * (m1 / (1.0 - beta1**it)) / (np.sqrt(m2 / (1.0 - beta2**it)) + eps)
        accepted = None
        for direction in (step, lr * grad):
            for h in range(max_halvings + 1):
                cand = _clip(problem, u - direction / 2.0**h)
                cand_value, _, _, _ = _evaluate(problem, spec, params, x0, cand, ref, False)
                if cand_value <= value:
                    accepted = cand_value
                    u = cand
                    break
            if accepted is not None:
                break
        if accepted is None:
            reason = "stalled"
            break
        stall = stall + 1 if value - accepted <= ftol * max(1.0, abs(value)) else 0
        if stall >= patience:
            converged = True
            reason = "progress"
            break

    value, u_best, parts, traj = best
    return OcpSolution(
        controls=u_best,
        states=traj,
        objective=value,
        breakdown=parts,
        iterations=iters,
        converged=converged,
        reason=reason,
        seconds=time.perf_counter() - t0,
        history=history,
    )
