"""Closed-loop evaluation of both controllers on the true plants.

An episode steps a plant for a fixed number of steps while one of two
controllers picks the input: the adaptive surrogate policy (a frozen
network fed with identified coefficients) or the online baseline that
re-solves the open-loop problem every step with exact knowledge of the
plant. Mid-episode parameter switches are silent: the plant changes, the
controllers are not told, and the adaptive one has to notice through the
data in its observation window.

Traces record everything needed for analysis and are exportable as a CSV
with a JSON summary sidecar.
"""

from __future__ import annotations

import csv
import json
import os
import time
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dpc import ControlProblem, PolicyNet, eval_policy
from .dynamics import collect_dataset, get_system, plant_step, sample_params, sample_state
from .encoder import BasisSet, fe_rhs, infer_coefficients
from .mpc import shift_controls, solve_ocp


@dataclass
class AdaptConfig:
    """Online identification settings for the adaptive controller.

    `window` transitions are kept in a ring buffer; coefficients are
    refit from the buffer every `period` steps. `lam` overrides the basis
    set's ridge weight when given. The identification warm-up runs for
    `warmup` plant steps (defaulting to `window`); a shorter window lets
    the buffer forget a superseded plant faster without shortening the
    initial excitation. With `excitation_free` no side trajectory is run
    at all: the buffer fills from closed-loop data and the coefficients
    stay at zero until the first refit.

    `refit_trigger` switches the controller from periodic refitting to
    identify-once-with-change-detection. At 0 (default) every scheduled
    refit is adopted unconditionally. When positive, the coefficients
    fit during warm-up are frozen and every plant transition is scored
    against the incumbent's one-step prediction; a change is declared
    when that innovation exceeds `refit_trigger` times the running
    median of recent innovations on two consecutive steps. The median
    normalisation makes detection amplitude-invariant: near a setpoint
    both the innovations and their history shrink together, so a silent
    plant change stands out long before the state has drifted far.
    On detection the buffer is restarted — its older rows describe the
    superseded plant — and the incumbent stays in charge until enough
    fresh rows support a clean re-solve. Freezing matters because
    converged closed-loop data pins down almost nothing and an
    unconditional least-squares refit would collapse the coefficients
    toward the ridge prior.

    `rebuild_dither` adds clipped Gaussian exploration noise to the
    policy output while the buffer is being rebuilt after a reset, as a
    fraction of the control half-range. Data collected under a failing
    stale policy alone can be too self-correlated to pin the new plant
    down; a little dither restores excitation exactly when it is needed
    and nowhere else. `rebuild_min` is the row count required before the
    post-reset re-solve runs (capped at the window; default twice the
    basis size): lower values re-identify sooner at the price of a
    noisier fit.
    """

    window: int = 100
    period: int = 25
    lam: float | None = None
    warmup_hold: int = 5
    warmup: int | None = None
    excitation_free: bool = False
    refit_trigger: float = 0.0
    rebuild_dither: float = 0.0
    rebuild_min: int | None = None

    def __post_init__(self):
        if self.window < 1 or self.period < 1:
            raise ValueError("window and period must be positive")
        if self.warmup is not None and self.warmup < 1:
            raise ValueError("warmup must be positive when given")
        if self.refit_trigger < 0:
            raise ValueError("refit_trigger must be nonnegative")
        if self.rebuild_dither < 0:
            raise ValueError("rebuild_dither must be nonnegative")
        if self.rebuild_min is not None and self.rebuild_min < 1:
            raise ValueError("rebuild_min must be positive when given")


@dataclass
class SwitchSchedule:
    """Silent plant changes: at step k the dynamics become params[i]."""

    steps: tuple
    params: tuple

    def __post_init__(self):
        self.steps = tuple(int(s) for s in self.steps)
        self.params = tuple(dict(p) for p in self.params)
        if len(self.steps) != len(self.params):
            raise ValueError("one parameter set per switch step required")
        if any(s <= 0 for s in self.steps):
            raise ValueError("switch steps must be positive")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("switch steps must be strictly increasing")

    @classmethod
    def empty(cls):
        return cls((), ())

    @classmethod
    def single_random(cls, spec, rng: np.random.Generator, lo_step: int, hi_step: int):
        """One switch to freshly sampled parameters in [lo_step, hi_step]."""
        step = int(rng.integers(lo_step, hi_step + 1))
        return cls((step,), (sample_params(spec, rng),))


@dataclass
class EpisodeTrace:
    """Everything one closed-loop run produced, row k at time k * dt.

    There are steps + 1 rows; the final row carries the terminal state
    with NaN controls since no input is applied there. `coeffs` is None
    for the baseline, which does not identify anything.
    """

    system: str
    algorithm: str
    dt: float
    states: np.ndarray
    controls: np.ndarray
    refs: np.ndarray
    nu_ids: np.ndarray
    ctrl_seconds: np.ndarray
    coeffs: np.ndarray | None = None
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        rows = self.states.shape[0]
        for name in ("controls", "refs", "nu_ids", "ctrl_seconds"):
            if getattr(self, name).shape[0] != rows:
                raise ad.DimensionError(f"trace column '{name}' must have {rows} rows")
        if self.coeffs is not None and self.coeffs.shape[0] != rows:
            raise ad.DimensionError(f"trace column 'coeffs' must have {rows} rows")

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.states.shape[0]) * self.dt


def piecewise_xi(problem: ControlProblem, steps: int, hold: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Task-parameter trajectory that resamples every `hold` steps."""
    if hold < 1:
        raise ValueError("hold must be positive")
    n_seg = (steps + 1 + hold - 1) // hold
    segs = problem.sample_xi(rng, max(n_seg, 1))
    return np.repeat(segs, hold, axis=0)[: steps + 1]


def _xi_rows(problem: ControlProblem, steps: int, xi_traj) -> np.ndarray:
    if xi_traj is None:
        return np.zeros((steps + 1, problem.task_dim))
    xi = np.atleast_2d(np.asarray(xi_traj, dtype=float))
    if xi.shape == (1, problem.task_dim):
        xi = np.repeat(xi, steps + 1, axis=0)
    if xi.shape != (steps + 1, problem.task_dim):
        raise ad.DimensionError(
            f"xi trajectory must have shape ({steps + 1}, {problem.task_dim})")
    return xi


def compute_metrics(trace: EpisodeTrace, problem: ControlProblem) -> dict:
    """Tracking error and constraint accounting over a whole trace.

    The error is the mean of squared deviations from the reference over
    every row and every tracked state dimension.
    """
    spec = get_system(trace.system)
    dims = list(spec.tracked_dims)
    err = trace.states[:, dims] - trace.refs[:, dims]
    lo, hi = spec.state_bounds[:, 0], spec.state_bounds[:, 1]
    state_bad = np.any((trace.states < lo - 1e-9) | (trace.states > hi + 1e-9), axis=1)
    u = trace.controls[:-1]
    clo, chi = problem.control_box[:, 0], problem.control_box[:, 1]
    ctrl_bad = np.any((u < clo - 1e-9) | (u > chi + 1e-9), axis=1)
    return {
        "mse": float(np.mean(err**2)),
        "final_error": float(np.linalg.norm(err[-1])),
        "state_violations": int(np.count_nonzero(state_bad)),
        "control_violations": int(np.count_nonzero(ctrl_bad)),
        "mean_ctrl_seconds": float(np.mean(trace.ctrl_seconds[:-1])),
        "total_ctrl_seconds": float(np.sum(trace.ctrl_seconds)),
    }


def run_fedpc_episode(
    policy: PolicyNet,
    basis: BasisSet,
    problem: ControlProblem,
    params: dict,
    x0: np.ndarray,
    steps: int,
    rng: np.random.Generator,
    adapt: AdaptConfig | None = None,
    switches: SwitchSchedule | None = None,
    xi_traj=None,
) -> EpisodeTrace:
    """Run the adaptive controller against the true plant.

    Before the episode the plant is excited for `adapt.warmup` transitions
    on a side trajectory to seed the observation buffer and fit the first
    coefficient vector; that interaction is reported in the summary but
    not charged to any control step. During the episode every transition
    enters the ring buffer and the coefficients are refit every
    `adapt.period` steps, with the fit time charged to that step. Plant
    switches take effect silently before the step they are scheduled at.
    Under `adapt.excitation_free` the warm-up is skipped entirely and the
    policy starts from zero coefficients.
    """
    spec = get_system(problem.system)
    adapt = adapt or AdaptConfig()
    switches = switches or SwitchSchedule.empty()
    if basis.system != problem.system or policy.system != problem.system:
        raise ValueError("policy, basis, and problem must describe the same system")
    if adapt.window < basis.size:
        warnings.warn(
            f"identification window {adapt.window} is smaller than the basis "
            f"size {basis.size}; the fit leans on the ridge term",
            RuntimeWarning, stacklevel=2)
    lam = basis.lam if adapt.lam is None else adapt.lam
    xi = _xi_rows(problem, steps, xi_traj)
    params = dict(params)
    initial_params = dict(params)

    seed_ds = None
    if adapt.excitation_free:
        buffer = deque(maxlen=adapt.window)
        warmup_seconds = 0.0
    else:
        t0 = time.perf_counter()
        n_warm = adapt.window if adapt.warmup is None else adapt.warmup
        seed_ds = collect_dataset(spec, params, n_warm, rng,
                                  hold_steps=adapt.warmup_hold)
        buffer = deque(zip(seed_ds.xs, seed_ds.us, seed_ds.xnext),
                       maxlen=adapt.window)
        warmup_seconds = time.perf_counter() - t0

    counters = {"failures": 0, "skipped": 0, "resets": 0}
    state = {"floor_mse": None, "exceeded": False,
             "rebuilding": adapt.excitation_free and adapt.refit_trigger > 0,
             "settling": False}
    innovations = deque(maxlen=adapt.window)
    # After a detected plant change the buffer is rebuilt from scratch;
    # fitting resumes once it holds enough rows for a honest solve.
    if adapt.rebuild_min is None:
        rebuild_min = min(adapt.window, 2 * basis.size)
    else:
        rebuild_min = min(adapt.window, adapt.rebuild_min)

    def rows():
        return (np.array([b[i] for b in buffer]) for i in range(3))

    def solve(prev, xs, us, xn):
        t1 = time.perf_counter()
        try:
            fit = infer_coefficients(basis, xs, us, xn, lam)
        except ad.NumericalError:
            counters["failures"] += 1
            return prev, time.perf_counter() - t1, False
        # The first fit comes from deliberate excitation, so its residual
        # is an honest noise scale for the model class; it anchors the
        # dust gates of the change detector.
        if state["floor_mse"] is None:
            state["floor_mse"] = max(fit.fit_mse, 1e-12)
        return fit.c, time.perf_counter() - t1, True

    def refit(prev):
        t1 = time.perf_counter()
        xs, us, xn = rows()
        c, _, adopted = solve(prev, xs, us, xn)
        return c, time.perf_counter() - t1, adopted

    n, nu = spec.state_dim, spec.control_dim
    states = np.empty((steps + 1, n))
    controls = np.full((steps + 1, nu), np.nan)
    nu_ids = np.zeros(steps + 1, dtype=int)
    coeff_rows = np.empty((steps + 1, basis.size))
    ctrl_seconds = np.zeros(steps + 1)

    if seed_ds is not None:
        c, fit_seconds, adopted = solve(np.zeros(basis.size), seed_ds.xs,
                                        seed_ds.us, seed_ds.xnext)
        refit_steps = [0] if adopted else []
    else:
        c, fit_seconds = np.zeros(basis.size), 0.0
        refit_steps = []
    fit_seconds_total = fit_seconds
    x = np.asarray(x0, dtype=float).reshape(n)
    nu_id = 0
    sw = dict(zip(switches.steps, switches.params))
    for k in range(steps):
        if k in sw:
            params = dict(sw[k])
            nu_id += 1
        spent = fit_seconds if k == 0 else 0.0
        if k > 0 and buffer:
            if adapt.refit_trigger > 0:
                if state["rebuilding"]:
                    # Re-solve as soon as the rebuilt buffer is big
                    # enough, independent of the refit period: after a
                    # detected change every step of delay lets the stale
                    # incumbent drive the plant further off course.
                    if len(buffer) >= rebuild_min:
                        c2, took, adopted = refit(c)
                        if adopted:
                            c = c2
                            state["rebuilding"] = False
                            state["settling"] = True
                            state["exceeded"] = False
                            innovations.clear()
                            refit_steps.append(k)
                        fit_seconds_total += took
                        spent += took
                elif state["settling"] and k % adapt.period == 0:
                    # The first post-reset fit leans on few rows; keep
                    # refreshing it while the buffer refills, then freeze
                    # again once a full window backs the coefficients.
                    c2, took, adopted = refit(c)
                    if adopted:
                        c = c2
                        refit_steps.append(k)
                        if len(buffer) >= adapt.window:
                            state["settling"] = False
                            state["exceeded"] = False
                            innovations.clear()
                    fit_seconds_total += took
                    spent += took
                elif k % adapt.period == 0:
                    counters["skipped"] += 1
            elif k % adapt.period == 0:
                c, took, adopted = refit(c)
                if adopted:
                    refit_steps.append(k)
                fit_seconds_total += took
                spent += took
        t1 = time.perf_counter()
        u = eval_policy(policy, x, xi[k], c)
        if adapt.rebuild_dither > 0 and (state["rebuilding"] or state["settling"]):
            # Full dither while rows for the first post-reset fit are
            # collected, half while the refilling window polishes it:
            # quiet closed-loop rows alone pin the coefficients down
            # poorly, and a fit degraded that way would either misguide
            # the policy or retrigger the change detector.
            scale = 1.0 if state["rebuilding"] else 0.5
            lo, hi = problem.control_box[:, 0], problem.control_box[:, 1]
            u = np.clip(u + scale * adapt.rebuild_dither * 0.5 * (hi - lo)
                        * rng.standard_normal(u.shape), lo, hi)
        spent += time.perf_counter() - t1
        states[k] = x
        controls[k] = u
        nu_ids[k] = nu_id
        coeff_rows[k] = c
        ctrl_seconds[k] = spent
        xnext = plant_step(spec, params, x, u, problem.dt, step_index=k)
        buffer.append((x.copy(), u.copy(), xnext.copy()))
        if (adapt.refit_trigger > 0 and not state["rebuilding"]
                and not state["settling"]):
            t1 = time.perf_counter()
            pred = fe_rhs(basis, c, x[None, :], u[None, :])[0]
            f = (xnext - x) / basis.dt
            raw = float(np.mean(np.square(pred - f)))
            floor = state["floor_mse"] or 0.0
            # The innovation of a healthy incumbent settles onto a bias
            # floor near the setpoint, so changes are detectable exactly
            # when the mismatch outgrows that floor: compare against the
            # running median of recent innovations and require two
            # consecutive exceedances plus a minimal absolute size, so
            # neither a single badly-fit region of state space nor
            # numerical dust at a converged setpoint fires the alarm.
            hot = False
            if len(innovations) >= 5:
                med = float(np.median(innovations))
                hot = (raw > adapt.refit_trigger * med
                       and raw > 1e-6 * floor)
            if hot and state["exceeded"]:
                # The incumbent stopped explaining the plant. Restart
                # the buffer, keeping only the rows that raised the
                # alarm — they already belong to the new plant.
                fresh = list(buffer)[-2:]
                buffer.clear()
                buffer.extend(fresh)
                state["rebuilding"] = True
                counters["resets"] += 1
                hot = False
            if not hot and not state["rebuilding"]:
                innovations.append(raw)
            state["exceeded"] = hot
            ctrl_seconds[k] += time.perf_counter() - t1
        x = xnext
    states[steps] = x
    nu_ids[steps] = nu_id
    coeff_rows[steps] = c

    trace = EpisodeTrace(
        system=problem.system, algorithm="fe_dpc", dt=problem.dt,
        states=states, controls=controls, refs=problem.reference(xi),
        nu_ids=nu_ids, ctrl_seconds=ctrl_seconds, coeffs=coeff_rows)
    trace.summary = {
        "algorithm": "fe_dpc",
        "system": problem.system,
        "steps": steps,
        "dt": problem.dt,
        "param_history": [{"step": 0, "params": initial_params}]
        + [{"step": s, "params": dict(p)} for s, p in zip(switches.steps, switches.params)],
        "adapt": {"window": adapt.window, "period": adapt.period, "lam": lam,
                  "refit_trigger": adapt.refit_trigger},
        "refit_steps": refit_steps,
        "skipped_refits": counters["skipped"],
        "buffer_resets": counters["resets"],
        "fit_failures": counters["failures"],
        "fit_seconds_total": fit_seconds_total,
        "warmup_seconds": warmup_seconds,
        **compute_metrics(trace, problem),
    }
    return trace


def run_mpc_episode(
    problem: ControlProblem,
    params: dict,
    x0: np.ndarray,
    steps: int,
    xi_traj=None,
    **solver_kwargs,
) -> EpisodeTrace:
    """Run the white-box baseline: one warm-started solve per step.

    The baseline assumes full knowledge of fixed dynamics, so silent
    switching makes no sense for it; use the adaptive controller for
    switch experiments.
    """
    spec = get_system(problem.system)
    xi = _xi_rows(problem, steps, xi_traj)
    n, nu = spec.state_dim, spec.control_dim
    states = np.empty((steps + 1, n))
    controls = np.full((steps + 1, nu), np.nan)
    ctrl_seconds = np.zeros(steps + 1)
    iterations = []
    converged = 0
    x = np.asarray(x0, dtype=float).reshape(n)
    plan = None
    for k in range(steps):
        sol = solve_ocp(problem, params, x, xi=xi[k],
                        u_init=None if plan is None else shift_controls(plan),
                        **solver_kwargs)
        plan = sol.controls
        states[k] = x
        controls[k] = plan[0]
        ctrl_seconds[k] = sol.seconds
        iterations.append(sol.iterations)
        converged += int(sol.converged)
        x = plant_step(spec, params, x, plan[0], problem.dt, step_index=k)
    states[steps] = x

    trace = EpisodeTrace(
        system=problem.system, algorithm="wb_mpc", dt=problem.dt,
        states=states, controls=controls, refs=problem.reference(xi),
        nu_ids=np.zeros(steps + 1, dtype=int), ctrl_seconds=ctrl_seconds)
    trace.summary = {
        "algorithm": "wb_mpc",
        "system": problem.system,
        "steps": steps,
        "dt": problem.dt,
        "param_history": [{"step": 0, "params": dict(params)}],
        "mean_iterations": float(np.mean(iterations)) if iterations else 0.0,
        "converged_fraction": float(converged / max(steps, 1)),
        **compute_metrics(trace, problem),
    }
    return trace


# ---------------------------------------------------------------------------
# persistence


def save_trace(path, trace: EpisodeTrace) -> None:
    """Write the trace as CSV plus a JSON summary sidecar next to it."""
    path = os.fspath(path)
    spec = get_system(trace.system)
    n, nu = spec.state_dim, spec.control_dim
    header = ["t"]
    header += [f"x{i + 1}" for i in range(n)]
    header += [f"u{i + 1}" for i in range(nu)]
    header += [f"ref{i + 1}" for i in range(n)]
    header += ["nu_id"]
    if trace.coeffs is not None:
        header += [f"c{i + 1}" for i in range(trace.coeffs.shape[1])]
    header += ["ctrl_seconds"]
    times = trace.times
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(trace.states.shape[0]):
            row = [times[k], *trace.states[k], *trace.controls[k], *trace.refs[k],
                   trace.nu_ids[k]]
            if trace.coeffs is not None:
                row += list(trace.coeffs[k])
            row.append(trace.ctrl_seconds[k])
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                             else int(v) for v in row])
    with open(os.path.splitext(path)[0] + ".json", "w") as fh:
        json.dump(trace.summary, fh, indent=2)


# ---------------------------------------------------------------------------
# paired comparison


def benchmark_suite(
    policy: PolicyNet,
    basis: BasisSet,
    problem: ControlProblem,
    n_episodes: int,
    steps: int,
    seed: int,
    adapt: AdaptConfig | None = None,
    mpc_kwargs: dict | None = None,
) -> dict:
    """Paired closed-loop comparison on matched plants and start states.

    Episode i draws its plant parameters, start state, and task from a
    child seed of `seed`, then both controllers run the exact same
    condition. Returns per-algorithm aggregates and the per-step time
    ratio between the baseline and the adaptive controller.
    """
    spec = get_system(problem.system)
    mpc_kwargs = mpc_kwargs or {}
    results = {"fe_dpc": [], "wb_mpc": []}
    for child in np.random.SeedSequence(seed).spawn(n_episodes):
        rng = np.random.default_rng(child)
        params = sample_params(spec, rng)
        x0 = sample_state(spec, rng)
        xi = problem.sample_xi(rng, 1)[0] if problem.task_dim else None
        fed = run_fedpc_episode(policy, basis, problem, params, x0, steps, rng,
                                adapt=adapt, xi_traj=xi)
        wbm = run_mpc_episode(problem, params, x0, steps, xi_traj=xi, **mpc_kwargs)
        results["fe_dpc"].append(fed.summary)
        results["wb_mpc"].append(wbm.summary)

    def aggregate(rows):
        return {
            "mse": float(np.mean([r["mse"] for r in rows])),
            "mean_ctrl_seconds": float(np.mean([r["mean_ctrl_seconds"] for r in rows])),
            "state_violations": int(sum(r["state_violations"] for r in rows)),
            "control_violations": int(sum(r["control_violations"] for r in rows)),
        }

    table = {name: aggregate(rows) for name, rows in results.items()}
    fed_t = table["fe_dpc"]["mean_ctrl_seconds"]
    table["speedup"] = table["wb_mpc"]["mean_ctrl_seconds"] / max(fed_t, 1e-12)
    table["episodes"] = n_episodes
    table["steps"] = steps
    table["per_episode"] = results
    return table
