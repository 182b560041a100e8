"""Benchmark system families, RK4 integration, and transition datasets.

Each family is a parametric ODE dx/dt = f(x, u; params).  The right-hand
sides are written once against a tiny dispatch layer so the same code
serves three callers: plain 1-d numpy vectors (plant simulation), batched
2-d arrays, and autodiff Values (white-box optimal control, which needs
gradients through the true dynamics).

States and controls are row vectors; batched inputs stack them as (m, n).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value


class IntegrationBlowupError(RuntimeError):
    def __init__(self, step_index, detail=""):
        self.step_index = step_index
        super().__init__(f"integration produced non-finite state at step {step_index}{detail}")


class CollectionError(RuntimeError):
    """Data collection kept failing after retries and restarts."""


@dataclass(frozen=True)
class SystemSpec:
    """Static description of one system family.

    `state_bounds` is the operating envelope used for truncating runaway
    trajectories and for soft state constraints; `init_bounds` is the box
    initial states are drawn from.  `param_space` maps parameter names to
    either ("uniform", lo, hi) or ("choice", (values...)).
    """

    name: str
    state_dim: int
    control_dim: int
    state_bounds: np.ndarray
    control_bounds: np.ndarray
    init_bounds: np.ndarray
    default_dt: float
    substeps: int = 1
    param_space: dict = field(default_factory=dict)
    tracked_dims: tuple = ()
    clamp_states: bool = False


def _box(rows) -> np.ndarray:
    a = np.asarray(rows, dtype=float)
    if a.ndim != 2 or a.shape[1] != 2 or np.any(a[:, 0] > a[:, 1]):
        raise ValueError("bounds must be rows of [lo, hi] with lo <= hi")
    return a


GLYCOLYTIC_CONST = {
    "J0": 2.5,
    "k2": 6.0,
    "k3": 16.0,
    "k4": 100.0,
    "k5": 1.28,
    "k6": 12.0,
    "q": 4.0,
    "N": 1.0,
    "A": 4.0,
    "kappa": 13.0,
    "psi": 0.1,
    "k": 1.8,
}

GRAVITY = 9.81

REGISTRY: dict[str, SystemSpec] = {}


def _register(spec: SystemSpec) -> SystemSpec:
    REGISTRY[spec.name] = spec
    return spec


VAN_DER_POL = _register(
    SystemSpec(
        name="van_der_pol",
        state_dim=2,
        control_dim=1,
        state_bounds=_box([[-2.0, 2.0], [-5.0, 5.0]]),
        control_bounds=_box([[-3.0, 3.0]]),
        init_bounds=_box([[-2.0, 2.0], [-2.0, 2.0]]),
        default_dt=0.1,
        param_space={"mu": ("uniform", 0.1, 3.0), "d": ("choice", (-1.0, 1.0))},
        tracked_dims=(0, 1),
    )
)

TWO_TANK = _register(
    SystemSpec(
        name="two_tank",
        state_dim=2,
        control_dim=2,
        state_bounds=_box([[0.0, 1.0], [0.0, 1.0]]),
        control_bounds=_box([[0.0, 1.0], [0.0, 1.0]]),
        init_bounds=_box([[0.0, 1.0], [0.0, 1.0]]),
        default_dt=1.0,
        param_space={"d1": ("uniform", 0.06, 0.1), "d2": ("uniform", 0.01, 0.06)},
        tracked_dims=(0, 1),
        clamp_states=True,
    )
)

GLYCOLYTIC = _register(
    SystemSpec(
        name="glycolytic",
        state_dim=7,
        control_dim=1,
        state_bounds=_box([[0.0, 8.0]] * 7),
        control_bounds=_box([[-4.0, 4.0]]),
        init_bounds=_box(
            [
                [0.15, 1.60],
                [0.19, 2.16],
                [0.04, 0.20],
                [0.10, 0.35],
                [0.08, 0.30],
                [0.14, 2.67],
                [0.05, 0.10],
            ]
        ),
        default_dt=0.01,
        substeps=5,
        param_space={"k1": ("choice", (80.0, 90.0, 100.0)), "K1": ("choice", (0.5, 0.75))},
        tracked_dims=(0,),
    )
)

QUADROTOR = _register(
    SystemSpec(
        name="quadrotor",
        state_dim=12,
        control_dim=3,
        state_bounds=_box(
            [[-5.0, 5.0]] * 2  # pn, pe
            + [[-1.0, 3.0]]  # h
            + [[-3.0, 3.0]] * 3  # u, v, w
            + [[-0.9, 0.9]] * 2  # phi, theta (keeps tan/sec well defined)
            + [[-3.2, 3.2]]  # psi
            + [[-6.0, 6.0]] * 3  # p, q, r
        ),
        control_bounds=_box([[0.0, 1.5], [-0.524, 0.524], [-0.524, 0.524]]),
        init_bounds=_box(
            [[-0.5, 0.5]] * 2
            + [[0.1, 0.8]]
            + [[-0.5, 0.5]] * 3
            + [[-0.3, 0.3]] * 2
            + [[-0.5, 0.5]]
            + [[-0.5, 0.5]] * 3
        ),
        default_dt=0.02,
        param_space={
            "m": ("uniform", 1.2, 1.6),
            "jxy": ("uniform", 0.050, 0.058),
            "jz": ("uniform", 0.090, 0.110),
        },
        tracked_dims=(2, 3, 4, 5, 9, 10, 11),
    )
)

# One-dimensional family with closed-form behavior; used for training
# sanity checks and self-tests rather than benchmarking.
SYNTHETIC_LINEAR = _register(
    SystemSpec(
        name="synthetic_linear",
        state_dim=1,
        control_dim=1,
        state_bounds=_box([[-3.0, 3.0]]),
        control_bounds=_box([[-1.0, 1.0]]),
        init_bounds=_box([[-2.0, 2.0]]),
        default_dt=0.05,
        param_space={"nu": ("uniform", -2.0, 2.0)},
        tracked_dims=(0,),
    )
)


def get_system(name: str) -> SystemSpec:
    try:
        return REGISTRY[name]
    except KeyError:
        raise KeyError(
            f"unknown system {name!r}; valid names: {', '.join(sorted(REGISTRY))}"
        ) from None


# ---------------------------------------------------------------------------
# right-hand sides

# Dispatch helpers so one rhs body serves ndarray and Value inputs alike.


def _is_value(x):
    return isinstance(x, Value)


def _sq(t):
    return ad.square(t) if _is_value(t) else t * t


def _sqrt(t, floor=1e-9):
    if _is_value(t):
        return ad.sqrt_guarded(t, floor)
    return np.sqrt(np.maximum(t, floor))


def _sin(t):
    return ad.sin(t) if _is_value(t) else np.sin(t)


def _cos(t):
    return ad.cos(t) if _is_value(t) else np.cos(t)


def _recip(t):
    return ad.reciprocal(t) if _is_value(t) else 1.0 / t


def _cat(parts):
    if any(_is_value(p) for p in parts):
        return ad.concat(parts, axis=1)
    return np.concatenate(parts, axis=1)


def _cols(a, n):
    return [a[:, i : i + 1] for i in range(n)]


def _rhs_van_der_pol(p, x, u):
    x1, x2 = _cols(x, 2)
    (u1,) = _cols(u, 1)
    dx1 = p["d"] * x2
    dx2 = p["mu"] * (x2 - _sq(x1) * x2) - x1 + u1
    return _cat([dx1, dx2])


def _rhs_two_tank(p, x, u):
    x1, x2 = _cols(x, 2)
    pump, valve = _cols(u, 2)
    s1 = _sqrt(x1)
    s2 = _sqrt(x2)
    dx1 = p["d1"] * ((1.0 - valve) * pump) - p["d2"] * s1
    dx2 = p["d1"] * (valve * pump) + p["d2"] * s1 - p["d2"] * s2
    return _cat([dx1, dx2])


def _rhs_glycolytic(p, x, u):
    c = GLYCOLYTIC_CONST
    x1, x2, x3, x4, x5, x6, x7 = _cols(x, 7)
    (u1,) = _cols(u, 1)
    # Hill term with exponent q = 4, built from two squarings.
    ratio2 = _sq(x6 * (1.0 / p["K1"]))
    inhib = _recip(1.0 + _sq(ratio2))
    flux = p["k1"] * (x1 * x6) * inhib
    t25 = c["k2"] * (x2 * (c["N"] - x5))
    t36 = c["k3"] * (x3 * (c["A"] - x6))
    t45 = c["k4"] * (x4 * x5)
    t26 = c["k6"] * (x2 * x5)
    relax = x4 - x7
    dx1 = c["J0"] - flux + u1
    dx2 = 2.0 * flux - t25 - t26
    dx3 = t25 - t36
    dx4 = t36 - t45 - c["kappa"] * relax
    dx5 = t25 - t45 - t26
    dx6 = -2.0 * flux + 2.0 * t36 - c["k5"] * x6
    dx7 = c["psi"] * c["kappa"] * relax - c["k"] * x7
    return _cat([dx1, dx2, dx3, dx4, dx5, dx6, dx7])


def _rhs_quadrotor(p, x, u):
    m, jx, jy, jz = p["m"], p["jxy"], p["jxy"], p["jz"]
    g = GRAVITY
    _, _, h, vu, vv, vw, phi, th, psi, wp, wq, wr = _cols(x, 12)
    a1, a2, a3 = _cols(u, 3)
    sphi, cphi = _sin(phi), _cos(phi)
    sth, cth = _sin(th), _cos(th)
    spsi, cpsi = _sin(psi), _cos(psi)
    sec_th = _recip(cth)
    tan_th = sth * sec_th
    # Inner-loop thrust and torque laws (altitude and attitude feedback are
    # part of the plant, the policy commands the setpoints a1..a3).
    thrust = m * g - 10.0 * (h - a1) + 3.0 * vw
    tau_phi = (a2 - phi) - wp
    tau_th = (a3 - th) - wq
    dpn = cth * cpsi * vu + (sphi * sth * cpsi - cphi * spsi) * vv + (cphi * sth * cpsi + sphi * spsi) * vw
    dpe = cth * spsi * vu + (sphi * sth * spsi + cphi * cpsi) * vv + (cphi * sth * spsi - sphi * cpsi) * vw
    dh = sth * vu - sphi * cth * vv - cphi * cth * vw
    du = wr * vv - wq * vw - g * sth
    dv = wp * vw - wr * vu + g * cth * sphi
    # Written as (m g cth cphi - F)/m so that hover cancels exactly in
    # floating point: at the equilibrium both terms are the same product.
    dw = wq * vu - wp * vv + (m * (g * (cth * cphi)) - thrust) * (1.0 / m)
    dphi = wp + sphi * tan_th * wq + cphi * tan_th * wr
    dth = cphi * wq - sphi * wr
    dpsi = sphi * sec_th * wq + cphi * sec_th * wr
    dwp = ((jy - jz) / jx) * (wq * wr) + tau_phi * (1.0 / jx)
    dwq = ((jz - jx) / jy) * (wp * wr) + tau_th * (1.0 / jy)
    dwr = ((jx - jy) / jz) * (wp * wq)
    return _cat([dpn, dpe, dh, du, dv, dw, dphi, dth, dpsi, dwp, dwq, dwr])


def _rhs_synthetic_linear(p, x, u):
    (x1,) = _cols(x, 1)
    (u1,) = _cols(u, 1)
    return _cat([p["nu"] * x1 + u1])


_RHS = {
    "van_der_pol": _rhs_van_der_pol,
    "two_tank": _rhs_two_tank,
    "glycolytic": _rhs_glycolytic,
    "quadrotor": _rhs_quadrotor,
    "synthetic_linear": _rhs_synthetic_linear,
}


def eval_rhs(spec: SystemSpec, params: dict, x, u):
    """Time derivative of the true dynamics at (x, u).

    Accepts (n,) or (m, n) numpy arrays, or (m, n) Values; the result has
    the same kind and shape as `x`.
    """
    fn = _RHS[spec.name]
    if _is_value(x) or _is_value(u):
        if x.shape[-1] != spec.state_dim or u.shape[-1] != spec.control_dim:
            raise ad.DimensionError(
                f"{spec.name}: rhs got state width {x.shape[-1]}, control width {u.shape[-1]}"
            )
        return fn(params, x, u)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != spec.state_dim or u.shape[-1] != spec.control_dim:
        raise ad.DimensionError(
            f"{spec.name}: rhs got state width {x.shape[-1]}, control width {u.shape[-1]}"
        )
    if x.ndim == 1:
        return fn(params, x[None, :], u[None, :] if u.ndim == 1 else u)[0]
    return fn(params, x, u)


# ---------------------------------------------------------------------------
# integration


def rk4_step(f, x, u, dt: float, substeps: int = 1, step_index=None):
    """Classical Runge-Kutta step of length dt, optionally split into
    equal substeps.  `f(x, u)` must return the same kind as `x` (ndarray
    or Value); the control is held constant over the step."""
    h = dt / substeps
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(substeps):
            k1 = f(x, u)
            k2 = f(x + (h / 2.0) * k1, u)
            k3 = f(x + (h / 2.0) * k2, u)
            k4 = f(x + h * k3, u)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    data = x.data if _is_value(x) else x
    if not np.all(np.isfinite(data)):
        raise IntegrationBlowupError(step_index)
    return x


def plant_step(spec: SystemSpec, params: dict, x: np.ndarray, u: np.ndarray,
               dt: float | None = None, substeps: int | None = None, step_index=None) -> np.ndarray:
    """One true-plant transition, including any physical clamping.

    Clamping (two-tank levels saturate at empty/full) happens here and only
    here, so differentiable rollouts stay smooth.
    """
    dt = spec.default_dt if dt is None else dt
    substeps = spec.substeps if substeps is None else substeps
    x_next = rk4_step(
        lambda s, c: eval_rhs(spec, params, s, c), x, u, dt, substeps, step_index
    )
    if spec.clamp_states:
        x_next = np.clip(x_next, spec.state_bounds[:, 0], spec.state_bounds[:, 1])
    return x_next


# ---------------------------------------------------------------------------
# sampling and data collection


def sample_params(spec: SystemSpec, rng: np.random.Generator) -> dict:
    out = {}
    for key, dist in spec.param_space.items():
        kind = dist[0]
        if kind == "uniform":
            out[key] = float(rng.uniform(dist[1], dist[2]))
        elif kind == "choice":
            vals = dist[1]
            out[key] = float(vals[rng.integers(len(vals))])
        else:
            raise ValueError(f"unknown parameter distribution {kind!r}")
    return out


def sample_state(spec: SystemSpec, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(spec.init_bounds[:, 0], spec.init_bounds[:, 1])


def random_control(spec: SystemSpec, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(spec.control_bounds[:, 0], spec.control_bounds[:, 1])


def in_state_bounds(spec: SystemSpec, x: np.ndarray) -> bool:
    return bool(
        np.all(np.isfinite(x))
        and np.all(x >= spec.state_bounds[:, 0])
        and np.all(x <= spec.state_bounds[:, 1])
    )


@dataclass
class TransitionDataset:
    """A bag of one-step transitions from a single fixed-parameter system."""

    system: str
    params: dict
    dt: float
    substeps: int
    xs: np.ndarray  # (n, state_dim)
    us: np.ndarray  # (n, control_dim)
    xnext: np.ndarray  # (n, state_dim)

    def __len__(self):
        return self.xs.shape[0]


def collect_dataset(
    spec: SystemSpec,
    params: dict,
    n_transitions: int,
    rng: np.random.Generator,
    dt: float | None = None,
    excitation: str = "piecewise",
    hold_steps: int = 5,
    max_restarts: int = 200,
) -> TransitionDataset:
    """Simulate the plant under random excitation and record transitions.

    `piecewise` excitation holds each random control for `hold_steps`
    steps; `random` draws a fresh control every step.  Trajectories that
    leave the state envelope are truncated and restarted from a fresh
    initial state.  A stiffness blowup first retries the step with the
    substep size halved (up to two times) before restarting.
    """
    if excitation not in ("piecewise", "random"):
        raise ValueError(f"unknown excitation {excitation!r}")
    hold = 1 if excitation == "random" else hold_steps
    dt = spec.default_dt if dt is None else dt
    xs = np.empty((n_transitions, spec.state_dim))
    us = np.empty((n_transitions, spec.control_dim))
    xnext = np.empty((n_transitions, spec.state_dim))
    count = 0
    restarts = 0
    x = sample_state(spec, rng)
    held_u = None
    hold_left = 0
    while count < n_transitions:
        if hold_left == 0:
            held_u = random_control(spec, rng)
            hold_left = hold
        x_new = None
        for attempt in range(3):
            try:
                x_new = plant_step(
                    spec, params, x, held_u, dt, spec.substeps * 2**attempt, count
                )
                break
            except IntegrationBlowupError:
                continue
        if x_new is None or not in_state_bounds(spec, x_new):
            restarts += 1
            if restarts > max_restarts:
                raise CollectionError(
                    f"{spec.name}: gave up after {restarts} trajectory restarts "
                    f"({count}/{n_transitions} transitions collected)"
                )
            x = sample_state(spec, rng)
            held_u = None
            hold_left = 0
            continue
        xs[count] = x
        us[count] = held_u
        xnext[count] = x_new
        x = x_new
        count += 1
        hold_left -= 1
    return TransitionDataset(spec.name, dict(params), dt, spec.substeps, xs, us, xnext)


# ---------------------------------------------------------------------------
# dataset files


def save_dataset(path, ds: TransitionDataset) -> None:
    doc = {
        "system": ds.system,
        "params": ds.params,
        "dt": ds.dt,
        "substeps": ds.substeps,
        "samples": [
            [list(map(float, x)), list(map(float, u)), list(map(float, xn))]
            for x, u, xn in zip(ds.xs, ds.us, ds.xnext)
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_dataset(path) -> TransitionDataset:
    with open(path) as fh:
        doc = json.load(fh)
    spec = get_system(doc["system"])
    samples = doc["samples"]
    if not samples:
        raise ValueError(f"{path}: dataset holds no samples")
    xs = np.array([s[0] for s in samples], dtype=float)
    us = np.array([s[1] for s in samples], dtype=float)
    xnext = np.array([s[2] for s in samples], dtype=float)
    if xs.shape[1] != spec.state_dim or us.shape[1] != spec.control_dim:
        raise ValueError(
            f"{path}: sample widths {xs.shape[1]}/{us.shape[1]} do not match "
            f"{spec.name} dims {spec.state_dim}/{spec.control_dim}"
        )
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(us)) and np.all(np.isfinite(xnext))):
        raise ValueError(f"{path}: dataset contains non-finite entries")
    return TransitionDataset(
        doc["system"], dict(doc["params"]), float(doc["dt"]), int(doc.get("substeps", 1)),
        xs, us, xnext,
    )
