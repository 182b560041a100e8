"""Learned basis decompositions of parametric vector fields.

A `BasisSet` holds B small networks g_j(x, u) that together span a
function space.  Any member of the family is represented as a coefficient
vector c through the regularized least-squares fit

    (G + lam*I) c = F,
    G[i,j] = mean_l < g_i(x_l,u_l), g_j(x_l,u_l) >,
    F[i]   = mean_l < (x'_l - x_l)/dt, g_i(x_l,u_l) >,

solved by Cholesky factorization.  Inner products use forward-difference
derivative targets; predictions integrate the mixed field with RK4.

Training (`train_basis`) runs the fit itself on the tape so that gradients
reach the basis weights through the coefficients, then measures one-step
prediction error on held-out query transitions.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import autodiff as ad
from . import nn
from .autodiff import Value
from .dynamics import TransitionDataset, get_system, rk4_step


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, dataset_index=None, detail="loss is not finite"):
        self.epoch = epoch
        self.dataset_index = dataset_index
        where = f"epoch {epoch}" + ("" if dataset_index is None else f", dataset {dataset_index}")
        super().__init__(f"basis training diverged at {where}: {detail}")


@dataclass
class BasisSet:
    """B networks sharing one architecture, plus the discretization they
    were trained against."""

    system: str
    nets: list
    dt: float
    substeps: int = 1
    lam: float = 1e-3

    def __post_init__(self):
        shapes = {tuple(w.data.shape for w in net.weights) for net in self.nets}
        if len(shapes) > 1:
            raise ValueError("all basis networks must share one architecture")

    @property
    def size(self) -> int:
        return len(self.nets)

    @property
    def input_dim(self) -> int:
        return self.nets[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.nets[0].out_dim

    def parameters(self) -> list:
        out = []
        for net in self.nets:
            out.extend(net.parameters())
        return out


def init_basis(
    system: str,
    size: int,
    hidden: list[int],
    rng: np.random.Generator,
    dt: float | None = None,
    substeps: int | None = None,
    lam: float = 1e-3,
) -> BasisSet:
    spec = get_system(system)
    sizes = [spec.state_dim + spec.control_dim, *hidden, spec.state_dim]
    nets = [nn.init_mlp(sizes, rng) for _ in range(size)]
    return BasisSet(
        system,
        nets,
        spec.default_dt if dt is None else dt,
        spec.substeps if substeps is None else substeps,
        lam,
    )


@dataclass
class GramSystem:
    g: np.ndarray  # (B, B)
    f: np.ndarray  # (B,)
    lam: float
    m: int


@dataclass
class Coefficients:
    c: np.ndarray
    m: int
    lam: float
    solve_residual: float
    fit_mse: float | None = None
    solve_seconds: float | None = None

    @property
    def size(self) -> int:
        return self.c.shape[0]


def basis_outputs(basis: BasisSet, xs: np.ndarray, us: np.ndarray) -> list[np.ndarray]:
    """Frozen evaluation of every basis network on a transition batch."""
    xu = np.concatenate([np.atleast_2d(xs), np.atleast_2d(us)], axis=1)
    return [net.eval_np(xu) for net in basis.nets]


def compute_gram(
    basis: BasisSet,
    xs: np.ndarray,
    us: np.ndarray,
    xnext: np.ndarray,
    lam: float | None = None,
) -> GramSystem:
    """Assemble the normal equations from transitions, without a tape.

    Derivative targets are forward differences (x' - x)/dt at the basis
    set's own dt.
    """
    lam = basis.lam if lam is None else lam
    m = xs.shape[0]
    outs = basis_outputs(basis, xs, us)
    flat = np.stack([o.reshape(-1) for o in outs])  # (B, m*n)
    g = flat @ flat.T / m
    g = 0.5 * (g + g.T)
    target = ((xnext - xs) / basis.dt).reshape(-1)
    f = flat @ target / m
    return GramSystem(g, f, lam, m)


def solve_coefficients(gs: GramSystem) -> Coefficients:
    a = gs.g + gs.lam * np.eye(gs.g.shape[0])
    try:
        factor = scipy.linalg.cho_factor(a, lower=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        eigs = np.linalg.eigvalsh(a) if np.all(np.isfinite(a)) else None
        detail = (
            f"eigenvalue range [{eigs.min():.3e}, {eigs.max():.3e}]"
            if eigs is not None
            else "non-finite normal equations"
        )
        raise ad.NumericalError(f"coefficient solve failed: {detail}") from exc
    c = scipy.linalg.cho_solve(factor, gs.f)
    residual = float(np.max(np.abs(a @ c - gs.f)))
    return Coefficients(c, gs.m, gs.lam, residual)


def infer_coefficients(
    basis: BasisSet,
    xs: np.ndarray,
    us: np.ndarray,
    xnext: np.ndarray,
    lam: float | None = None,
) -> Coefficients:
    """One-shot system identification from recent transitions.

    Wall-clock time of the whole fit is recorded on the result since this
    is the operation that runs inside the control loop.
    """
    t0 = time.perf_counter()
    gs = compute_gram(basis, xs, us, xnext, lam)
    coeffs = solve_coefficients(gs)
    outs = basis_outputs(basis, xs, us)
    mix = np.tensordot(coeffs.c, np.stack(outs), axes=1)
    target = (xnext - xs) / basis.dt
    coeffs.fit_mse = float(np.mean((mix - target) ** 2))
    coeffs.solve_seconds = time.perf_counter() - t0
    return coeffs


# ---------------------------------------------------------------------------
# surrogate evaluation


def fe_rhs(basis: BasisSet, c, x, u):
    """Mixed vector field sum_j c_j g_j(x, u).

    numpy in, numpy out; Value in, Value out (for differentiable rollouts).
    `c` may be a (B,) array, or on the tape side a (B,) / (1, B) / (m, B)
    Value or array for per-row coefficient batches.
    """
    if isinstance(x, Value) or isinstance(c, Value):
        xu = ad.concat([x, u if isinstance(u, Value) else np.atleast_2d(u)], axis=1)
        outs = [net.forward(xu) for net in basis.nets]
        cmat = c
        if isinstance(c, Value):
            if c.data.ndim == 1:
                cmat = ad.reshape(c, (1, basis.size))
        else:
            cmat = np.atleast_2d(np.asarray(c, dtype=float))
        return ad.weighted_mix(cmat, outs)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    outs = basis_outputs(basis, x, u)
    mix = np.tensordot(np.asarray(c, dtype=float), np.stack(outs), axes=1)
    return mix[0] if single else mix


def fe_step(basis: BasisSet, c, x, u, dt: float | None = None, substeps: int | None = None):
    """RK4 step of the surrogate field, same input conventions as fe_rhs."""
    dt = basis.dt if dt is None else dt
    substeps = basis.substeps if substeps is None else substeps
    return rk4_step(lambda s, a: fe_rhs(basis, c, s, a), x, u, dt, substeps)


def rollout_prediction(basis: BasisSet, c, x0: np.ndarray, us: np.ndarray) -> np.ndarray:
    """Open-loop prediction through a control sequence; returns (K+1, n)."""
    out = np.empty((us.shape[0] + 1, x0.shape[0]))
    out[0] = x0
    for k in range(us.shape[0]):
        out[k + 1] = fe_step(basis, c, out[k], us[k])
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class FeTrainConfig:
    lr: float = 1e-3
    epochs: int = 500
    support: int = 100
    batch: int = 128
    lam: float | None = None  # None uses the basis set's lam
    target_loss: float | None = None


def _tape_coefficients(basis: BasisSet, xs, us, targets, lam: float) -> Value:
    """Least-squares coefficients as a tape node, so d(c)/d(theta) exists."""
    xu = np.concatenate([xs, us], axis=1)
    outs = [net.forward(Value(xu)) for net in basis.nets]
    g = ad.gram_matrix(outs)
    f = ad.gram_vector(outs, targets)
    a = ad.add(g, lam * np.eye(basis.size))
    return ad.solve_spd(a, f)


def training_loss(basis: BasisSet, ds: TransitionDataset, support_idx, query_idx,
                  lam: float) -> Value:
    """One loss term: fit c on the support split, measure one-step
    squared prediction error on the query split (mean over queries)."""
    targets = (ds.xnext[support_idx] - ds.xs[support_idx]) / basis.dt
    c = _tape_coefficients(basis, ds.xs[support_idx], ds.us[support_idx], targets, lam)
    x_pred = fe_step(basis, c, Value(ds.xs[query_idx]), ds.us[query_idx])
    err = ad.sub(x_pred, ds.xnext[query_idx])
    return ad.mul(ad.vsum(ad.square(err)), 1.0 / len(query_idx))


def train_basis(
    basis: BasisSet,
    datasets: list[TransitionDataset],
    cfg: FeTrainConfig,
    rng: np.random.Generator,
) -> list[float]:
    """Joint training of all basis networks over a family of datasets.

    Per dataset and epoch: draw a support/query split, refit coefficients
    on the support inside the tape, take one Adam step on every theta from
    the query prediction error.  Returns the per-epoch mean loss history.
    """
    lam = basis.lam if cfg.lam is None else cfg.lam
    for i, ds in enumerate(datasets):
        if ds.system != basis.system:
            raise ValueError(f"dataset {i} is for {ds.system!r}, basis is {basis.system!r}")
        if len(ds) <= cfg.support:
            raise ValueError(
                f"dataset {i} has {len(ds)} transitions; need more than "
                f"support={cfg.support} to form a query split"
            )
    opt = nn.Adam(basis.parameters(), lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for i, ds in enumerate(datasets):
            perm = rng.permutation(len(ds))
            support_idx = perm[: cfg.support]
            query_idx = perm[cfg.support : cfg.support + cfg.batch]
            loss = training_loss(basis, ds, support_idx, query_idx, lam)
            val = float(loss.data)
            if not np.isfinite(val):
                raise TrainingDivergedError(epoch, i)
            ad.backward(loss)
            opt.step()
            epoch_losses.append(val)
        history.append(float(np.mean(epoch_losses)))
        if cfg.target_loss is not None and history[-1] < cfg.target_loss:
            break
    return history


# ---------------------------------------------------------------------------
# checkpoint files


def save_basis(path, basis: BasisSet) -> None:
    doc = {
        "format_version": nn.CHECKPOINT_VERSION,
        "kind": "basis_set",
        "system": basis.system,
        "size": basis.size,
        "dt": basis.dt,
        "substeps": basis.substeps,
        "lambda": basis.lam,
        "nets": [nn.mlp_to_dict(net) for net in basis.nets],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_basis(path) -> BasisSet:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != nn.CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    if doc.get("kind") != "basis_set":
        raise ValueError(f"{path} is not a basis checkpoint")
    nets = [nn.mlp_from_dict(d) for d in doc["nets"]]
    return BasisSet(doc["system"], nets, float(doc["dt"]), int(doc["substeps"]), float(doc["lambda"]))
