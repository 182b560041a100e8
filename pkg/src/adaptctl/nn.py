"""Multilayer perceptrons and Adam on top of the autodiff tape.

Parameters are persistent `Value` leaves owned by an `Mlp`; each loss
evaluation builds a throwaway graph referencing them, and the optimizer
reads the accumulated `.grad` fields after `backward`.

Checkpoints are single JSON documents.  Weight arrays are serialized as
base64 of their raw little-endian float64 bytes in row-major order, which
makes save/load round trips bit-exact.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value

CHECKPOINT_VERSION = 1

_ACTIVATIONS = {
    "tanh": ad.tanh,
    "relu": ad.relu,
    "identity": lambda v: v,
}

_ACTIVATIONS_NP = {
    "tanh": np.tanh,
    "relu": lambda x: np.maximum(x, 0.0),
    "identity": lambda x: x,
}


@dataclass
class Mlp:
    """A fully connected network with per-layer activations.

    weights[i] has shape (out_i, in_i) and layers chain, so
    weights[i+1].shape[1] == weights[i].shape[0].  The final activation is
    identity so outputs are unbounded.
    """

    weights: list = field(default_factory=list)  # list[Value], each (out, in)
    biases: list = field(default_factory=list)  # list[Value], each (out,)
    activations: list = field(default_factory=list)  # list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ad.DimensionError("mlp: weights, biases, activations must align")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.data.ndim != 2 or b.data.ndim != 1 or w.data.shape[0] != b.data.shape[0]:
                raise ad.DimensionError(f"mlp layer {i}: weight/bias shapes inconsistent")
            if i > 0 and w.data.shape[1] != self.weights[i - 1].data.shape[0]:
                raise ad.DimensionError(
                    f"mlp layer {i}: in-dim {w.data.shape[1]} does not match "
                    f"previous out-dim {self.weights[i - 1].data.shape[0]}"
                )
            if act not in _ACTIVATIONS:
                raise ValueError(f"mlp layer {i}: unknown activation {act!r}")
        if self.activations and self.activations[-1] != "identity":
            raise ValueError("mlp: final layer activation must be identity")

    @property
    def in_dim(self) -> int:
        return self.weights[0].data.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].data.shape[0]

    def parameters(self) -> list:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.append(w)
            params.append(b)
        return params

    def forward(self, x: Value) -> Value:
        """Tape forward pass; x is (in,) or (batch, in)."""
        h = x
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if h.data.shape[-1] != w.data.shape[1]:
                raise ad.DimensionError(
                    f"mlp layer {i}: input width {h.data.shape[-1]} does not match "
                    f"expected {w.data.shape[1]}"
                )
            h = ad.linear(h, w, b)
            h = _ACTIVATIONS[act](h)
        return h

    def eval_np(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass, no tape.  Used on frozen networks."""
        h = np.asarray(x, dtype=np.float64)
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if h.shape[-1] != w.data.shape[1]:
                raise ad.DimensionError(
                    f"mlp layer {i}: input width {h.shape[-1]} does not match "
                    f"expected {w.data.shape[1]}"
                )
            h = h @ w.data.T + b.data
            h = _ACTIVATIONS_NP[act](h)
        return h


def init_mlp(sizes, rng: np.random.Generator, hidden_activation: str = "tanh") -> Mlp:
    """Build an Mlp with uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights
    and zero biases.  `sizes` is [in, hidden..., out]."""
    if len(sizes) < 2:
        raise ValueError("init_mlp needs at least an input and an output size")
    weights, biases, acts = [], [], []
    for i in range(len(sizes) - 1):
        fan_in = sizes[i]
        bound = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(sizes[i + 1], sizes[i]))
        weights.append(Value(w))
        biases.append(Value(np.zeros(sizes[i + 1])))
        acts.append(hidden_activation if i < len(sizes) - 2 else "identity")
    return Mlp(weights, biases, acts)


def forward_mlp(mlp: Mlp, x) -> Value:
    """Functional wrapper around Mlp.forward, accepting Value or ndarray."""
    if not isinstance(x, Value):
        x = Value(x)
    return mlp.forward(x)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied to `params` in place.

    `params` may be raw ndarrays or Values (updated through `.data`).
    Returns (params, state) so the call reads functionally.
    """
    arrays = [p.data if isinstance(p, Value) else p for p in params]
    if not state.m:
        state.m = [np.zeros_like(a) for a in arrays]
        state.v = [np.zeros_like(a) for a in arrays]
    if len(grads) != len(arrays):
        raise ValueError(f"adam_step: {len(arrays)} params but {len(grads)} grads")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        a -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


class Adam:
    """Convenience wrapper that owns a parameter list of Values."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        grads = [ad.grad_of(p) for p in self.params]
        adam_step(self.params, grads, self.state)
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# serialization


def _encode_array(a: np.ndarray) -> dict:
    arr = np.ascontiguousarray(a, dtype="<f8")
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode_array(blob: dict) -> np.ndarray:
    raw = base64.b64decode(blob["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(blob["shape"]).astype(np.float64)


def mlp_to_dict(mlp: Mlp) -> dict:
    return {
        "sizes": [mlp.in_dim] + [w.data.shape[0] for w in mlp.weights],
        "activations": list(mlp.activations),
        "layers": [
            {"w": _encode_array(w.data), "b": _encode_array(b.data)}
            for w, b in zip(mlp.weights, mlp.biases)
        ],
    }


def mlp_from_dict(doc: dict) -> Mlp:
    weights = [Value(_decode_array(layer["w"])) for layer in doc["layers"]]
    biases = [Value(_decode_array(layer["b"])) for layer in doc["layers"]]
    return Mlp(weights, biases, list(doc["activations"]))


def save_mlp(path, mlp: Mlp, extra: dict | None = None) -> None:
    doc = {"format_version": CHECKPOINT_VERSION, "model": mlp_to_dict(mlp)}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_mlp(path) -> Mlp:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    return mlp_from_dict(doc["model"])


def params_digest(mlps) -> str:
    """SHA-256 over the raw bytes of every weight array, in order.

    Used to assert that closed-loop evaluation never mutates trained
    parameters.
    """
    h = hashlib.sha256()
    for mlp in mlps:
        for p in mlp.parameters():
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()
