"""Linear and three-layer ReLU MLP classifiers with analytic backprop.

Parameters are plain per-layer (weight, bias) arrays. Forward/backward are
deterministic functions of (params, data); training code owns its copies.
Temperature folding rescales the final affine layer so that calibrated
logits survive without a separate temperature at inference time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .numerics import log_softmax, one_hot, require_finite, softmax

COLORMNIST_INPUT_DIM = 2 * 14 * 14


@dataclass(frozen=True)
class ModelSpec:
    architecture: str  # "linear" or "mlp"
    input_dim: int
    hidden_dims: tuple[int, ...]
    n_classes: int

    def __post_init__(self):
        if self.architecture not in ("linear", "mlp"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.architecture == "linear" and self.hidden_dims:
            raise ValueError("linear models take no hidden dims")
        if self.architecture == "mlp" and not self.hidden_dims:
            raise ValueError("mlp needs at least one hidden dim")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be positive")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.n_classes]


def colormnist_mlp_spec() -> ModelSpec:
    """The [2*14*14, 300, 300, 2] ReLU network used for the color-digit runs."""
    return ModelSpec("mlp", COLORMNIST_INPUT_DIM, (300, 300), 2)


@dataclass
class ModelParams:
    """Per-layer weight matrices (out x in) and bias vectors."""

    weights: list
    biases: list

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def blocks(self) -> list:
        """Interleaved [W0, b0, W1, b1, ...] view for the optimizer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @staticmethod
    def from_blocks(blocks: list) -> "ModelParams":
        return ModelParams(list(blocks[0::2]), list(blocks[1::2]))

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.blocks()])

    @staticmethod
    def from_flat(spec: ModelSpec, flat: np.ndarray) -> "ModelParams":
        dims = spec.layer_dims()
        weights, biases, pos = [], [], 0
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            weights.append(flat[pos : pos + d_out * d_in].reshape(d_out, d_in).copy())
            pos += d_out * d_in
            biases.append(flat[pos : pos + d_out].copy())
            pos += d_out
        if pos != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, spec needs {pos}")
        return ModelParams(weights, biases)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    """Fan-in-scaled uniform weights, zero biases; deterministic per stream."""
    weights, biases = [], []
    dims = spec.layer_dims()
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(d_in)
        weights.append(rng.uniform(-bound, bound, size=(d_out, d_in)))
        biases.append(np.zeros(d_out))
    return ModelParams(weights, biases)


def forward(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Logits for a batch; ReLU between all layers but the last."""
    return _forward_cached(params, X)[0]


def _forward_cached(params: ModelParams, X: np.ndarray):
    """Forward pass keeping each layer's input for the backward pass."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.weights[0].shape[1]:
        raise ValueError(
            f"input of shape {X.shape} does not match input_dim {params.weights[0].shape[1]}"
        )
    acts = [X]
    h = X
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
            acts.append(h)
    return h, acts


def _backprop(params: ModelParams, acts: list, dlogits: np.ndarray) -> ModelParams:
    """Gradients of a scalar loss given d(loss)/d(logits)."""
    gw = [None] * params.n_layers
    gb = [None] * params.n_layers
    g = dlogits
    for i in range(params.n_layers - 1, -1, -1):
        gw[i] = g.T @ acts[i]
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ params.weights[i]) * (acts[i] > 0)
    return ModelParams(gw, gb)


def weighted_ce_grads(params: ModelParams, X, labels, weights):
    """(loss, gradients) of sum_i w_i * cross_entropy_i in one pass."""
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    logits, acts = _forward_cached(params, X)
    nll = -log_softmax(logits)[np.arange(len(labels)), labels]
    loss = float(np.dot(weights, nll))
    dlogits = (softmax(logits) - one_hot(labels, logits.shape[1])) * weights[:, None]
    return loss, _backprop(params, acts, dlogits)


def backward(params: ModelParams, X, labels, weights) -> ModelParams:
    """Exact gradient of the weighted cross-entropy via backpropagation."""
    return weighted_ce_grads(params, X, labels, weights)[1]


def fold_temperature(params: ModelParams, temps, fold_bias: bool = True) -> ModelParams:
    """Divide the final layer by per-class temperatures.

    Dividing logits by t_c means scaling the whole affine map, so the bias
    is divided too by default; fold_bias=False reproduces the weights-only
    variant for comparison.
    """
    temps = require_finite("temps", temps).reshape(-1)
    if temps.shape[0] != params.weights[-1].shape[0]:
        raise ValueError("one temperature per class required")
    if np.any(temps <= 0):
        raise ValueError("temperatures must be positive")
    out = params.copy()
    out.weights[-1] /= temps[:, None]
    if fold_bias:
        out.biases[-1] /= temps
    return out


def predict(params: ModelParams, X) -> np.ndarray:
    """Row-wise argmax of the logits; ties break toward the smallest class."""
    return np.argmax(forward(params, X), axis=1)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------
#
# Layout (npz, version 1):
#   format_version : scalar int
#   spec           : json string {architecture, input_dim, hidden_dims, n_classes}
#   params         : flat float64 vector, per layer W (row-major) then b
# The round trip is bit-exact.

CHECKPOINT_VERSION = 1


def save_checkpoint(path, spec: ModelSpec, params: ModelParams) -> None:
    np.savez(
        path,
        format_version=np.int64(CHECKPOINT_VERSION),
        spec=json.dumps(
            {
                "architecture": spec.architecture,
                "input_dim": spec.input_dim,
                "hidden_dims": list(spec.hidden_dims),
                "n_classes": spec.n_classes,
            }
        ),
        params=params.flatten(),
    )


def load_checkpoint(path) -> tuple[ModelSpec, ModelParams]:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(str(z["spec"]))
        spec = ModelSpec(
            meta["architecture"], meta["input_dim"], tuple(meta["hidden_dims"]), meta["n_classes"]
        )
        return spec, ModelParams.from_flat(spec, z["params"])
