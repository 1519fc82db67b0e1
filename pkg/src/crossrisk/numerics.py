"""Dense float64 primitives shared by every other module.

Stable softmax, class-balanced cross-entropy, SGD-with-momentum and Adam
updates, labeled random streams, and a central-difference gradient oracle
used to cross-check every analytic gradient in the package.

All matrices are 2-d float64 numpy arrays in row-major order; public
operations reject non-finite values at their boundaries.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

STREAM_LABELS = ("init", "mask", "flip", "search", "data")


class NonFiniteError(ValueError):
    """A value that must be finite contains NaN or Inf."""


def require_finite(name: str, arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


def labeled_rng(seed: int, label: str, *key: int) -> np.random.Generator:
    """Independent reproducible stream for (seed, label, *key).

    Streams with distinct labels or key components never overlap, and the
    same triple yields the same draw sequence on every platform.
    """
    if label not in STREAM_LABELS:
        raise ValueError(f"unknown stream label {label!r}; expected one of {STREAM_LABELS}")
    ss = np.random.SeedSequence(
        entropy=int(seed), spawn_key=(STREAM_LABELS.index(label), *(int(k) for k in key))
    )
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, label: str, *key: int) -> int:
    """Fan a master seed out into a child seed for an independent sub-run."""
    return int(labeled_rng(seed, label, *key).integers(0, 2**63 - 1))


def softmax(logits) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    z = require_finite("logits", logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = require_finite("logits", logits)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def balanced_class_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-example weights 1/(count of that example's class).

    With these weights, sum(w_i * ce_i) equals the sum over classes of the
    per-class mean cross-entropy. Classes with no examples are skipped with
    a warning rather than erroring: label flipping can transiently empty a
    class and training must survive that.
    """
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        warnings.warn(
            f"classes {missing.tolist()} have no examples and are skipped "
            "in the balanced loss",
            RuntimeWarning,
            stacklevel=2,
        )
    return 1.0 / counts[labels].astype(np.float64)


def cross_entropy(logits, labels, weights=None) -> float:
    """Weighted sum of per-example cross-entropies (mean when weights=None)."""
    labels = np.asarray(labels)
    nll = -log_softmax(logits)[np.arange(len(labels)), labels]
    if weights is None:
        return float(nll.mean())
    return float(np.dot(np.asarray(weights, dtype=np.float64), nll))


def balanced_cross_entropy(logits, labels, n_classes: int | None = None) -> float:
    """Sum over classes of the mean cross-entropy of that class's examples.

    Balancing is with respect to the labels passed in, so callers training
    against moving targets get the weighting recomputed every step.
    """
    labels = np.asarray(labels)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    w = balanced_class_weights(labels, n_classes)
    return cross_entropy(logits, labels, w)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

OPTIMIZER_KINDS = ("sgd", "adam")


@dataclass
class OptimizerState:
    """State for SGD-with-momentum or Adam over a list of parameter blocks.

    Moment buffers are allocated lazily on the first step and shape-checked
    afterwards. Weight decay enters the raw gradient (classic L2) for both
    kinds.
    """

    kind: str
    lr: float
    weight_decay: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    velocity: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"optimizer kind must be one of {OPTIMIZER_KINDS}, got {self.kind!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")


def optimizer_step(state: OptimizerState, params: list, grads: list) -> list:
    """One deterministic update; returns new parameter arrays.

    SGD: v <- mu*v + g + wd*theta; theta <- theta - lr*v.
    Adam: bias-corrected first/second moments on g + wd*theta.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads must have the same number of blocks")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"block {i}: param shape {p.shape} != grad shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter block {i}")

    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
        if state.kind == "adam":
            state.second_moment = [np.zeros_like(p) for p in params]

    state.step_count += 1
    out = []
    if state.kind == "sgd":
        for i, (p, g) in enumerate(zip(params, grads)):
            g = g + state.weight_decay * p
            state.velocity[i] = state.momentum * state.velocity[i] + g
            out.append(p - state.lr * state.velocity[i])
    else:
        t = state.step_count
        for i, (p, g) in enumerate(zip(params, grads)):
            g = g + state.weight_decay * p
            state.velocity[i] = state.beta1 * state.velocity[i] + (1 - state.beta1) * g
            state.second_moment[i] = state.beta2 * state.second_moment[i] + (1 - state.beta2) * g**2
            m_hat = state.velocity[i] / (1 - state.beta1**t)
            v_hat = state.second_moment[i] / (1 - state.beta2**t)
            out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------


def finite_difference_gradient(loss_fn, params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate, one coordinate at a time.

    Independent of any backpropagation code path on purpose; it is the
    oracle the analytic gradients are checked against.
    """
    theta = np.asarray(params, dtype=np.float64).copy()
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        orig = theta.flat[i]
        theta.flat[i] = orig + h
        up = loss_fn(theta)
        theta.flat[i] = orig - h
        down = loss_fn(theta)
        theta.flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"loss non-finite while probing coordinate {i}")
        grad.flat[i] = (up - down) / (2.0 * h)
    return grad
