"""Group-aware downstream training: ERM, GroupDRO, RWG, SUBG.

All four share one minibatch loop differing only in per-example weights;
GroupDRO additionally keeps an exponentiated-gradient distribution over
groups on the probability simplex. Evaluation metrics and checkpoint
selection live here too.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .config import HyperParams
from .datasets import GroupDataset, GroupIndex
from .models import ModelParams, ModelSpec, _backprop, _forward_cached, init_params, predict
from .numerics import (
    labeled_rng,
    log_softmax,
    one_hot,
    optimizer_step,
    softmax,
    OptimizerState,
)


@dataclass
class Checkpoint:
    iteration: int
    params: ModelParams
    val_metric: float | None = None


def _batch_indices(rng, n, batch_size):
    if batch_size is None or batch_size >= n:
        return np.arange(n)
    return rng.choice(n, size=batch_size, replace=False)


def _record(checkpoints, it, params):
    checkpoints.append(Checkpoint(iteration=it, params=params.copy()))


def _step(opt, params, acts, dlogits):
    grads = _backprop(params, acts, dlogits)
    return ModelParams.from_blocks(optimizer_step(opt, params.blocks(), grads.blocks()))


def erm_train(dataset: GroupDataset, spec: ModelSpec, hp: HyperParams, seed: int,
              iters: int, eval_every: int = 50,
              example_weights: np.ndarray | None = None) -> list:
    """Minibatch cross-entropy minimization; snapshots every eval_every steps.

    example_weights (fixed, mean 1) turn this into the reweighted variant
    that RWG builds on.
    """
    X, y = dataset.X, dataset.y
    n, nc = len(y), dataset.n_classes
    params = init_params(spec, labeled_rng(seed, "init"))
    rng = labeled_rng(seed, "data", 0)
    opt = OptimizerState(hp.optimizer, lr=hp.lr, weight_decay=hp.weight_decay, momentum=0.9)
    checkpoints = []
    for it in range(1, iters + 1):
        idx = _batch_indices(rng, n, hp.batch_size)
        logits, acts = _forward_cached(params, X[idx])
        w = np.full(len(idx), 1.0 / len(idx))
        if example_weights is not None:
            w = w * example_weights[idx]
        nll = -log_softmax(logits)[np.arange(len(idx)), y[idx]]
        loss = float(np.dot(w, nll))
        if not np.isfinite(loss):
            raise RuntimeError(f"training loss became non-finite at iteration {it}")
        dlogits = (softmax(logits) - one_hot(y[idx], nc)) * w[:, None]
        params = _step(opt, params, acts, dlogits)
        if it % eval_every == 0 or it == iters:
            _record(checkpoints, it, params)
    return checkpoints


def rwg_train(dataset: GroupDataset, groups: GroupIndex, spec: ModelSpec, hp: HyperParams,
              seed: int, iters: int, eval_every: int = 50) -> list:
    """ERM with each example weighted by 1/(its group size), mean-normalized."""
    w = reweighting_weights(groups)
    return erm_train(dataset, spec, hp, seed, iters, eval_every, example_weights=w)


def reweighting_weights(groups: GroupIndex) -> np.ndarray:
    """Inverse-group-size weights normalized to mean 1."""
    sizes = groups.sizes[groups.group_ids].astype(np.float64)
    w = 1.0 / sizes
    return w / w.mean()


def subsample_to_smallest(groups: GroupIndex, rng: np.random.Generator) -> np.ndarray:
    """Indices keeping min-group-size examples of every nonempty group."""
    nonempty = np.flatnonzero(groups.sizes > 0)
    target = int(groups.sizes[nonempty].min())
    keep = []
    for g in nonempty:
        members = np.flatnonzero(groups.group_ids == g)
        keep.append(rng.choice(members, size=target, replace=False))
    return np.sort(np.concatenate(keep))


def subg_train(dataset: GroupDataset, groups: GroupIndex, spec: ModelSpec, hp: HyperParams,
               seed: int, iters: int, eval_every: int = 50) -> list:
    """Subsample every group to the smallest once, then plain ERM."""
    if np.all(groups.sizes == 0):
        raise ValueError("no nonempty groups to subsample")
    keep = subsample_to_smallest(groups, labeled_rng(seed, "data", 1))
    return erm_train(dataset.subset(keep), spec, hp, seed, iters, eval_every)


def groupdro_train(dataset: GroupDataset, groups: GroupIndex, spec: ModelSpec, hp: HyperParams,
                   seed: int, iters: int, eval_every: int = 50) -> list:
    """Exponentiated-gradient reweighting of per-group batch losses.

    q starts uniform over nonempty groups, gets q_g *= exp(eta * loss_g) for
    groups present in the batch, is renormalized, and the step descends the
    q-weighted loss. q never leaves the probability simplex.
    """
    if hp.eta is None or hp.eta <= 0:
        raise ValueError("groupdro needs eta > 0")
    X, y = dataset.X, dataset.y
    n, nc = len(y), dataset.n_classes
    gids = groups.group_ids
    if np.any(groups.sizes == 0):
        warnings.warn(
            f"dropping empty groups {groups.empty_groups.tolist()}", RuntimeWarning
        )
    nonempty = groups.sizes > 0
    q = np.where(nonempty, 1.0, 0.0)
    q /= q.sum()

    params = init_params(spec, labeled_rng(seed, "init"))
    rng = labeled_rng(seed, "data", 0)
    opt = OptimizerState(hp.optimizer, lr=hp.lr, weight_decay=hp.weight_decay, momentum=0.9)
    checkpoints = []
    for it in range(1, iters + 1):
        idx = _batch_indices(rng, n, hp.batch_size)
        g = gids[idx]
        logits, acts = _forward_cached(params, X[idx])
        nll = -log_softmax(logits)[np.arange(len(idx)), y[idx]]
        if not np.all(np.isfinite(nll)):
            raise RuntimeError(f"training loss became non-finite at iteration {it}")
        counts = np.bincount(g, minlength=groups.n_groups)
        group_loss = np.bincount(g, weights=nll, minlength=groups.n_groups)
        present = counts > 0
        group_loss[present] /= counts[present]
        # groups absent from the batch keep their weight this step
        q = q * np.where(present, np.exp(hp.eta * group_loss), 1.0)
        q /= q.sum()
        w = q[g] / counts[g]
        dlogits = (softmax(logits) - one_hot(y[idx], nc)) * w[:, None]
        params = _step(opt, params, acts, dlogits)
        if it % eval_every == 0 or it == iters:
            _record(checkpoints, it, params)
    return checkpoints


TRAINERS = {
    "erm": erm_train,
    "groupdro": groupdro_train,
    "rwg": rwg_train,
    "subg": subg_train,
}


def train(algorithm: str, dataset, groups, spec, hp, seed, iters, eval_every=50) -> list:
    if algorithm not in TRAINERS:
        raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {sorted(TRAINERS)}")
    if algorithm == "erm":
        return erm_train(dataset, spec, hp, seed, iters, eval_every)
    return TRAINERS[algorithm](dataset, groups, spec, hp, seed, iters, eval_every)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def worst_group_accuracy(preds, labels, group_ids, n_groups: int | None = None):
    """(min per-group accuracy, per-group accuracies with NaN for empty)."""
    preds, labels, group_ids = map(np.asarray, (preds, labels, group_ids))
    if n_groups is None:
        n_groups = int(group_ids.max()) + 1
    correct = (preds == labels).astype(np.float64)
    totals = np.bincount(group_ids, minlength=n_groups).astype(np.float64)
    hits = np.bincount(group_ids, weights=correct, minlength=n_groups)
    if np.all(totals == 0):
        raise ValueError("all groups are empty")
    accs = np.full(n_groups, np.nan)
    nonempty = totals > 0
    accs[nonempty] = hits[nonempty] / totals[nonempty]
    if np.any(~nonempty):
        warnings.warn(
            f"groups {np.flatnonzero(~nonempty).tolist()} are empty and excluded",
            RuntimeWarning,
        )
    return float(np.nanmin(accs)), accs


def worst_class_accuracy(preds, labels, n_classes: int | None = None):
    """Same as worst-group with classes standing in for groups."""
    labels = np.asarray(labels)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    return worst_group_accuracy(preds, labels, labels, n_groups=n_classes)


def average_accuracy(preds, labels) -> float:
    return float(np.mean(np.asarray(preds) == np.asarray(labels)))


def select_checkpoint(
    checkpoints: list,
    criterion: str,
    val_dataset: GroupDataset,
    val_group_ids: np.ndarray | None = None,
    n_groups: int | None = None,
) -> Checkpoint:
    """Argmax of the validation criterion; ties go to the earliest iteration.

    criterion 'worst-group' needs val_group_ids; 'worst-class' uses labels
    only. Fills val_metric on every checkpoint as a side effect.
    """
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    if criterion not in ("worst-group", "worst-class"):
        raise ValueError("criterion must be 'worst-group' or 'worst-class'")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # empty val groups are fine here
        for ckpt in checkpoints:
            preds = predict(ckpt.params, val_dataset.X)
            if criterion == "worst-group":
                ckpt.val_metric, _ = worst_group_accuracy(
                    preds, val_dataset.y, val_group_ids, n_groups
                )
            else:
                ckpt.val_metric, _ = worst_class_accuracy(
                    preds, val_dataset.y, val_dataset.n_classes
                )
    metrics = np.array([c.val_metric for c in checkpoints])
    return checkpoints[int(np.argmax(metrics))]
