"""Phase-1 environment discovery via cross-risk minimization.

Two twin predictors each train on one random half of the data, imitating
confident held-out mistakes of their sibling through probabilistic label
flips. The flip count drives model selection, and a cross-mistake rule
turns the selected twins into binary environment annotations for both
training and validation examples.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import HyperParams
from .models import (
    ModelParams,
    ModelSpec,
    _backprop,
    _forward_cached,
    fold_temperature,
    forward,
    init_params,
)
from .numerics import (
    NonFiniteError,
    OptimizerState,
    balanced_class_weights,
    cross_entropy,
    labeled_rng,
    one_hot,
    optimizer_step,
    softmax,
)


class XrmDivergenceError(RuntimeError):
    pass


class CalibrationError(RuntimeError):
    pass


@dataclass
class TwinState:
    """Everything one twin run accumulates.

    mask_a marks examples held-in by twin a; twin b holds in the complement.
    y_current carries the moving targets, y_original the untouched labels.
    flip_trajectory[k] is the flip fraction after iteration k (entry 0 is
    the pre-training value, always 0).
    """

    spec: ModelSpec
    params_a: ModelParams
    params_b: ModelParams
    mask_a: np.ndarray
    temps_a: np.ndarray
    temps_b: np.ndarray
    y_original: np.ndarray
    y_current: np.ndarray
    flip_trajectory: np.ndarray
    heldin_class_accuracy: np.ndarray = None
    diagnostics: dict = field(default_factory=dict)


@dataclass
class DiscoveredEnvironments:
    train_env: np.ndarray
    val_env: np.ndarray


def assign_holdout(labels: np.ndarray, n_classes: int, rng: np.random.Generator,
                   max_resamples: int = 100) -> np.ndarray:
    """Fair iid coin per example; 1 means held-in by twin a.

    Resamples (up to max_resamples) until both twins hold in at least one
    example of every class, so the balanced loss is defined for both.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2:
        raise ValueError("need at least two examples to split")
    for _ in range(max_resamples):
        mask = (rng.random(n) < 0.5).astype(np.int64)
        ok = True
        for c in range(n_classes):
            cls = labels == c
            if not (np.any(mask[cls] == 1) and np.any(mask[cls] == 0)):
                ok = False
                break
        if ok:
            return mask
    raise RuntimeError(
        f"could not split {n} examples so both twins hold in every class "
        f"after {max_resamples} draws"
    )


def flip_probability(p_out_max, n_classes: int):
    """Probability of adopting the held-out prediction as the new label.

    Zero at chance-level confidence 1/n_classes, one at full confidence;
    clamped to [0, 1] to absorb float slop.
    """
    p = np.asarray(p_out_max, dtype=np.float64)
    q = (p - 1.0 / n_classes) * n_classes / (n_classes - 1)
    return np.clip(q, 0.0, 1.0)


def calibrate_temperatures(
    logits_a: np.ndarray,
    logits_b: np.ndarray,
    mask_a: np.ndarray,
    labels: np.ndarray,
    lr: float = 1e-2,
    iters: int = 1000,
):
    """Fit per-class temperatures by gradient descent on the balanced CE.

    Each example is scored by the twin holding it in; logits stay frozen and
    only the temperatures move, starting from 1.
    """
    n_classes = logits_a.shape[1]
    in_a = np.asarray(mask_a).astype(bool)
    w = balanced_class_weights(labels, n_classes)
    y1h = one_hot(labels, n_classes)
    t_a = np.ones(n_classes)
    t_b = np.ones(n_classes)

    def combined(ta, tb):
        return np.where(in_a[:, None], logits_a / ta, logits_b / tb)

    initial_loss = cross_entropy(combined(t_a, t_b), labels, w)
    loss = initial_loss
    for _ in range(iters):
        z = combined(t_a, t_b)
        g_z = (softmax(z) - y1h) * w[:, None]
        # dL/dt_c = sum_i g_z[i,c] * (-logits[i,c] / t_c^2) over the owning twin
        g_ta = -(g_z[in_a] * logits_a[in_a]).sum(axis=0) / t_a**2
        g_tb = -(g_z[~in_a] * logits_b[~in_a]).sum(axis=0) / t_b**2
        t_a = t_a - lr * g_ta
        t_b = t_b - lr * g_tb
        if np.any(t_a <= 0) or np.any(t_b <= 0) or not (
            np.all(np.isfinite(t_a)) and np.all(np.isfinite(t_b))
        ):
            raise CalibrationError(
                "temperature fit diverged; try a smaller calibration-lr"
            )
        loss = cross_entropy(combined(t_a, t_b), labels, w)
        if not np.isfinite(loss):
            raise CalibrationError(
                "calibration loss became non-finite; try a smaller calibration-lr"
            )
    return t_a, t_b, initial_loss, loss


def calibrate(
    params_a: ModelParams,
    params_b: ModelParams,
    X: np.ndarray,
    labels: np.ndarray,
    mask_a: np.ndarray,
    lr: float = 1e-2,
    iters: int = 1000,
    fold_bias: bool = True,
):
    """Fit temperatures on frozen held-in logits and fold them into the nets."""
    t_a, t_b, loss0, loss1 = calibrate_temperatures(
        forward(params_a, X), forward(params_b, X), mask_a, labels, lr=lr, iters=iters
    )
    folded_a = fold_temperature(params_a, t_a, fold_bias=fold_bias)
    folded_b = fold_temperature(params_b, t_b, fold_bias=fold_bias)
    return folded_a, folded_b, t_a, t_b, loss0, loss1


def count_flips(state: TwinState) -> float:
    """Fraction of labels currently differing from the originals."""
    return float(np.mean(state.y_current != state.y_original))


def cross_mistake(logits_a: np.ndarray, logits_b: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """env = 1 iff either twin misclassifies the example.

    Argmax ties break toward the smallest class index, matching predict().
    """
    labels = np.asarray(labels)
    pred_a = np.argmax(logits_a, axis=1)
    pred_b = np.argmax(logits_b, axis=1)
    return ((pred_a != labels) | (pred_b != labels)).astype(np.int64)


def cross_mistake_params(params_a, params_b, X, labels) -> np.ndarray:
    return cross_mistake(forward(params_a, X), forward(params_b, X), labels)


def xrm_train(
    dataset,
    spec: ModelSpec,
    hp: HyperParams,
    seed: int,
    iters: int,
    calibration_lr: float = 1e-2,
    calibration_iters: int = 1000,
    batch_size: int | None = None,
) -> TwinState:
    """Run one twin-training trial to its fixed iteration budget.

    Per iteration: one optimizer step on the class-balanced held-in
    cross-entropy against the moving targets, then label flips sampled from
    the pre-step held-out softmax. Full batch unless batch_size is given, in
    which case only the current batch is scored and flipped.
    """
    X, y = dataset.X, dataset.y
    n, n_classes = len(y), dataset.n_classes
    for c in range(n_classes):
        if np.sum(y == c) < 2:
            raise ValueError(f"class {c} has fewer than 2 examples")

    mask_a = assign_holdout(y, n_classes, labeled_rng(seed, "mask"))
    in_a = mask_a.astype(bool)
    params_a = init_params(spec, labeled_rng(seed, "init", 0))
    params_b = init_params(spec, labeled_rng(seed, "init", 1))
    params_a, params_b, t_a, t_b, cal0, cal1 = calibrate(
        params_a, params_b, X, y, mask_a, lr=calibration_lr, iters=calibration_iters
    )

    rng_flip = labeled_rng(seed, "flip")
    rng_batch = labeled_rng(seed, "data")
    opt = OptimizerState(
        hp.optimizer, lr=hp.lr, weight_decay=hp.weight_decay, momentum=0.9
    )
    y_original = y.copy()
    y_current = y.copy()
    trajectory = np.zeros(iters + 1)
    losses = np.zeros(iters)

    for it in range(iters):
        if batch_size is None or batch_size >= n:
            rows = slice(None)
            row_in_a = in_a
        else:
            rows = rng_batch.choice(n, size=batch_size, replace=False)
            row_in_a = in_a[rows]
        Xb, yb = X[rows], y_current[rows]

        logits_a, acts_a = _forward_cached(params_a, Xb)
        logits_b, acts_b = _forward_cached(params_b, Xb)
        w = balanced_class_weights(yb, n_classes)

        logits_in = np.where(row_in_a[:, None], logits_a, logits_b)
        loss = cross_entropy(logits_in, yb, w)
        if not np.isfinite(loss):
            raise XrmDivergenceError(
                f"held-in loss became non-finite at iteration {it} (lr={hp.lr}, "
                f"weight_decay={hp.weight_decay})"
            )
        losses[it] = loss

        dlogits = (softmax(logits_in) - one_hot(yb, n_classes)) * w[:, None]
        # each twin's gradient only sees its held-in rows; slice instead of
        # backpropagating zeros through the held-out half
        rows_a = np.flatnonzero(row_in_a)
        rows_b = np.flatnonzero(~row_in_a)
        grads_a = _backprop(params_a, [a[rows_a] for a in acts_a], dlogits[rows_a])
        grads_b = _backprop(params_b, [a[rows_b] for a in acts_b], dlogits[rows_b])

        blocks = optimizer_step(
            opt, params_a.blocks() + params_b.blocks(), grads_a.blocks() + grads_b.blocks()
        )
        half = 2 * params_a.n_layers
        params_a = ModelParams.from_blocks(blocks[:half])
        params_b = ModelParams.from_blocks(blocks[half:])

        # flips use the pre-step held-out predictions
        p_out = softmax(np.where(row_in_a[:, None], logits_b, logits_a))
        y_out = np.argmax(p_out, axis=1)
        q = flip_probability(p_out.max(axis=1), n_classes)
        flips = rng_flip.random(len(q)) < q
        if isinstance(rows, slice):
            y_current = np.where(flips, y_out, y_current)
        else:
            y_current[rows] = np.where(flips, y_out, y_current[rows])
        trajectory[it + 1] = np.mean(y_current != y_original)

    logits_a = forward(params_a, X)
    logits_b = forward(params_b, X)
    preds_in = np.argmax(np.where(in_a[:, None], logits_a, logits_b), axis=1)
    class_acc = np.array(
        [np.mean(preds_in[y_original == c] == c) for c in range(n_classes)]
    )
    return TwinState(
        spec=spec,
        params_a=params_a,
        params_b=params_b,
        mask_a=mask_a,
        temps_a=t_a,
        temps_b=t_b,
        y_original=y_original,
        y_current=y_current,
        flip_trajectory=trajectory,
        heldin_class_accuracy=class_acc,
        diagnostics={
            "losses": losses,
            "calibration_loss_initial": cal0,
            "calibration_loss_final": cal1,
            "final_train_logits_a": logits_a,
            "final_train_logits_b": logits_b,
        },
    )


# ---------------------------------------------------------------------------
# Sweep results and twin selection
# ---------------------------------------------------------------------------


@dataclass
class TwinRunResult:
    """One (hyper-parameter combo, seed slot) trial of the twin sweep."""

    combo_id: int
    seed_slot: int
    flip_fraction: float
    trajectory: np.ndarray
    train_logits_a: np.ndarray
    train_logits_b: np.ndarray
    val_logits_a: np.ndarray
    val_logits_b: np.ndarray
    heldin_class_accuracy: np.ndarray
    attempts: int = 1
    failed: bool = False


@dataclass
class SelectedTwins:
    combo_id: int
    hp: HyperParams
    mean_flip_fraction: float
    combo_flip_fractions: dict
    environments: DiscoveredEnvironments
    train_logits_a: np.ndarray
    train_logits_b: np.ndarray
    val_logits_a: np.ndarray
    val_logits_b: np.ndarray
    seeds_used: list


def run_xrm_trial(
    train,
    val,
    spec: ModelSpec,
    hp: HyperParams,
    combo_id: int,
    seed_slot: int,
    seed_fn,
    iters: int,
    calibration_lr: float = 1e-2,
    calibration_iters: int = 1000,
    batch_size: int | None = None,
    max_retries: int = 3,
) -> TwinRunResult:
    """One sweep trial; reseeds up to max_retries when a class ends at null
    accuracy, then marks the trial failed."""
    attempts = 0
    state = None
    for attempt in range(max_retries + 1):
        attempts += 1
        state = xrm_train(
            train,
            spec,
            hp,
            seed=seed_fn(combo_id, seed_slot, attempt),
            iters=iters,
            calibration_lr=calibration_lr,
            calibration_iters=calibration_iters,
            batch_size=batch_size,
        )
        if np.all(state.heldin_class_accuracy > 0):
            break
        warnings.warn(
            f"combo {combo_id} seed {seed_slot}: null accuracy on a class "
            f"(attempt {attempt + 1})",
            RuntimeWarning,
        )
    failed = not np.all(state.heldin_class_accuracy > 0)
    return TwinRunResult(
        combo_id=combo_id,
        seed_slot=seed_slot,
        flip_fraction=count_flips(state),
        trajectory=state.flip_trajectory,
        train_logits_a=state.diagnostics["final_train_logits_a"],
        train_logits_b=state.diagnostics["final_train_logits_b"],
        val_logits_a=forward(state.params_a, val.X),
        val_logits_b=forward(state.params_b, val.X),
        heldin_class_accuracy=state.heldin_class_accuracy,
        attempts=attempts,
        failed=failed,
    )


def select_twins(
    results: list, combos: list, y_train: np.ndarray, y_val: np.ndarray
) -> SelectedTwins:
    """Pick the combo with the highest mean final flip fraction and discover
    environments from its seed-averaged logits.

    Ties break toward the lexicographically first combo. Failed trials are
    excluded from both the mean and the logit average.
    """
    ok = [r for r in results if not r.failed]
    if not ok:
        raise RuntimeError("all twin runs failed; nothing to select")
    by_combo: dict[int, list] = {}
    for r in ok:
        by_combo.setdefault(r.combo_id, []).append(r)
    combo_means = {
        c: float(np.mean([r.flip_fraction for r in rs])) for c, rs in sorted(by_combo.items())
    }
    best = max(sorted(combo_means), key=lambda c: combo_means[c])
    winners = sorted(by_combo[best], key=lambda r: r.seed_slot)
    train_a = np.mean([r.train_logits_a for r in winners], axis=0)
    train_b = np.mean([r.train_logits_b for r in winners], axis=0)
    val_a = np.mean([r.val_logits_a for r in winners], axis=0)
    val_b = np.mean([r.val_logits_b for r in winners], axis=0)
    envs = DiscoveredEnvironments(
        train_env=cross_mistake(train_a, train_b, y_train),
        val_env=cross_mistake(val_a, val_b, y_val),
    )
    return SelectedTwins(
        combo_id=best,
        hp=combos[best],
        mean_flip_fraction=combo_means[best],
        combo_flip_fractions=combo_means,
        environments=envs,
        train_logits_a=train_a,
        train_logits_b=train_b,
        val_logits_a=val_a,
        val_logits_b=val_b,
        seeds_used=[r.seed_slot for r in winners],
    )


# ---------------------------------------------------------------------------
# Discovered-environment export
# ---------------------------------------------------------------------------


def export_environments(path, envs: DiscoveredEnvironments, y_train, y_val,
                        sidecar_path=None, metadata: dict | None = None) -> None:
    """Write index,split,label,discovered_env rows plus a JSON sidecar."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "split", "label", "discovered_env"])
        for i, (y, e) in enumerate(zip(y_train, envs.train_env)):
            writer.writerow([i, "train", int(y), int(e)])
        for i, (y, e) in enumerate(zip(y_val, envs.val_env)):
            writer.writerow([i, "val", int(y), int(e)])
    if sidecar_path is not None:
        with open(sidecar_path, "w") as f:
            json.dump(metadata or {}, f, indent=2, sort_keys=True)
            f.write("\n")


def import_environments(path) -> DiscoveredEnvironments:
    train, val = [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["index", "split", "label", "discovered_env"]:
            raise ValueError("unexpected environment file header")
        for row in reader:
            (train if row[1] == "train" else val).append(int(row[3]))
    return DiscoveredEnvironments(
        train_env=np.asarray(train, dtype=np.int64), val_env=np.asarray(val, dtype=np.int64)
    )
