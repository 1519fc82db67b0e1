"""Experiment orchestration: random search over the sampling grids, the
two-phase pipeline with seed fan-out, persistence, and the no-peeking audit.

A master seed fans out into disjoint labeled streams per (stage, combo,
seed slot), so every trial is independently re-runnable and the whole
pipeline is reproducible bit for bit. Run directories are plain files:

    out/
      config.ini            resolved configuration
      phase1/combos.csv     sampled twin hyper-parameters
      phase1/results.csv    per-trial flip fractions
      phase1/trials/*.npz   per-trial logits and flip trajectories
      envs/environments.csv discovered environments (+ metadata.json)
      phase2/<cell>/        search + rerun results per (algorithm, source)
      report/               tables and figures (see report.py)
"""

from __future__ import annotations

import json
import csv
import warnings
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, GridSpec, HyperParams, dataclass_dict, save_config
from .datasets import (
    GroupDataset,
    GroupIndex,
    generate_colormnist,
    generate_synthetic_groupshift,
    group_index,
    import_csv,
    load_idx,
    synthetic_digits,
)
from .models import ModelSpec, predict, save_checkpoint
from .numerics import derive_seed, labeled_rng
from .phase2 import (
    average_accuracy,
    select_checkpoint,
    train,
    worst_group_accuracy,
)
from .xrm import (
    DiscoveredEnvironments,
    SelectedTwins,
    TwinRunResult,
    export_environments,
    import_environments,
    run_xrm_trial,
    select_twins,
)

# stage keys for seed fan-out
_STAGE_P1_SAMPLE, _STAGE_P1_TRIAL, _STAGE_P2_SAMPLE, _STAGE_P2_TRIAL, _STAGE_P2_RERUN = range(5)


class AuditError(RuntimeError):
    """Ground-truth environment annotations were read on the discovery path."""


def sample_hyperparams(grid: GridSpec, rng: np.random.Generator) -> HyperParams:
    """One log-uniform draw per grid row; degenerate rows give constants."""
    lr = 10.0 ** rng.uniform(*grid.lr_log10)
    wd = 10.0 ** rng.uniform(*grid.weight_decay_log10)
    batch = int(round(2.0 ** rng.uniform(*grid.batch_size_log2)))
    eta = None if grid.eta_log10 is None else 10.0 ** rng.uniform(*grid.eta_log10)
    return HyperParams(
        lr=lr,
        weight_decay=wd,
        batch_size=None if grid.full_batch else batch,
        optimizer=grid.optimizer,
        eta=eta,
    )


def sample_combos(grid: GridSpec, n_combos: int, master_seed: int, stage: int) -> list:
    return [
        sample_hyperparams(grid, labeled_rng(master_seed, "search", stage, c))
        for c in range(n_combos)
    ]


# ---------------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------------


def build_dataset(cfg: ExperimentConfig) -> dict:
    """Materialize the configured dataset, deterministic in the master seed."""
    d = cfg.dataset
    if d.kind == "colormnist":
        total = d.n_train + d.n_val + d.n_test
        if d.digit_source == "idx":
            images, digits = load_idx(d.idx_images, d.idx_labels)
        elif d.digit_source == "synthetic":
            images, digits = synthetic_digits(total, labeled_rng(cfg.master_seed, "data", 1))
        else:
            raise ValueError(f"unknown digit_source {d.digit_source!r}")
        return generate_colormnist(
            images,
            digits,
            seed=cfg.master_seed,
            train_correlations=d.train_correlations,
            test_correlation=d.test_correlation,
            label_noise=d.label_noise,
            n_train=d.n_train,
            n_val=d.n_val,
            n_test=d.n_test,
        )
    if d.kind == "synthetic":
        return generate_synthetic_groupshift(
            d.n,
            group_proportions=d.group_proportions,
            feature_noise=d.feature_noise,
            spurious_noise=d.spurious_noise,
            seed=cfg.master_seed,
        )
    if d.kind == "csv":
        return import_csv(d.csv_path)
    raise ValueError(f"unknown dataset kind {d.kind!r}")


def model_spec_for(cfg: ExperimentConfig, data: dict) -> ModelSpec:
    train_ds = data["train"]
    hidden = tuple(cfg.model.hidden_dims) if cfg.model.architecture == "mlp" else ()
    return ModelSpec(cfg.model.architecture, train_ds.n_features, hidden, train_ds.n_classes)


# ---------------------------------------------------------------------------
# Worker-pool plumbing (context passed once per worker, tasks by key)
# ---------------------------------------------------------------------------

_CTX: dict = {}


def _init_ctx(ctx):
    global _CTX
    _CTX = ctx


def _run_tasks(task_fn, tasks, ctx, jobs):
    """Run task_fn over tasks, in-process or in a pool; returns {task: result}.

    Results are keyed, so callers reduce in deterministic task order no
    matter the completion order.
    """
    if jobs <= 1 or len(tasks) <= 1:
        _init_ctx(ctx)
        return {t: task_fn(t) for t in tasks}
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_ctx, initargs=(ctx,)) as ex:
        futures = {ex.submit(task_fn, t): t for t in tasks}
        return {futures[f]: f.result() for f in as_completed(futures)}


def _phase1_task(task):
    c, s = task
    ctx = _CTX
    master = ctx["master_seed"]
    return run_xrm_trial(
        ctx["train"],
        ctx["val"],
        ctx["spec"],
        ctx["combos"][c],
        combo_id=c,
        seed_slot=s,
        seed_fn=lambda cc, ss, aa: derive_seed(master, "search", _STAGE_P1_TRIAL, cc, ss, aa),
        iters=ctx["iters"],
        calibration_lr=ctx["calibration_lr"],
        calibration_iters=ctx["calibration_iters"],
        batch_size=ctx["combos"][c].batch_size,
    )


def _phase2_task(task):
    stage, combo, slot = task
    ctx = _CTX
    hp = ctx["combos"][combo] if stage == _STAGE_P2_TRIAL else ctx["winner_hp"]
    seed = derive_seed(ctx["master_seed"], "search", stage, combo, slot)
    checkpoints = train(
        ctx["algorithm"],
        ctx["train"],
        ctx["train_groups"],
        ctx["spec"],
        hp,
        seed=seed,
        iters=ctx["iters"],
        eval_every=ctx["eval_every"],
    )
    best = select_checkpoint(
        checkpoints, ctx["criterion"], ctx["val"], ctx["val_group_ids"], ctx["n_groups"]
    )
    return best


# ---------------------------------------------------------------------------
# Phase 1: twin sweep, flip-count selection, environment discovery
# ---------------------------------------------------------------------------


def _trial_path(out: Path, c: int, s: int) -> Path:
    return out / "phase1" / "trials" / f"c{c:02d}_s{s:02d}.npz"


def _save_trial(path: Path, r: TwinRunResult) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        combo_id=r.combo_id,
        seed_slot=r.seed_slot,
        flip_fraction=r.flip_fraction,
        trajectory=r.trajectory,
        train_logits_a=r.train_logits_a,
        train_logits_b=r.train_logits_b,
        val_logits_a=r.val_logits_a,
        val_logits_b=r.val_logits_b,
        heldin_class_accuracy=r.heldin_class_accuracy,
        attempts=r.attempts,
        failed=int(r.failed),
    )


def _load_trial(path: Path) -> TwinRunResult:
    with np.load(path) as z:
        return TwinRunResult(
            combo_id=int(z["combo_id"]),
            seed_slot=int(z["seed_slot"]),
            flip_fraction=float(z["flip_fraction"]),
            trajectory=z["trajectory"],
            train_logits_a=z["train_logits_a"],
            train_logits_b=z["train_logits_b"],
            val_logits_a=z["val_logits_a"],
            val_logits_b=z["val_logits_b"],
            heldin_class_accuracy=z["heldin_class_accuracy"],
            attempts=int(z["attempts"]),
            failed=bool(z["failed"]),
        )


def _write_combos_csv(path: Path, combos: list) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["combo_id", "lr", "weight_decay", "batch_size", "optimizer", "eta"])
        for c, hp in enumerate(combos):
            writer.writerow(
                [
                    c,
                    format(hp.lr, ".10g"),
                    format(hp.weight_decay, ".10g"),
                    "" if hp.batch_size is None else hp.batch_size,
                    hp.optimizer,
                    "" if hp.eta is None else format(hp.eta, ".10g"),
                ]
            )


def run_phase1(cfg: ExperimentConfig, data: dict, out: Path, jobs: int = 1) -> SelectedTwins:
    """Sweep the twin grid, pick the max-flip combo, discover environments.

    Resumable at trial granularity: finished trials are reloaded from their
    npz files and never recomputed.
    """
    p1 = cfg.phase1
    out.mkdir(parents=True, exist_ok=True)
    (out / "phase1").mkdir(exist_ok=True)
    combos = sample_combos(p1.grid, p1.n_combos, cfg.master_seed, _STAGE_P1_SAMPLE)
    _write_combos_csv(out / "phase1" / "combos.csv", combos)

    spec = model_spec_for(cfg, data)
    tasks = [(c, s) for c in range(p1.n_combos) for s in range(p1.n_seeds)]
    todo = [t for t in tasks if not _trial_path(out, *t).exists()]
    ctx = {
        "master_seed": cfg.master_seed,
        "train": data["train"],
        "val": data["val"],
        "spec": spec,
        "combos": combos,
        "iters": p1.iters,
        "calibration_lr": p1.calibration_lr,
        "calibration_iters": p1.calibration_iters,
    }
    fresh = _run_tasks(_phase1_task, todo, ctx, jobs)
    for t, r in fresh.items():
        _save_trial(_trial_path(out, *t), r)
    results = [_load_trial(_trial_path(out, *t)) for t in tasks]

    with open(out / "phase1" / "results.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["combo_id", "seed_slot", "flip_fraction", "attempts", "failed"])
        for r in results:
            writer.writerow(
                [r.combo_id, r.seed_slot, format(r.flip_fraction, ".10g"), r.attempts, int(r.failed)]
            )

    selected = select_twins(results, combos, data["train"].y, data["val"].y)
    envs_dir = out / "envs"
    envs_dir.mkdir(exist_ok=True)
    export_environments(
        envs_dir / "environments.csv",
        selected.environments,
        data["train"].y,
        data["val"].y,
        sidecar_path=envs_dir / "metadata.json",
        metadata={
            "combo_id": selected.combo_id,
            "hp": _hp_dict(selected.hp),
            "mean_flip_fraction": selected.mean_flip_fraction,
            "combo_flip_fractions": {str(k): v for k, v in selected.combo_flip_fractions.items()},
            "seeds_used": selected.seeds_used,
            "n_combos": cfg.phase1.n_combos,
            "n_seeds": cfg.phase1.n_seeds,
        },
    )
    return selected


def load_phase1(out: Path) -> tuple[DiscoveredEnvironments, dict]:
    envs = import_environments(out / "envs" / "environments.csv")
    with open(out / "envs" / "metadata.json") as f:
        return envs, json.load(f)


# ---------------------------------------------------------------------------
# Phase 2: search, rerun, evaluate against ground truth
# ---------------------------------------------------------------------------


def _hp_dict(hp: HyperParams) -> dict:
    return {
        "lr": hp.lr,
        "weight_decay": hp.weight_decay,
        "batch_size": hp.batch_size,
        "optimizer": hp.optimizer,
        "eta": hp.eta,
    }


def _training_groups(cfg, data, envs):
    """Group indices for train/val under the configured annotation source."""
    train_ds, val_ds = data["train"], data["val"]
    if cfg.env_source == "none":
        # no annotations: classes stand in for groups, tuning is worst-class
        gt = GroupIndex(train_ds.y.copy(), train_ds.n_classes, 1,
                        np.bincount(train_ds.y, minlength=train_ds.n_classes))
        gv = GroupIndex(val_ds.y.copy(), val_ds.n_classes, 1,
                        np.bincount(val_ds.y, minlength=val_ds.n_classes))
        return gt, gv, "worst-class"
    if cfg.env_source == "ground-truth":
        return group_index(train_ds), group_index(val_ds), "worst-group"
    if cfg.env_source == "xrm":
        if envs is None:
            raise ValueError("env_source=xrm but no discovered environments given")
        return (
            group_index(train_ds, envs.train_env),
            group_index(val_ds, envs.val_env),
            "worst-group",
        )
    raise ValueError(f"unknown env_source {cfg.env_source!r}")


@dataclass
class CellReport:
    """Final numbers for one (algorithm, env_source) cell of the table."""

    dataset: str
    algorithm: str
    env_source: str
    criterion: str
    winner_combo: int
    winner_hp: dict
    winner_val_metric: float
    rerun_seeds: list
    rerun_iterations: list
    rerun_val_metrics: list
    test_wga_per_seed: list
    test_wga_mean: float
    test_wga_std: float
    test_avg_acc_mean: float
    per_group_test_acc_mean: list
    phase1: dict | None
    audit: dict | None

    def to_json(self) -> dict:
        out = dict(self.__dict__)
        out["per_group_test_acc_mean"] = [
            None if not np.isfinite(v) else float(v) for v in self.per_group_test_acc_mean
        ]
        return out


def cell_name(algorithm: str, env_source: str) -> str:
    return f"{algorithm}_{env_source.replace('-', '')}"


def run_phase2_cell(
    cfg: ExperimentConfig,
    data: dict,
    envs: DiscoveredEnvironments | None,
    out: Path,
    jobs: int = 1,
    phase1_meta: dict | None = None,
) -> CellReport:
    """Search the phase-2 grid, rerun the winner, score against ground truth."""
    p2 = cfg.phase2
    cell_dir = out / "phase2" / cell_name(p2.algorithm, cfg.env_source)
    cell_dir.mkdir(parents=True, exist_ok=True)
    grid = p2.grid
    if p2.algorithm != "groupdro":
        grid = GridSpec(
            grid.lr_log10, grid.weight_decay_log10, grid.batch_size_log2,
            None, grid.optimizer, grid.full_batch,
        )
    combos = sample_combos(grid, p2.n_combos, cfg.master_seed, _STAGE_P2_SAMPLE)
    _write_combos_csv(cell_dir / "combos.csv", combos)

    train_groups, val_groups, criterion = _training_groups(cfg, data, envs)
    spec = model_spec_for(cfg, data)
    ctx = {
        "master_seed": cfg.master_seed,
        "algorithm": p2.algorithm,
        "train": data["train"],
        "val": data["val"],
        "train_groups": train_groups,
        "val_group_ids": val_groups.group_ids,
        "n_groups": val_groups.n_groups,
        "criterion": criterion,
        "spec": spec,
        "combos": combos,
        "winner_hp": None,
        "iters": p2.iters,
        "eval_every": p2.eval_every,
    }

    search_tasks = [(_STAGE_P2_TRIAL, c, 0) for c in range(p2.n_combos)]
    search = _run_tasks(_phase2_task, search_tasks, ctx, jobs)
    search_best = [search[t] for t in search_tasks]
    metrics = np.array([b.val_metric for b in search_best])
    winner = int(np.argmax(metrics))

    ctx["winner_hp"] = combos[winner]
    rerun_tasks = [(_STAGE_P2_RERUN, winner, s) for s in range(p2.n_seeds)]
    reruns = _run_tasks(_phase2_task, rerun_tasks, ctx, jobs)
    rerun_best = [reruns[t] for t in rerun_tasks]

    # The discovery path must never have touched ground-truth annotations.
    audit = None
    if cfg.env_source == "xrm":
        audit = {
            f"{split}_env_reads_before_test_eval": data[split].env_reads
            for split in ("train", "val", "test")
        }
        if any(v != 0 for v in audit.values()):
            raise AuditError(
                f"ground-truth environment annotations were read before final "
                f"test evaluation: {audit}"
            )

    test_ds = data["test"]
    test_groups = group_index(test_ds)  # final scoring always uses ground truth
    wgas, avgs, per_group = [], [], []
    for best in rerun_best:
        preds = predict(best.params, test_ds.X)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            wga, accs = worst_group_accuracy(
                preds, test_ds.y, test_groups.group_ids, test_groups.n_groups
            )
        wgas.append(wga)
        avgs.append(average_accuracy(preds, test_ds.y))
        per_group.append(accs)

    save_checkpoint(cell_dir / "winner_checkpoint.npz", spec, rerun_best[0].params)
    report = CellReport(
        dataset=cfg.name,
        algorithm=p2.algorithm,
        env_source=cfg.env_source,
        criterion=criterion,
        winner_combo=winner,
        winner_hp=_hp_dict(combos[winner]),
        winner_val_metric=float(metrics[winner]),
        rerun_seeds=list(range(p2.n_seeds)),
        rerun_iterations=[b.iteration for b in rerun_best],
        rerun_val_metrics=[float(b.val_metric) for b in rerun_best],
        test_wga_per_seed=[float(w) for w in wgas],
        test_wga_mean=float(np.mean(wgas)),
        test_wga_std=float(np.std(wgas)),
        test_avg_acc_mean=float(np.mean(avgs)),
        per_group_test_acc_mean=list(np.nanmean(np.vstack(per_group), axis=0)),
        phase1=phase1_meta,
        audit=audit,
    )
    _write_results_csv(cell_dir / "results.csv", cfg, combos, search_best, report)
    with open(cell_dir / "report.json", "w") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    return report


def _write_results_csv(path, cfg, combos, search_best, report: CellReport) -> None:
    """Spec row format: dataset,algorithm,env_source,hp_id,seed,iteration,
    val_metric,test_wga,per_group_accs (search rows leave test columns blank)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["dataset", "algorithm", "env_source", "hp_id", "seed", "iteration",
             "val_metric", "test_wga", "per_group_accs"]
        )
        for c, best in enumerate(search_best):
            writer.writerow(
                [cfg.name, report.algorithm, report.env_source, c, 0, best.iteration,
                 format(best.val_metric, ".6f"), "", ""]
            )
        for i, seed in enumerate(report.rerun_seeds):
            accs = report.per_group_test_acc_mean
            writer.writerow(
                [cfg.name, report.algorithm, report.env_source, report.winner_combo, seed,
                 report.rerun_iterations[i], format(report.rerun_val_metrics[i], ".6f"),
                 format(report.test_wga_per_seed[i], ".6f"),
                 json.dumps([None if not np.isfinite(v) else round(float(v), 6) for v in accs])]
            )


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


def run_pipeline(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> CellReport:
    """Dataset -> (optional) discovery -> search -> rerun -> ground-truth report.

    env_source=ground-truth or none skips phase 1 entirely. A run directory
    with persisted environments resumes after phase 1, reusing them bit for
    bit.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.ini")
    data = build_dataset(cfg)

    envs, phase1_meta = None, None
    if cfg.env_source == "xrm":
        if (out / "envs" / "environments.csv").exists():
            envs, phase1_meta = load_phase1(out)
        else:
            selected = run_phase1(cfg, data, out, jobs=jobs)
            envs = selected.environments
            _, phase1_meta = load_phase1(out)
    return run_phase2_cell(cfg, data, envs, out, jobs=jobs, phase1_meta=phase1_meta)


# ---------------------------------------------------------------------------
# Diagnostics: do flip counts track downstream robustness?
# ---------------------------------------------------------------------------


def flip_wga_correlation(cfg: ExperimentConfig, data: dict, out: Path,
                         hp: HyperParams | None = None, iters: int | None = None) -> dict:
    """Spearman rank correlation between each phase-1 combo's mean flip
    fraction and the test worst-group accuracy of a GroupDRO model trained
    on that combo's discovered environments.

    Reads ground truth for scoring, so this is a post-hoc diagnostic, not
    part of the discovery path.
    """
    from scipy.stats import spearmanr

    from .xrm import cross_mistake

    p1 = cfg.phase1
    results = [
        _load_trial(_trial_path(out, c, s))
        for c in range(p1.n_combos)
        for s in range(p1.n_seeds)
        if _trial_path(out, c, s).exists()
    ]
    by_combo: dict[int, list] = {}
    for r in results:
        if not r.failed:
            by_combo.setdefault(r.combo_id, []).append(r)
    if hp is None:
        hp = HyperParams(lr=1e-3, weight_decay=1e-5, batch_size=128, optimizer="adam", eta=1e-2)
    spec = model_spec_for(cfg, data)
    train_ds, val_ds, test_ds = data["train"], data["val"], data["test"]
    test_groups = group_index(test_ds)

    flips, wgas = [], []
    for c in sorted(by_combo):
        rs = sorted(by_combo[c], key=lambda r: r.seed_slot)
        train_env = cross_mistake(
            np.mean([r.train_logits_a for r in rs], axis=0),
            np.mean([r.train_logits_b for r in rs], axis=0),
            train_ds.y,
        )
        val_env = cross_mistake(
            np.mean([r.val_logits_a for r in rs], axis=0),
            np.mean([r.val_logits_b for r in rs], axis=0),
            val_ds.y,
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            checkpoints = train(
                "groupdro", train_ds, group_index(train_ds, train_env), spec, hp,
                seed=derive_seed(cfg.master_seed, "search", 9, c),
                iters=iters if iters is not None else cfg.phase2.iters,
                eval_every=cfg.phase2.eval_every,
            )
            vg = group_index(val_ds, val_env)
            best = select_checkpoint(checkpoints, "worst-group", val_ds, vg.group_ids, vg.n_groups)
            wga, _ = worst_group_accuracy(
                predict(best.params, test_ds.X), test_ds.y,
                test_groups.group_ids, test_groups.n_groups,
            )
        flips.append(float(np.mean([r.flip_fraction for r in rs])))
        wgas.append(float(wga))
    rho = float(spearmanr(flips, wgas)[0]) if len(flips) > 1 else float("nan")
    return {"combo_ids": sorted(by_combo), "flip_fractions": flips, "test_wgas": wgas, "spearman": rho}
