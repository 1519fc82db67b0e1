"""Experiment configuration: plain INI files with strict key checking.

Every tunable of the pipeline lives here; unknown sections or keys are
errors so that config typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

ENV_SOURCES = ("none", "ground-truth", "xrm")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HyperParams:
    lr: float
    weight_decay: float
    batch_size: int | None = None  # None = full batch
    optimizer: str = "adam"
    eta: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch size must be positive or None for full batch")


@dataclass
class GridSpec:
    """Log-uniform sampling ranges; lo == hi degenerates to a constant."""

    lr_log10: tuple = (-4.0, -2.0)
    weight_decay_log10: tuple = (-6.0, -3.0)
    batch_size_log2: tuple = (6.0, 7.0)
    eta_log10: tuple | None = None
    optimizer: str = "adam"
    full_batch: bool = False

    def __post_init__(self):
        for name in ("lr_log10", "weight_decay_log10", "batch_size_log2", "eta_log10"):
            pair = getattr(self, name)
            if pair is None:
                continue
            lo, hi = pair
            if lo > hi:
                raise ConfigError(f"{name}: lo {lo} > hi {hi}")


@dataclass
class DatasetConfig:
    kind: str = "colormnist"  # colormnist | synthetic | csv
    # colormnist
    n_train: int = 50000
    n_val: int = 10000
    n_test: int = 10000
    train_correlations: tuple = (0.8, 0.9)
    test_correlation: float = 0.1
    label_noise: float = 0.25
    digit_source: str = "synthetic"  # synthetic | idx
    idx_images: str = ""
    idx_labels: str = ""
    # synthetic
    n: int = 10000
    group_proportions: tuple = (0.73, 0.01, 0.04, 0.22)
    feature_noise: float = 1.0
    spurious_noise: float | None = None
    # csv
    csv_path: str = ""


@dataclass
class ModelConfig:
    architecture: str = "mlp"
    hidden_dims: tuple = (300, 300)


@dataclass
class Phase1Config:
    n_combos: int = 16
    n_seeds: int = 10
    iters: int = 2000
    calibration_lr: float = 1e-2
    calibration_iters: int = 1000
    grid: GridSpec = field(default_factory=lambda: GridSpec(full_batch=True))


@dataclass
class Phase2Config:
    algorithm: str = "groupdro"  # erm | groupdro | rwg | subg
    n_combos: int = 16
    n_seeds: int = 10
    iters: int = 2000
    eval_every: int = 50
    grid: GridSpec = field(
        default_factory=lambda: GridSpec(eta_log10=(-3.0, -1.0), full_batch=False)
    )


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    env_source: str = "xrm"
    master_seed: int = 0
    out_dir: str = "runs/experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)

    def __post_init__(self):
        if self.env_source not in ENV_SOURCES:
            raise ConfigError(f"env_source must be one of {ENV_SOURCES}")
        for name, value in (("phase1.n_combos", self.phase1.n_combos),
                            ("phase1.n_seeds", self.phase1.n_seeds),
                            ("phase2.n_combos", self.phase2.n_combos),
                            ("phase2.n_seeds", self.phase2.n_seeds)):
            if value < 1:
                raise ConfigError(f"{name} must be >= 1")


# ---------------------------------------------------------------------------
# INI parsing
# ---------------------------------------------------------------------------


def _parse_bool(s):
    s = s.strip().lower()
    if s in ("true", "yes", "1", "on"):
        return True
    if s in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip() != "")


def _parse_ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip() != "")


def _parse_pair(s):
    pair = _parse_floats(s)
    if len(pair) != 2:
        raise ConfigError(f"expected 'lo, hi', got {s!r}")
    return pair


def _parse_opt_float(s):
    return None if s.strip() == "" else float(s)


_EXPERIMENT_KEYS = {"name": str, "env_source": str, "master_seed": int, "out_dir": str}
_DATASET_KEYS = {
    "kind": str,
    "n_train": int,
    "n_val": int,
    "n_test": int,
    "train_correlations": _parse_floats,
    "test_correlation": float,
    "label_noise": float,
    "digit_source": str,
    "idx_images": str,
    "idx_labels": str,
    "n": int,
    "group_proportions": _parse_floats,
    "feature_noise": float,
    "spurious_noise": _parse_opt_float,
    "csv_path": str,
}
_MODEL_KEYS = {"architecture": str, "hidden_dims": _parse_ints}
_GRID_KEYS = {
    "lr_log10": _parse_pair,
    "weight_decay_log10": _parse_pair,
    "batch_size_log2": _parse_pair,
    "eta_log10": lambda s: None if s.strip() == "" else _parse_pair(s),
    "optimizer": str,
    "full_batch": _parse_bool,
}
_PHASE1_KEYS = {
    "n_combos": int,
    "n_seeds": int,
    "iters": int,
    "calibration_lr": float,
    "calibration_iters": int,
    **_GRID_KEYS,
}
_PHASE2_KEYS = {
    "algorithm": str,
    "n_combos": int,
    "n_seeds": int,
    "iters": int,
    "eval_every": int,
    **_GRID_KEYS,
}
_SCHEMA = {
    "experiment": _EXPERIMENT_KEYS,
    "dataset": _DATASET_KEYS,
    "model": _MODEL_KEYS,
    "phase1": _PHASE1_KEYS,
    "phase2": _PHASE2_KEYS,
}


def _apply_section(obj, section_name, items, keys):
    grid_fields = set(_GRID_KEYS)
    for key, raw in items:
        if key not in keys:
            raise ConfigError(f"unknown key {key!r} in section [{section_name}]")
        value = keys[key](raw)
        if key in grid_fields and hasattr(obj, "grid"):
            setattr(obj.grid, key, value)
        else:
            setattr(obj, key, value)


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        target = {
            "experiment": cfg,
            "dataset": cfg.dataset,
            "model": cfg.model,
            "phase1": cfg.phase1,
            "phase2": cfg.phase2,
        }[section]
        _apply_section(target, section, parser.items(section), _SCHEMA[section])
    cfg.phase1.grid.__post_init__()
    cfg.phase2.grid.__post_init__()
    cfg.__post_init__()
    return cfg


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    if value is None:
        return ""
    return str(value)


def save_config(cfg: ExperimentConfig, path) -> None:
    """Write the resolved configuration back out in the same INI schema."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["experiment"] = {k: _fmt(getattr(cfg, k)) for k in _EXPERIMENT_KEYS}
    parser["dataset"] = {k: _fmt(getattr(cfg.dataset, k)) for k in _DATASET_KEYS}
    parser["model"] = {k: _fmt(getattr(cfg.model, k)) for k in _MODEL_KEYS}
    for name, obj, keys in (
        ("phase1", cfg.phase1, _PHASE1_KEYS),
        ("phase2", cfg.phase2, _PHASE2_KEYS),
    ):
        parser[name] = {
            k: _fmt(getattr(obj.grid, k) if k in _GRID_KEYS else getattr(obj, k)) for k in keys
        }
    with open(path, "w") as f:
        parser.write(f)


def dataclass_dict(obj):
    """Nested plain-dict view of a config dataclass (for JSON sidecars)."""
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if hasattr(v, "__dataclass_fields__"):
            v = dataclass_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out
