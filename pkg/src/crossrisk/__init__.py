"""Twin-predictor environment discovery with group-robust downstream training."""

from .config import ExperimentConfig, HyperParams, load_config
from .datasets import (
    GroupDataset,
    GroupIndex,
    generate_colormnist,
    generate_synthetic_groupshift,
    group_index,
    load_idx,
    synthetic_digits,
)
from .models import (
    ModelParams,
    ModelSpec,
    backward,
    colormnist_mlp_spec,
    fold_temperature,
    forward,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .numerics import (
    balanced_cross_entropy,
    finite_difference_gradient,
    labeled_rng,
    optimizer_step,
    OptimizerState,
    softmax,
)
from .phase2 import (
    erm_train,
    groupdro_train,
    rwg_train,
    select_checkpoint,
    subg_train,
    worst_class_accuracy,
    worst_group_accuracy,
)
from .xrm import (
    DiscoveredEnvironments,
    assign_holdout,
    calibrate,
    count_flips,
    cross_mistake,
    flip_probability,
    select_twins,
    xrm_train,
)
from .harness import run_pipeline, sample_hyperparams
from .report import emit_report

__version__ = "0.1.0"
