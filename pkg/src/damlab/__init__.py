"""damlab: reward-tilted fine-tuning of masked discrete diffusion models.

The package trains a masked sequence model (one token unmasked per jump)
toward the entropy-regularized optimum p* proportional to p_base * exp(-g),
using importance-weighted adjoint targets and a generalized-KL matching loss.
Small spaces admit exact oracles (value tables, optimal jump laws, exact
marginals), so every estimator and the full training loop are testable
against ground truth.
"""

from .version import VERSION as __version__

from .spaces import MASK, ProductSpace, Successor
from .model import (
    ConditionalSampleBatch,
    LogitsModel,
    load_model,
    model_q,
    reciprocal_project,
    rollout_from,
    sample_training_level,
    save_model,
)
from .adjoint import (
    DAM2,
    DAM3,
    AdjointEstimate,
    StudyRecord,
    analytic_adjoint,
    estimator_bias_variance_study,
    integrate_discrete_adjoint,
    iw_adjoint,
    toy_delta_bias_dam3,
    toy_delta_var_dam3,
    toy_exact_bias_dam3,
    toy_mean_dam2,
    toy_mean_s,
    toy_true_value,
    toy_var_dam2,
    toy_var_s1,
)
from .oracle import (
    TiltedDistribution,
    ValueTable,
    basic_adjoint_generator_at_optimum,
    brute_force_tilted_final,
    compute_tilted_distribution,
    compute_value_table,
    expand_terminal_loss,
    load_value_table,
    log_expected_terminal_tilt,
    optimal_conditional,
    optimal_target,
    save_value_table,
)
from .bench import (
    GRID_SIZE,
    ExperimentResult,
    ExperimentSpec,
    GridReward,
    benchmark_spec,
    checkerboard_reward,
    custom_reward,
    grid_space,
    level_histogram,
    load_histogram,
    pinwheel_reward,
    preflight_oracle_checks,
    run_bias_variance_study,
    run_experiment,
    write_manifest,
)
from .trainer import (
    AdamState,
    MetricRecord,
    ReplayBuffer,
    StepTargets,
    TrainConfig,
    TrainResult,
    adam_step,
    dam_loss_and_grad,
    gkl_divergence,
    gkl_divergence_grad_u,
    metrics_csv_header,
    metrics_to_csv,
    sample_step_targets,
    train,
)
from .ctmc import (
    DEFAULT_STATE_CAP,
    JumpEvent,
    LevelMarginals,
    TableTargetDist,
    TargetDist,
    Trajectory,
    dynkin_estimate,
    dynkin_functional,
    log_path_prob,
    log_path_ratio,
    marginal_kl,
    path_kl,
    push_forward_marginals,
    sample_trajectory,
    uniform_base,
)

__all__ = [
    "MASK",
    "ProductSpace",
    "Successor",
    "ConditionalSampleBatch",
    "LogitsModel",
    "load_model",
    "model_q",
    "reciprocal_project",
    "rollout_from",
    "sample_training_level",
    "save_model",
    "DAM2",
    "DAM3",
    "AdjointEstimate",
    "StudyRecord",
    "analytic_adjoint",
    "estimator_bias_variance_study",
    "integrate_discrete_adjoint",
    "iw_adjoint",
    "toy_delta_bias_dam3",
    "toy_delta_var_dam3",
    "toy_exact_bias_dam3",
    "toy_mean_dam2",
    "toy_mean_s",
    "toy_true_value",
    "toy_var_dam2",
    "toy_var_s1",
    "TiltedDistribution",
    "ValueTable",
    "basic_adjoint_generator_at_optimum",
    "brute_force_tilted_final",
    "compute_tilted_distribution",
    "compute_value_table",
    "expand_terminal_loss",
    "load_value_table",
    "log_expected_terminal_tilt",
    "optimal_conditional",
    "optimal_target",
    "save_value_table",
    "GRID_SIZE",
    "ExperimentResult",
    "ExperimentSpec",
    "GridReward",
    "benchmark_spec",
    "checkerboard_reward",
    "custom_reward",
    "grid_space",
    "level_histogram",
    "load_histogram",
    "pinwheel_reward",
    "preflight_oracle_checks",
    "run_bias_variance_study",
    "run_experiment",
    "write_manifest",
    "AdamState",
    "MetricRecord",
    "ReplayBuffer",
    "StepTargets",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "dam_loss_and_grad",
    "gkl_divergence",
    "gkl_divergence_grad_u",
    "metrics_csv_header",
    "metrics_to_csv",
    "sample_step_targets",
    "train",
    "DEFAULT_STATE_CAP",
    "JumpEvent",
    "LevelMarginals",
    "TableTargetDist",
    "TargetDist",
    "Trajectory",
    "dynkin_estimate",
    "dynkin_functional",
    "log_path_prob",
    "log_path_ratio",
    "marginal_kl",
    "path_kl",
    "push_forward_marginals",
    "sample_trajectory",
    "uniform_base",
    "__version__",
]
