"""Task-oriented feature transmission for device-edge co-inference.

Trains compact, channel-robust feature encoders whose per-dimension
importance is learned jointly with the classifier, with static pruning for
fixed channels and a gated, variable-length encoding for dynamic ones.
"""

from .channel import (
    ChannelSpec,
    NoiseVarianceEstimate,
    blind_noise_variance,
    capacity_bpcu,
    estimate_noise_variance,
    known_noise_variance,
    latency_analog,
    latency_digital,
    psnr_to_sigma2,
    sigma2_to_psnr,
    transmit,
)
from .bottleneck import ImportanceBottleneck, MonotoneGate, forward_dynamic, forward_static, gate_values
from .config import ConfigError, ExperimentConfig
from .discrete_ib import DiscreteSystem, exact_ib_objective, exact_vib_objective
from .evaluation import (
    RunRecord,
    dynamic_channel_eval,
    eval_accuracy,
    prior_ablation,
    rate_distortion_sweep,
)
from .losses import (
    GaussianPriorKl,
    KlConstants,
    VibLossTerms,
    kl_log_uniform,
    vib_loss,
    vl_vib_loss,
)
from .models import ArchitectureSpec, BaselineSpec, TaskModel, build_model, quantize
from .training import TrainState, train, train_vfe, train_vl_vfe

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec",
    "BaselineSpec",
    "ChannelSpec",
    "ConfigError",
    "DiscreteSystem",
    "ExperimentConfig",
    "GaussianPriorKl",
    "ImportanceBottleneck",
    "KlConstants",
    "MonotoneGate",
    "NoiseVarianceEstimate",
    "RunRecord",
    "TaskModel",
    "TrainState",
    "VibLossTerms",
    "blind_noise_variance",
    "build_model",
    "capacity_bpcu",
    "dynamic_channel_eval",
    "estimate_noise_variance",
    "eval_accuracy",
    "exact_ib_objective",
    "exact_vib_objective",
    "forward_dynamic",
    "forward_static",
    "gate_values",
    "kl_log_uniform",
    "known_noise_variance",
    "latency_analog",
    "latency_digital",
    "prior_ablation",
    "psnr_to_sigma2",
    "quantize",
    "rate_distortion_sweep",
    "sigma2_to_psnr",
    "train",
    "train_vfe",
    "train_vl_vfe",
    "transmit",
    "vib_loss",
    "vl_vib_loss",
]
