"""Discrimination-aware channel pruning on a small numpy autodiff engine."""

from .data import Dataset, load_checkpoint, load_cifar10, make_synthetic, sample_subset, save_checkpoint
from .loss import LossHead, build_head, capture_baseline, discrimination_loss, joint_loss, reconstruction_loss
from .network import (
    ARCHITECTURES,
    FLOP_CONVENTION,
    NetworkDef,
    apply_mask,
    build_architecture,
    compact,
    count_flops,
    count_params,
    forward,
    l20_norm,
    prunable_layers,
)
from .pipeline import PruneConfig, evaluate, finetune_stage, plan_stages, run_dcp, select_random, select_weight_sum, train
from .selector import LayerProblem, StopRule, channel_budget, select_channels, should_stop
from .tensor import Tape, Tensor

__version__ = "0.1.0"
