"""Dual meta-learning laboratory.

A small, fully deterministic stack: a float64 autodiff core with double
backprop, an encoder-decoder segmentation net, class-aware regularized
losses, the bi-level meta-training engine, synthetic lifespan phantoms,
surface-distance metrics, and a CLI for the experiment pipeline.
"""

from .tensorcore import (
    Tensor, Tape, ParamSet, NumericalError, TapeError,
    constant, elementwise, add, sub, mul, div, neg, scale, add_const, power,
    relu, exp, log, matmul, transpose, reshape, expand, reduce, reduce_sum,
    reduce_mean, concat, pad2d, conv2d, resample, avg_down, nearest_up,
    masked_mean, detach, grad, backprop, check_grad, no_grad, checked,
)
from .segnet import NetConfig, FeaturePyramid, build_network, extract_features, forward_logits, partition_head
from .losses import (
    LossWeights, TissueReps, ce_loss, dice_loss, seg_loss, tissue_representations,
    cosine_similarity, inter_tissue_loss, intra_tissue_loss, outer_loss,
)
from .engine import (
    MetaState, TrainConfig, EpisodeTrace, MetaTrainResult,
    inner_step, mfl_outer_step, mil_outer_step, hypergradient,
    hypergradient_fd_check, run_episode, meta_train, fine_tune,
    train_supervised, sgd_update, quadratic_toy_report,
)

__version__ = "0.1.0"
