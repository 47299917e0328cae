"""Slice-based segmentation with a Jaccard loss, deep supervision and ConvLSTM refinement.

Everything runs on numpy: :mod:`jacseg.tensor` and :mod:`jacseg.functional`
provide a small reverse-mode autodiff engine, :mod:`jacseg.network` and
:mod:`jacseg.clstm` build the models, :mod:`jacseg.losses` and
:mod:`jacseg.metrics` define training objectives and scores, and
:mod:`jacseg.trainer` runs the training and evaluation protocols.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .clstm import RNNSegNet, attach_clstm, run_sequence
from .data import SynthParams, Volume, load_volume, make_folds, save_volume, synth_dataset, synth_generate
from .losses import balanced_cross_entropy_loss, cross_entropy_loss, deep_supervision_loss, jaccard_loss
from .metrics import aggregate, dsc, jaccard_index, threshold_sweep
from .network import SegNet, SegNetConfig, build_network, count_parameters, jac64_config, jac128_config
from .tensor import Tensor
from .trainer import TrainConfig, benchmark_losses, evaluate_cv, finetune_rnn, model_select, train_cnn

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "SegNet",
    "SegNetConfig",
    "RNNSegNet",
    "Volume",
    "SynthParams",
    "TrainConfig",
    "build_network",
    "count_parameters",
    "jac64_config",
    "jac128_config",
    "attach_clstm",
    "run_sequence",
    "jaccard_loss",
    "cross_entropy_loss",
    "balanced_cross_entropy_loss",
    "deep_supervision_loss",
    "dsc",
    "jaccard_index",
    "threshold_sweep",
    "aggregate",
    "load_volume",
    "save_volume",
    "synth_generate",
    "synth_dataset",
    "make_folds",
    "save_checkpoint",
    "load_checkpoint",
    "train_cnn",
    "model_select",
    "finetune_rnn",
    "evaluate_cv",
    "benchmark_losses",
]
