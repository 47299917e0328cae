"""Seeded desk-scale experiments behind the two empirical acceptance properties.

Both experiments are fully determined by the constants below plus a training
seed, so reruns on the same platform reproduce the same numbers.

``threshold_stability`` trains one small network per loss on the 40-case
synthetic benchmark and sweeps the binarization threshold over fold 0.

``contextual_learning`` trains a CNN on volumes where a fifth of the slices
have their blob contrast reduced, fine-tunes the recurrent variant from it,
and scores both separately on corrupted and intact slices of held-out cases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SynthParams, Volume, synth_dataset
from .metrics import dsc
from .network import SegNetConfig, build_network
from .trainer import BenchmarkResult, TrainConfig, benchmark_losses, finetune_rnn, predict_volume, prepare_cases, train_cnn

SEEDS = (0, 1, 2)

#: 40 cases, 16 slices of 32x32, 4% foreground
STABILITY_DATA = SynthParams(dims=(16, 32, 32), foreground_fraction=0.04, seed=7)
STABILITY_NET = SegNetConfig.uniform(3, 2, 8)
STABILITY_LOSSES = ("jaccard", "cross_entropy", "balanced_cross_entropy")

#: 20% of slices keep 30% of the blob contrast
CONTEXT_DATA = SynthParams(dims=(16, 32, 32), foreground_fraction=0.04, corruption=0.2, corruption_contrast=0.3, seed=11)
CONTEXT_NET = SegNetConfig.uniform(3, 2, 8)
CONTEXT_TRAIN, CONTEXT_TEST = 30, 20


def stability_config(seed: int) -> TrainConfig:
    return TrainConfig(lr=0.1, max_epochs=30, patience=6, phase_b_max_epochs=10, seed=seed)


def context_config(seed: int) -> TrainConfig:
    return TrainConfig(
        lr=0.1, max_epochs=30, patience=6, rnn_lr=0.01, rnn_max_epochs=20, rnn_average=True,
        hidden_channels=8, seed=seed,
    )


def threshold_stability(seed: int) -> BenchmarkResult:
    """Sweep result for every loss in ``STABILITY_LOSSES`` trained with ``seed``."""
    cases = synth_dataset(40, STABILITY_DATA)
    return benchmark_losses(cases, stability_config(seed), network=STABILITY_NET, losses=STABILITY_LOSSES, folds=[0])


@dataclass(frozen=True)
class ContextResult:
    seed: int
    cnn_corrupted: float
    cnn_intact: float
    rnn_corrupted: float
    rnn_intact: float

    @property
    def corrupted_gain(self) -> float:
        return self.rnn_corrupted - self.cnn_corrupted

    @property
    def intact_loss(self) -> float:
        return self.cnn_intact - self.rnn_intact


def slice_group_dsc(net, cases: list[Volume], window: int | None = None) -> tuple[float, float]:
    """Mean per-case DSC restricted to corrupted slices, then to intact slices."""
    corrupted, intact = [], []
    for v in cases:
        mask = predict_volume(net, v, window) >= 0.5
        flag = v.corrupted
        if flag.any():
            corrupted.append(dsc(mask[flag], v.labels[flag]))
        if (~flag).any():
            intact.append(dsc(mask[~flag], v.labels[~flag]))
    return float(np.mean(corrupted)), float(np.mean(intact))


def contextual_learning(seed: int) -> ContextResult:
    cfg = context_config(seed)
    cases = prepare_cases(synth_dataset(CONTEXT_TRAIN + CONTEXT_TEST, CONTEXT_DATA), cfg)
    train, test = cases[:CONTEXT_TRAIN], cases[CONTEXT_TRAIN:]
    net, _ = train_cnn(build_network(CONTEXT_NET, seed=seed, dtype=cfg.dtype), train, cfg)
    rnn, _ = finetune_rnn(net, train, cfg)
    c_cnn, i_cnn = slice_group_dsc(net, test)
    c_rnn, i_rnn = slice_group_dsc(rnn, test, cfg.unroll - 1)
    return ContextResult(seed, c_cnn, i_cnn, c_rnn, i_rnn)
