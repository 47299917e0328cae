"""Training protocols: CNN training with model selection, CLSTM fine-tuning,
cross-validated evaluation and the loss/threshold benchmark.

Every gradient step adds the case ids of its slices to the model's
``provenance`` set, which is what the leakage audit in :class:`CVResult`
checks against.
"""

from __future__ import annotations

import copy
import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Sequence

import numpy as np

from . import functional as F
from .clstm import RNNSegNet, attach_clstm, run_sequence
from .data import Volume, make_folds, normalize_intensity, split_train_val
from .losses import LOSSES, deep_supervision_loss
from .metrics import DEFAULT_THRESHOLDS, AggregateReport, CaseScore, aggregate, dsc, jaccard_index, threshold_sweep
from .network import SegNet, SegNetConfig, build_network, jac64_config, jac128_config
from .tensor import SGD, Tensor

__all__ = [
    "TrainConfig",
    "TrainLog",
    "EpochRecord",
    "TrainingDivergence",
    "Variant",
    "VARIANTS",
    "CVResult",
    "BenchmarkResult",
    "prepare_cases",
    "predict_volume",
    "evaluate_cases",
    "train_cnn",
    "model_select",
    "finetune_rnn",
    "evaluate_cv",
    "benchmark_losses",
]

log = logging.getLogger(__name__)


class TrainingDivergence(FloatingPointError):
    def __init__(self, phase: str, epoch: int, detail: str = ""):
        super().__init__(f"training diverged in phase {phase} at epoch {epoch}: {detail}")
        self.phase = phase
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "jaccard"
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 8
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.25
    seed: int = 0
    unroll: int = 4  # slices per recurrent window, current one included
    acc_tolerance: float = 0.005
    phase_b_max_epochs: int = 50
    rnn_max_epochs: int = 50
    rnn_lr: float | None = None
    rnn_average: bool = False  # select among running means of epoch-end weights
    hidden_channels: int = 8
    ds_weights: tuple[float, ...] | None = None
    threshold: float = 0.5
    dtype: str = "float32"
    normalize: bool = True

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.lr < 0 or (self.rnn_lr is not None and self.rnn_lr < 0):
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1 or self.patience < 1 or self.unroll < 1:
            raise ValueError("batch_size, patience and unroll must be >= 1")
        if self.max_epochs < 0 or self.phase_b_max_epochs < 0 or self.rnn_max_epochs < 0:
            raise ValueError("epoch caps must be >= 0")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string or typed values, ignoring unknown keys."""
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in kinds:
                continue
            kwargs[key] = _coerce(kinds[key], raw)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(kind: str, raw):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(raw, list) else raw
    text = raw.strip()
    if "tuple" in kind:
        return None if text.lower() in ("", "none") else tuple(float(x) for x in text.split(","))
    if text.lower() == "none" and "None" in kind:
        return None
    if kind.startswith("bool"):
        return text.lower() in ("1", "true", "yes", "on")
    if kind.startswith("int"):
        return int(text)
    if kind.startswith("float"):
        return float(text)
    return text


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    train_loss: float
    val_dsc: float
    train_dsc: float | None = None


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    acc_t: float | None = None
    warnings: list[str] = field(default_factory=list)

    def add(self, record: EpochRecord) -> None:
        self.records.append(record)

    def phase(self, name: str) -> list[EpochRecord]:
        return [r for r in self.records if r.phase == name]

    def extend(self, other: "TrainLog") -> None:
        self.records.extend(other.records)
        self.warnings.extend(other.warnings)
        if other.acc_t is not None:
            if self.acc_t is not None:
                raise ValueError("Acc_t already recorded")
            self.acc_t = other.acc_t

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phase", "epoch", "train_loss", "val_dsc"])
        for r in self.records:
            w.writerow([r.phase, r.epoch, repr(float(r.train_loss)), repr(float(r.val_dsc))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def prepare_cases(cases: Iterable[Volume], config: TrainConfig) -> list[Volume]:
    """Normalize intensities (if configured) and sort by case id."""
    out = [normalize_intensity(v) if config.normalize else v for v in cases]
    return sorted(out, key=lambda v: v.case_id)


def predict_volume(net, volume: Volume, window: int | None = None) -> np.ndarray:
    """Probability map (depth x H x W) for a volume; RNN nets use sliding windows."""
    if isinstance(net, RNNSegNet):
        w = 3 if window is None else window
        return np.stack(run_sequence(net, volume.intensities, window=w))
    return net.predict(volume.intensities)


def evaluate_cases(net, cases: Sequence[Volume], threshold: float = 0.5, window: int | None = None) -> list[CaseScore]:
    scores = []
    for v in cases:
        mask = predict_volume(net, v, window) >= threshold
        scores.append(CaseScore(v.case_id, dsc(mask, v.labels), jaccard_index(mask, v.labels), threshold))
    return scores


def _mean_dsc(net, cases, config: TrainConfig, window=None) -> float:
    return float(np.mean([s.dsc for s in evaluate_cases(net, cases, config.threshold, window)]))


def _slice_table(cases: Sequence[Volume]) -> list[tuple[int, int]]:
    return [(ci, z) for ci, v in enumerate(cases) for z in range(v.depth)]


def _cnn_epoch(net: SegNet, cases, table, opt: SGD, config: TrainConfig, rng, phase: str, epoch: int) -> float:
    order = rng.permutation(len(table))
    losses = []
    for lo in range(0, len(order), config.batch_size):
        idx = [table[k] for k in order[lo : lo + config.batch_size]]
        images = np.stack([cases[ci].intensities[z] for ci, z in idx])[:, None]
        targets = np.stack([cases[ci].labels[z] for ci, z in idx])[:, None]
        try:
            sides, fused = net.forward(Tensor(images, dtype=net.dtype), training=True)
            res = deep_supervision_loss(sides, fused, targets, config.loss, config.ds_weights)
            opt.zero_grad()
            res.backward()
            opt.step()
        except FloatingPointError as exc:
            raise TrainingDivergence(phase, epoch, str(exc)) from exc
        if not np.isfinite(res.value):
            raise TrainingDivergence(phase, epoch, "non-finite loss")
        net.provenance.update(cases[ci].case_id for ci, _ in idx)
        losses.append(res.value)
    return float(np.mean(losses)) if losses else 0.0


def train_cnn(
    net: SegNet,
    cases: Sequence[Volume],
    config: TrainConfig,
    val_cases: Sequence[Volume] | None = None,
    phase: str = "cnn",
    track_train_dsc: bool = False,
) -> tuple[SegNet, TrainLog]:
    """SGD with deep supervision and patience-based early stopping on validation DSC.

    When ``val_cases`` is omitted, ``cases`` is split by ``config.val_fraction``.
    Returns the best-validation snapshot. ``cases`` are used as given, so
    normalize them first (see :func:`prepare_cases`).
    """
    if not cases:
        raise ValueError("train_cnn needs at least one training case")
    if val_cases is None:
        cases, val_cases = split_train_val(cases, config.val_fraction, config.seed)
    cases = sorted(cases, key=lambda v: v.case_id)
    rng = np.random.default_rng([config.seed, _phase_key(phase)])
    opt = SGD(net.parameters(), config.lr, config.momentum)
    table = _slice_table(cases)
    tlog = TrainLog()
    best, best_dsc, stale = copy.deepcopy(net), -np.inf, 0
    for epoch in range(1, config.max_epochs + 1):
        loss = _cnn_epoch(net, cases, table, opt, config, rng, phase, epoch)
        val = _mean_dsc(net, val_cases, config)
        train_dsc = _mean_dsc(net, cases, config) if track_train_dsc else None
        tlog.add(EpochRecord(phase, epoch, loss, val, train_dsc))
        log.debug("%s epoch %d loss %.4f val %.4f", phase, epoch, loss, val)
        if val > best_dsc:
            best, best_dsc, stale = copy.deepcopy(net), val, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best, tlog


def _phase_key(phase: str) -> int:
    return sum(ord(c) * 31**i for i, c in enumerate(phase)) % (2**31)


def model_select(net: SegNet, cases: Sequence[Volume], config: TrainConfig) -> tuple[SegNet, TrainLog]:
    """Two-stage protocol on the training folds.

    Stage A trains on a training subset with early stopping on the held-out
    validation subset and records Acc_t, the best training-subset DSC across
    its epochs. Stage B continues on training + validation until validation
    DSC reaches ``Acc_t - acc_tolerance`` or ``phase_b_max_epochs`` runs out.
    """
    train, val = split_train_val(cases, config.val_fraction, config.seed)
    net, tlog = train_cnn(net, train, config, val_cases=val, phase="A", track_train_dsc=True)
    tlog.acc_t = max((r.train_dsc for r in tlog.records), default=0.0)
    target = tlog.acc_t - config.acc_tolerance

    combined = sorted(list(train) + list(val), key=lambda v: v.case_id)
    table = _slice_table(combined)
    rng = np.random.default_rng([config.seed, _phase_key("B")])
    opt = SGD(net.parameters(), config.lr, config.momentum)
    val_dsc = _mean_dsc(net, val, config)
    best, best_dsc = copy.deepcopy(net), val_dsc
    converged = val_dsc >= target
    epoch = 0
    while not converged and epoch < config.phase_b_max_epochs:
        epoch += 1
        loss = _cnn_epoch(net, combined, table, opt, config, rng, "B", epoch)
        val_dsc = _mean_dsc(net, val, config)
        tlog.add(EpochRecord("B", epoch, loss, val_dsc))
        if val_dsc > best_dsc:
            best, best_dsc = copy.deepcopy(net), val_dsc
        converged = val_dsc >= target
    if converged:
        return net, tlog
    tlog.warnings.append(
        f"phase B reached {config.phase_b_max_epochs} epochs without validation DSC reaching Acc_t - tol = {target:.4f}"
    )
    return best, tlog


def _windows(cases: Sequence[Volume], length: int) -> list[tuple[int, int]]:
    return [(ci, t) for ci, v in enumerate(cases) for t in range(v.depth)]


def _rnn_epoch(net: RNNSegNet, cases, table, opt: SGD, config: TrainConfig, rng, epoch: int) -> float:
    length = config.unroll
    order = rng.permutation(len(table))
    losses = []
    for lo in range(0, len(order), config.batch_size):
        idx = [table[k] for k in order[lo : lo + config.batch_size]]
        b = len(idx)
        srcs = [[t - (length - 1) + j for ci, t in idx] for j in range(length)]
        images = np.stack(
            [cases[ci].intensities[max(src, 0)] for j in range(length) for (ci, _), src in zip(idx, srcs[j])]
        )[:, None]
        targets = np.stack([cases[ci].labels[t] for ci, t in idx])[:, None]
        try:
            stacked = net.stacked_scores(Tensor(images, dtype=net.dtype), training=False)
            steps = [F.slice_axis(stacked, 0, j * b, (j + 1) * b) for j in range(length)]
            valid = [np.asarray(s) >= 0 for s in srcs]
            prob = net.unroll(steps, valid)
            res = LOSSES[config.loss](prob, targets)
            opt.zero_grad()
            res.backward()
            opt.step()
        except FloatingPointError as exc:
            raise TrainingDivergence("rnn", epoch, str(exc)) from exc
        # every slice of the window fed the step, including the preceding ones
        net.provenance.update(cases[ci].case_id for ci, _ in idx)
        losses.append(res.value)
    return float(np.mean(losses)) if losses else 0.0


def finetune_rnn(
    net: SegNet, cases: Sequence[Volume], config: TrainConfig, val_cases: Sequence[Volume] | None = None
) -> tuple[RNNSegNet, TrainLog]:
    """Attach a CLSTM to a trained SegNet and fine-tune end to end over slice windows.

    Each training example is one slice plus its ``unroll - 1`` predecessors,
    unrolled from a zero state (truncated backprop through time); the loss is
    taken on the last slice of the window. Batch-norm statistics stay frozen
    while all weights, CNN included, are updated.

    With ``config.rnn_average`` the candidate after epoch e is the mean of
    the epoch-end weights of epochs 1..e rather than the raw iterate, which
    damps the epoch-to-epoch swing of SGD with momentum. Either way the
    returned model is the best candidate on validation DSC, the untouched
    attachment included.
    """
    if not cases:
        raise ValueError("finetune_rnn needs at least one training case")
    if val_cases is None:
        cases, val_cases = split_train_val(cases, config.val_fraction, config.seed)
    cases = sorted(cases, key=lambda v: v.case_id)
    rnn = attach_clstm(net, config.hidden_channels, seed=config.seed)
    window = config.unroll - 1
    tlog = TrainLog()
    if config.rnn_max_epochs == 0:
        return rnn, tlog
    lr = config.lr if config.rnn_lr is None else config.rnn_lr
    opt = SGD(rnn.parameters(), lr, config.momentum)
    rng = np.random.default_rng([config.seed, _phase_key("rnn")])
    table = _windows(cases, config.unroll)
    best, best_dsc, stale = copy.deepcopy(rnn), _mean_dsc(rnn, val_cases, config, window), 0
    running = None
    for epoch in range(1, config.rnn_max_epochs + 1):
        loss = _rnn_epoch(rnn, cases, table, opt, config, rng, epoch)
        candidate = rnn
        if config.rnn_average:
            weights = [p.data for p in rnn.parameters()]
            if running is None:
                running = [w.astype(np.float64) for w in weights]
            else:
                for r, w in zip(running, weights):
                    r += (w - r) / epoch
            candidate = copy.deepcopy(rnn)
            for p, r in zip(candidate.parameters(), running):
                p.data[...] = r
        val = _mean_dsc(candidate, val_cases, config, window)
        tlog.add(EpochRecord("rnn", epoch, loss, val))
        if val > best_dsc:
            best, best_dsc, stale = copy.deepcopy(candidate), val, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best, tlog


@dataclass(frozen=True)
class Variant:
    name: str
    network: SegNetConfig
    recurrent: bool = False


VARIANTS = {
    "jac64": Variant("jac64", jac64_config(), False),
    "jac128": Variant("jac128", jac128_config(), False),
    "rnn64": Variant("rnn64", jac64_config(), True),
    "rnn128": Variant("rnn128", jac128_config(), True),
}


def _variant(v) -> Variant:
    if isinstance(v, Variant):
        return v
    try:
        return VARIANTS[v]
    except KeyError:
        raise ValueError(f"unknown variant {v!r}; expected one of {sorted(VARIANTS)}") from None


@dataclass
class CVResult:
    variant: str
    scores: list[CaseScore]
    report: AggregateReport
    fold_of: dict[str, int]
    provenance: dict[int, set]
    logs: dict[int, TrainLog]

    def leakage(self) -> list[str]:
        """Held-out cases whose slices entered a gradient step of the model that scored them."""
        return sorted(c for c, f in self.fold_of.items() if c in self.provenance[f])


def evaluate_cv(
    cases: Sequence[Volume],
    config: TrainConfig,
    variants: Sequence = ("jac64",),
    k: int = 4,
    folds: Sequence[int] | None = None,
) -> dict[str, CVResult]:
    """k-fold evaluation of each variant at ``config.threshold``.

    For every fold the remaining folds go through :func:`model_select`;
    recurrent variants are then fine-tuned with :func:`finetune_rnn` starting
    from the matching non-recurrent model of the same fold.
    """
    cases = prepare_cases(cases, config)
    if len(cases) < k:
        raise ValueError(f"need at least {k} cases for {k}-fold CV, got {len(cases)}")
    plan = make_folds([v.case_id for v in cases], k, config.seed)
    by_id = {v.case_id: v for v in cases}
    fold_ids = list(range(k)) if folds is None else list(folds)
    variants = [_variant(v) for v in variants]
    dtype = np.dtype(config.dtype)
    cnn_cache: dict[tuple, tuple[SegNet, TrainLog]] = {}
    results = {}
    for var in variants:
        scores, provenance, logs, fold_of = [], {}, {}, {}
        for f in fold_ids:
            train = [by_id[c] for c in plan.train_cases(f)]
            test = [by_id[c] for c in plan.fold_cases(f)]
            key = (f, var.network)
            if key not in cnn_cache:
                net = build_network(var.network, seed=config.seed, dtype=dtype)
                cnn_cache[key] = model_select(net, train, config)
            model, flog = cnn_cache[key]
            flog = copy.deepcopy(flog)
            if var.recurrent:
                model, rlog = finetune_rnn(model, train, config)
                flog.extend(rlog)
            window = config.unroll - 1 if var.recurrent else None
            scores.extend(evaluate_cases(model, test, config.threshold, window))
            provenance[f] = set(model.provenance)
            logs[f] = flog
            fold_of.update({v.case_id: f for v in test})
        results[var.name] = CVResult(var.name, scores, aggregate(scores), fold_of, provenance, logs)
    return results


@dataclass
class BenchmarkResult:
    thresholds: tuple[float, ...]
    case_scores: dict[str, list[CaseScore]]

    def curve(self, loss: str) -> list[tuple[float, AggregateReport]]:
        rows = []
        for t in self.thresholds:
            at_t = [s for s in self.case_scores[loss] if s.threshold == t]
            rows.append((t, aggregate(at_t)))
        return rows

    def spread(self, loss: str) -> float:
        means = [r.dsc.mean for _, r in self.curve(loss)]
        return max(means) - min(means)

    def best_threshold(self, loss: str) -> float:
        curve = self.curve(loss)
        return max(curve, key=lambda row: row[1].dsc.mean)[0]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["loss", "threshold", "mean", "std", "worst", "best"])
        for loss in self.case_scores:
            for t, rep in self.curve(loss):
                m = rep.dsc
                w.writerow([loss, repr(t), repr(m.mean), repr(m.std), repr(m.worst), repr(m.best)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def benchmark_losses(
    cases: Sequence[Volume],
    config: TrainConfig,
    network: SegNetConfig | None = None,
    losses: Sequence[str] = ("jaccard", "cross_entropy", "balanced_cross_entropy"),
    k: int = 4,
    folds: Sequence[int] | None = None,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> BenchmarkResult:
    """Train one model per loss on each CV fold and sweep binarization thresholds.

    ``folds`` restricts which held-out folds are run (all ``k`` by default).
    """
    network = network or jac64_config()
    cases = prepare_cases(cases, config)
    plan = make_folds([v.case_id for v in cases], k, config.seed)
    by_id = {v.case_id: v for v in cases}
    fold_ids = list(range(k)) if folds is None else list(folds)
    out: dict[str, list[CaseScore]] = {}
    for loss in losses:
        cfg = replace(config, loss=loss)
        scores = []
        for f in fold_ids:
            train = [by_id[c] for c in plan.train_cases(f)]
            test = [by_id[c] for c in plan.fold_cases(f)]
            net = build_network(network, seed=cfg.seed, dtype=np.dtype(cfg.dtype))
            net, _ = model_select(net, train, cfg)
            for v in test:
                scores.extend(threshold_sweep(predict_volume(net, v), v.labels, thresholds, case_id=v.case_id))
        out[loss] = scores
    return BenchmarkResult(tuple(thresholds), out)
