from dataclasses import replace

import numpy as np
import pytest

from jacseg.clstm import SequenceState, run_sequence
from jacseg.data import SynthParams, split_train_val, synth_dataset
from jacseg.metrics import dsc
from jacseg.network import SegNetConfig, build_network
from jacseg.tensor import Tensor
from jacseg.trainer import (
    TrainConfig,
    TrainingDivergence,
    TrainLog,
    Variant,
    benchmark_losses,
    evaluate_cv,
    finetune_rnn,
    model_select,
    predict_volume,
    prepare_cases,
    train_cnn,
)

TINY_NET = SegNetConfig.uniform(2, 1, 4)
TINY_DATA = SynthParams(dims=(4, 16, 16), foreground_fraction=0.08, drift=0.3, seed=3)
QUICK = TrainConfig(lr=0.1, max_epochs=3, patience=2, phase_b_max_epochs=2, rnn_max_epochs=2, batch_size=4)


def _cases(n=6):
    return prepare_cases(synth_dataset(n, TINY_DATA), QUICK)


def _net(seed=0):
    return build_network(TINY_NET, seed=seed)


def _params(net):
    return [p.data.copy() for p in net.parameters()]


def test_config_validation_and_coercion():
    with pytest.raises(ValueError):
        TrainConfig(loss="dice")
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    cfg = TrainConfig.from_mapping(
        {"lr": "0.2", "max_epochs": "7", "normalize": "false", "ds_weights": "0.5,0.5,1", "rnn_lr": "none", "junk": "1"}
    )
    assert cfg.lr == 0.2 and cfg.max_epochs == 7 and cfg.normalize is False
    assert cfg.ds_weights == (0.5, 0.5, 1.0) and cfg.rnn_lr is None
    assert TrainConfig.from_mapping(cfg.to_dict()) == cfg


def test_zero_learning_rate_leaves_parameters_unchanged():
    cases = _cases(4)
    net = _net()
    before = _params(net)
    trained, log = train_cnn(net, cases, TrainConfig(lr=0.0, max_epochs=3, patience=5, batch_size=4))
    assert len(log.records) == 3
    for a, b in zip(before, _params(trained)):
        np.testing.assert_array_equal(a, b)


def test_overfits_a_single_case():
    case = prepare_cases(synth_dataset(1, SynthParams(dims=(4, 16, 16), foreground_fraction=0.1, noise=0.05, seed=9)), QUICK)
    cfg = TrainConfig(lr=0.1, max_epochs=200, patience=200, batch_size=4)
    net, log = train_cnn(build_network(SegNetConfig.uniform(2, 2, 8), seed=1), case, cfg, val_cases=case)
    mask = predict_volume(net, case[0]) >= 0.5
    assert dsc(mask, case[0].labels) > 0.9
    assert max(r.val_dsc for r in log.records) > 0.9


def test_training_is_deterministic():
    cases = _cases(4)
    _, log1 = train_cnn(_net(), cases, QUICK)
    net2, log2 = train_cnn(_net(), cases, QUICK)
    assert log1.to_csv() == log2.to_csv()
    assert log1.to_csv().splitlines()[0] == "phase,epoch,train_loss,val_dsc"


def test_best_snapshot_and_patience():
    cases = _cases(4)
    cfg = TrainConfig(lr=0.1, max_epochs=30, patience=2, batch_size=4)
    net, log = train_cnn(_net(), cases, cfg)
    vals = [r.val_dsc for r in log.records]
    best = int(np.argmax(vals))
    # stopped exactly `patience` epochs after the last improvement, or hit the cap
    assert len(vals) == min(cfg.max_epochs, best + 1 + cfg.patience) or len(vals) == cfg.max_epochs
    _, val = split_train_val(cases, cfg.val_fraction, cfg.seed)
    got = np.mean([dsc(predict_volume(net, v) >= 0.5, v.labels) for v in val])
    assert got == pytest.approx(vals[best], abs=1e-12)


def test_divergence_is_reported():
    cases = _cases(4)
    cases[0].intensities[0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergence) as info:
        train_cnn(_net(), cases, QUICK, val_cases=cases[1:2])
    assert info.value.phase == "cnn" and info.value.epoch == 1


def test_model_select_bookkeeping():
    cases = _cases(6)
    cfg = TrainConfig(lr=0.1, max_epochs=3, patience=3, phase_b_max_epochs=3, batch_size=4, acc_tolerance=1.0)
    net, log = model_select(_net(), cases, cfg)
    phase_a = log.phase("A")
    assert log.acc_t == max(r.train_dsc for r in phase_a)
    assert log.phase("B") == []  # tolerance 1.0: already converged
    assert log.warnings == []
    epochs = [r.epoch for r in phase_a]
    assert epochs == sorted(epochs)


def test_model_select_cap_warning():
    cases = _cases(6)
    cfg = TrainConfig(lr=0.0, max_epochs=1, patience=1, phase_b_max_epochs=2, batch_size=4, acc_tolerance=-1.0)
    _, log = model_select(_net(), cases, cfg)
    assert len(log.phase("B")) == 2
    assert log.warnings and "phase B" in log.warnings[0]


def test_trainlog_acc_t_recorded_once():
    a, b = TrainLog(acc_t=0.5), TrainLog(acc_t=0.6)
    with pytest.raises(ValueError):
        a.extend(b)


def test_finetune_zero_epochs_is_identity():
    cases = _cases(4)
    net, _ = train_cnn(_net(), cases, QUICK)
    rnn, log = finetune_rnn(net, cases, TrainConfig(rnn_max_epochs=0))
    assert log.records == []
    for v in cases:
        np.testing.assert_allclose(predict_volume(rnn, v, 3), predict_volume(net, v), atol=1e-6)


def test_finetune_updates_cnn_and_cell():
    cases = _cases(4)
    net, _ = train_cnn(_net(), cases, QUICK)
    rnn, log = finetune_rnn(net, cases, TrainConfig(rnn_max_epochs=2, patience=5, rnn_lr=0.05, batch_size=4))
    assert len(log.records) == 2 and all(r.phase == "rnn" for r in log.records)
    untouched = finetune_rnn(net, cases, TrainConfig(rnn_max_epochs=0))[0]
    if rnn is not untouched:
        moved = [not np.array_equal(a.data, b.data) for a, b in zip(rnn.parameters(), untouched.parameters())]
        # if validation improved, the returned snapshot is a trained one touching CNN weights too
        if any(moved):
            n_cnn = len(net.parameters())
            assert any(moved[:n_cnn]) and any(moved[n_cnn:])


def test_window_one_is_stateless():
    cases = _cases(4)
    net, _ = train_cnn(_net(), cases, QUICK)
    cfg = TrainConfig(unroll=1, rnn_max_epochs=1, patience=5, rnn_lr=0.05, batch_size=4)
    rnn, _ = finetune_rnn(net, cases, cfg)
    vol = cases[0].intensities
    out = np.stack(run_sequence(rnn, vol, window=0))
    scores = rnn.stacked_scores(Tensor(vol[:, None], dtype=rnn.dtype))
    prob, _ = rnn.step(scores, SequenceState.zeros(vol.shape[0], rnn.cell.hidden_channels, 16, 16, dtype=rnn.dtype))
    np.testing.assert_allclose(out, prob.data[:, 0], atol=1e-12)


def test_evaluate_cv_contract_and_provenance():
    cases = synth_dataset(8, TINY_DATA)
    variants = [Variant("tiny", TINY_NET), Variant("tiny-rnn", TINY_NET, recurrent=True)]
    res = evaluate_cv(cases, QUICK, variants, k=4)
    for name in ("tiny", "tiny-rnn"):
        r = res[name]
        assert len(r.scores) == 8 and r.report.count == 8
        assert sorted(s.case_id for s in r.scores) == sorted(v.case_id for v in cases)
        assert r.leakage() == []
        for f, seen in r.provenance.items():
            held_out = {c for c, g in r.fold_of.items() if g == f}
            assert seen and seen.isdisjoint(held_out)
            assert seen <= set(r.fold_of) - held_out
    shuffled = evaluate_cv(list(reversed(cases)), QUICK, variants[:1], k=4)
    assert shuffled["tiny"].report == res["tiny"].report


def test_evaluate_cv_needs_enough_cases():
    with pytest.raises(ValueError):
        evaluate_cv(synth_dataset(3, TINY_DATA), QUICK, [Variant("t", TINY_NET)], k=4)
    with pytest.raises(ValueError):
        evaluate_cv(synth_dataset(4, TINY_DATA), QUICK, ["jac32"], k=4)


def test_benchmark_contract():
    cases = synth_dataset(8, TINY_DATA)
    res = benchmark_losses(cases, QUICK, network=TINY_NET, folds=[0])
    text = res.to_csv()
    lines = text.splitlines()
    assert lines[0] == "loss,threshold,mean,std,worst,best"
    for loss in ("jaccard", "cross_entropy", "balanced_cross_entropy"):
        assert sum(1 for ln in lines[1:] if ln.split(",")[0] == loss) == 19
        assert 0 <= res.spread(loss) <= 1
        assert res.best_threshold(loss) in res.thresholds
        assert len(res.case_scores[loss]) == 19 * 2


def test_weight_averaging_leaves_the_trajectory_alone():
    cases = _cases(4)
    net, _ = train_cnn(_net(), cases, QUICK)
    plain = TrainConfig(rnn_max_epochs=3, patience=5, rnn_lr=0.05, batch_size=4)
    _, raw = finetune_rnn(net, cases, plain)
    _, avg = finetune_rnn(net, cases, replace(plain, rnn_average=True))
    assert [r.train_loss for r in raw.records] == [r.train_loss for r in avg.records]
    # after one epoch the running mean is the iterate itself
    assert raw.records[0].val_dsc == avg.records[0].val_dsc
    assert TrainConfig.from_mapping({"rnn_average": "true"}).rnn_average is True
