import time
from types import SimpleNamespace

import numpy as np
import pytest

from jacseg import functional as F
from jacseg.losses import deep_supervision_loss
from jacseg.network import (
    ScaleBlockConfig,
    SegNetConfig,
    build_network,
    count_parameters,
    jac64_config,
    jac128_config,
    parameter_tally,
)
from jacseg.tensor import Tensor

from fdcheck import max_abs_error, numeric_grad, rel_error


def _close(analytic, numeric, tol=1e-4):
    # biases feeding batch norm have an exactly zero gradient; compare those absolutely
    return rel_error(analytic, numeric) < tol or max_abs_error(analytic, numeric) < 1e-6


def hand_tally(scales, cbr_per_block, channels, k=3, cin=1):
    """Closed-form count for a uniform topology, written out term by term.

    first conv: c*cin*k*k + c; remaining convs: c*c*k*k + c; every BN: 2c;
    every head: c + 1; fusion: scales + 1.
    """
    c = channels
    convs = scales * cbr_per_block
    return (
        (c * cin * k * k + c)
        + (convs - 1) * (c * c * k * k + c)
        + convs * 2 * c
        + scales * (c + 1)
        + (scales + 1)
    )


def test_jac64_budget():
    t = time.perf_counter()
    n = count_parameters(build_network(jac64_config(), seed=0))
    assert n < 3_000_000
    assert n == hand_tally(5, 4, 64) == 705_163
    assert time.perf_counter() - t < 1.0


def test_jac128_matches_hand_tally():
    net = build_network(jac128_config(), seed=0, dtype=np.float32)
    assert count_parameters(net) == hand_tally(5, 4, 128) == 2_811_147
    assert sum(n for _, n in parameter_tally(jac128_config())) == count_parameters(net)


def test_tally_rows_match_parameters():
    cfg = SegNetConfig.uniform(2, 2, 3)
    net = build_network(cfg)
    by_layer = {}
    for name, p in net.named_parameters():
        stem = name.rsplit(".", 1)[0]
        by_layer[stem] = by_layer.get(stem, 0) + p.data.size
    rows = dict(parameter_tally(cfg))
    # parameter names are <layer>.weight/bias or <layer>.gamma/beta
    assert by_layer == rows


def test_interior_kernels_scale_by_four():
    t64 = dict(parameter_tally(jac64_config()))
    t128 = dict(parameter_tally(jac128_config()))
    k = 3
    for name in t64:
        if name.endswith(".conv") and name != "scale0.cbr0.conv":
            assert t128[name] - 128 == 4 * (t64[name] - 64) == 128 * 128 * k * k


def test_single_conv_count():
    kernel = Tensor(np.zeros((1, 1, 3, 3)), requires_grad=True)
    bias = Tensor(np.zeros(1), requires_grad=True)
    assert count_parameters(SimpleNamespace(parameters=lambda: [kernel, bias])) == 10


def test_shapes_and_range():
    net = build_network(SegNetConfig.uniform(1, 1, 4), seed=0)
    sides, fused = net.forward(Tensor(np.random.default_rng(0).standard_normal((1, 1, 16, 16))))
    assert fused.shape == (1, 1, 16, 16) and len(sides) == 1
    net5 = build_network(SegNetConfig.uniform(5, 1, 2), seed=0)
    x = Tensor(10 * np.random.default_rng(1).standard_normal((2, 1, 64, 64)))
    sides, fused = net5.forward(x)
    assert len(sides) == 5
    for m in sides + [fused]:
        assert m.shape == (2, 1, 64, 64)
        assert m.data.min() >= 0 and m.data.max() <= 1


def test_bad_inputs():
    net = build_network(SegNetConfig.uniform(3, 1, 2), seed=0)
    with pytest.raises(ValueError, match="divisible"):
        net.forward(Tensor(np.zeros((1, 1, 10, 12))))
    with pytest.raises(ValueError):
        net.forward(Tensor(np.zeros((1, 2, 8, 8))))
    with pytest.raises(ValueError):
        ScaleBlockConfig(0, 4)
    with pytest.raises(ValueError):
        SegNetConfig((), 64)


def test_seed_determinism():
    a = build_network(jac64_config(), seed=3)
    b = build_network(jac64_config(), seed=3)
    c = build_network(jac64_config(), seed=4)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    assert not all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))


def test_inference_is_pure():
    net = build_network(SegNetConfig.uniform(2, 2, 4), seed=0)
    x = np.random.default_rng(2).standard_normal((3, 1, 8, 8))
    y1 = net.forward(Tensor(x))[1].data
    y2 = net.forward(Tensor(x))[1].data
    np.testing.assert_array_equal(y1, y2)
    np.testing.assert_array_equal(net.predict(x[:, 0]), y1[:, 0])


def test_training_updates_running_stats_only_in_training():
    net = build_network(SegNetConfig.uniform(1, 1, 2), seed=0)
    x = Tensor(np.random.default_rng(3).standard_normal((2, 1, 4, 4)) + 3)
    bn = net.batchnorms()[0]
    before = bn.running_mean.copy()
    net.forward(x, training=False)
    np.testing.assert_array_equal(bn.running_mean, before)
    net.forward(x, training=True)
    assert not np.array_equal(bn.running_mean, before)


def test_aux_heads_are_not_structural():
    with_heads = build_network(SegNetConfig.uniform(3, 1, 3, has_aux_head=True), seed=1)
    without = build_network(SegNetConfig.uniform(3, 1, 3, has_aux_head=False), seed=1)
    x = Tensor(np.random.default_rng(4).standard_normal((1, 1, 8, 8)))
    s1, f1 = with_heads.forward(x)
    s2, f2 = without.forward(x)
    assert len(s1) == 3 and len(s2) == 0
    assert f1.shape == f2.shape
    np.testing.assert_array_equal(f1.data, f2.data)
    assert count_parameters(with_heads) == count_parameters(without)


def test_fusion_initialized_to_average():
    net = build_network(SegNetConfig.uniform(4, 1, 2), seed=0)
    np.testing.assert_array_equal(net.fusion_kernel.data.ravel(), 0.25)
    x = Tensor(np.random.default_rng(5).standard_normal((1, 1, 8, 8)))
    scores = net.scores(x)
    avg = np.mean([s.data for s in scores], axis=0)
    np.testing.assert_allclose(net.fuse(scores).data, avg, rtol=1e-12, atol=1e-14)


def test_sum_of_outputs_gradient_matches_finite_differences():
    net = build_network(SegNetConfig.uniform(2, 1, 2), seed=0)
    x = Tensor(np.random.default_rng(6).standard_normal((2, 1, 8, 8)))

    def total():
        sides, fused = net.forward(x, training=True)
        return sum(float(s.data.sum()) for s in sides) + float(fused.data.sum())

    sides, fused = net.forward(x, training=True)
    out = F.sum(fused)
    for s in sides:
        out = out + F.sum(s)
    out.backward()
    rng = np.random.default_rng(7)
    for p in net.parameters():
        idx = rng.choice(p.data.size, size=min(3, p.data.size), replace=False)
        num = numeric_grad(total, p.data, indices=idx)
        assert _close(p.grad, num), p.name


def test_deep_supervision_gradient_matches_finite_differences():
    net = build_network(SegNetConfig.uniform(2, 1, 2), seed=1)
    rng = np.random.default_rng(8)
    x = Tensor(rng.standard_normal((2, 1, 16, 16)))
    target = (rng.random((2, 1, 16, 16)) < 0.2).astype(int)

    def loss():
        sides, fused = net.forward(x, training=True)
        return deep_supervision_loss(sides, fused, target, "jaccard").value

    sides, fused = net.forward(x, training=True)
    deep_supervision_loss(sides, fused, target, "jaccard").backward()
    for p in net.parameters():
        idx = rng.choice(p.data.size, size=min(4, p.data.size), replace=False)
        assert _close(p.grad, numeric_grad(loss, p.data, indices=idx)), p.name


def test_state_arrays_round_trip():
    a = build_network(SegNetConfig.uniform(2, 2, 3), seed=0)
    a.forward(Tensor(np.random.default_rng(9).standard_normal((2, 1, 4, 4))), training=True)
    b = build_network(SegNetConfig.uniform(2, 2, 3), seed=5)
    b.load_state_arrays(dict(a.state_arrays()))
    for (n1, x1), (n2, x2) in zip(a.state_arrays(), b.state_arrays()):
        assert n1 == n2
        np.testing.assert_array_equal(x1, x2)
    with pytest.raises(KeyError):
        b.load_state_arrays({})


def test_config_dict_round_trip():
    cfg = jac64_config()
    assert SegNetConfig.from_dict(cfg.to_dict()) == cfg
