import math

import numpy as np
import pytest

from ntt import autodiff as ad
from ntt.errors import ConfigError
from ntt.masks import kept_counts, magnitude_mask, select_mask, target_counts
from ntt.network import (
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    MaxPool,
    ReLU,
    build,
    count_multiply_adds,
    forward_logits,
    init_glorot,
    init_variance_scaled,
    make_rng,
    mlp,
    preset,
    round_half_up,
    speedup,
)


def test_lenet_300_100_parameter_count():
    net = preset("lenet-300-100")
    assert net.n_params == 266_610
    assert net.n_weights == 266_200
    assert sum(b.size for b in net.bias_blocks) == 410


def test_layout_partitions_parameter_vector():
    for name in ("lenet-300-100", "lenet-5-caffe", "conv-4"):
        net = preset(name)
        pos = 0
        for b in net.layout:
            assert b.start == pos and b.size == int(np.prod(b.shape))
            pos = b.stop
        assert pos == net.n_params


def test_conv4_shapes():
    net = preset("conv-4")
    assert net.shapes[0] == (3, 32, 32)
    assert net.shapes[-1] == (10,)
    convs = [s for s in net.layers if isinstance(s, Conv2D)]
    assert [c.out_ch for c in convs] == [64, 64, 128, 128]
    assert [d.fan_out for d in net.layers if isinstance(d, Dense)] == [512, 10]


def test_shape_mismatch_is_rejected():
    with pytest.raises(ValueError):
        build([Dense(4, 3), ReLU(), Dense(4, 2)], (4,))
    with pytest.raises(ValueError):
        build([Dropout(1.0), Dense(4, 2)], (4,))
    with pytest.raises(ValueError):
        build([Conv2D(3, 3, 1, 2)], (1, 8, 8))  # ends in a feature map


def test_glorot_bound_and_variance():
    net = preset("lenet-300-100")
    p = init_glorot(net, make_rng(0, "init"))
    w = p[net.block(0, "weight").slice]
    a = math.sqrt(6 / 1084)
    assert a == pytest.approx(0.07440, abs=5e-6)
    assert np.abs(w).max() <= a
    assert w.var() == pytest.approx(2 / 1084, rel=0.05)
    assert np.all(p[net.block(0, "bias").slice] == 0)


def test_variance_scaled_init():
    net = mlp([100, 200, 10])
    p = init_variance_scaled(net, make_rng(0, "init"), 0.02)
    w = p[net.block(0, "weight").slice]
    assert 2 / (100 * 0.02) == pytest.approx(1.0)
    assert w.var() == pytest.approx(1.0, rel=0.05)
    with pytest.raises(ValueError):
        init_variance_scaled(net, make_rng(0), 0.0)


def test_rng_streams_are_reproducible_and_distinct():
    a = make_rng(3, "init").random(5)
    assert np.array_equal(a, make_rng(3, "init").random(5))
    assert not np.array_equal(a, make_rng(3, "mask").random(5))
    assert not np.array_equal(a, make_rng(4, "init").random(5))


def _naive_conv(x, W, b, pad):
    n, cin, h, w = x.shape
    cout, _, kh, kw = W.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i:i + kh, j:j + kw]
            out[:, :, i, j] = np.einsum("ncij,ocij->no", patch, W) + b
    return out


def test_conv_and_pool_forward_matches_naive(small_cnn, rng):
    net = small_cnn
    p = rng.standard_normal(net.n_params)
    x = rng.standard_normal((4, 1, 6, 6))
    wb, bb = net.block(0, "weight"), net.block(0, "bias")
    h = np.maximum(_naive_conv(x, p[wb.slice].reshape(wb.shape), p[bb.slice], 1), 0)
    h = h.reshape(4, 3, 3, 2, 3, 2).max(axis=(3, 5)).reshape(4, -1)
    w1, b1 = net.block(4, "weight"), net.block(4, "bias")
    h = np.maximum(h @ p[w1.slice].reshape(w1.shape).T + p[b1.slice], 0)
    w2, b2 = net.block(6, "weight"), net.block(6, "bias")
    expect = h @ p[w2.slice].reshape(w2.shape).T + p[b2.slice]
    np.testing.assert_allclose(forward_logits(net, p, None, x), expect, atol=1e-12)


def test_conv_gradient_matches_finite_differences(small_cnn, rng):
    net = small_cnn
    x = rng.standard_normal((3, 1, 6, 6))
    p = rng.standard_normal(net.n_params) * 0.5
    graph = ad.DiffGraph(lambda q, xx: ad.sum_(ad.square(net.forward(q, xx))))
    g = ad.gradient(graph, p, x)
    eps = 1e-6
    for i in rng.choice(net.n_params, 25, replace=False):
        e = np.zeros_like(p)
        e[i] = eps
        fd = (ad.evaluate(graph, p + e, x) - ad.evaluate(graph, p - e, x)) / (2 * eps)
        assert g[i] == pytest.approx(fd.item(), rel=1e-5, abs=1e-7)


def test_mask_is_applied_multiplicatively(small_mlp, rng):
    p = rng.standard_normal(small_mlp.n_params)
    m = (rng.random(small_mlp.n_params) < 0.5).astype(float)
    m[~small_mlp.weight_indicator()] = 1.0
    x = rng.standard_normal((5, 8))
    np.testing.assert_array_equal(forward_logits(small_mlp, p, m, x), forward_logits(small_mlp, p * m, None, x))
    np.testing.assert_array_equal(
        forward_logits(small_mlp, p, small_mlp.ones_mask(), x), forward_logits(small_mlp, p, None, x)
    )


def test_dropout_only_in_training_mode(rng):
    net = build([Dense(4, 8), ReLU(), Dropout(0.5), Dense(8, 2)], (4,))
    p = rng.standard_normal(net.n_params)
    x = rng.standard_normal((3, 4))
    a = forward_logits(net, p, None, x)
    assert np.array_equal(a, forward_logits(net, p, None, x))
    b = forward_logits(net, p, None, x, training=True, rng=make_rng(0, "dropout"))
    c = forward_logits(net, p, None, x, training=True, rng=make_rng(0, "dropout"))
    assert np.array_equal(b, c) and not np.array_equal(a, b)
    with pytest.raises(ValueError):
        forward_logits(net, p, None, x, training=True)


def test_multiply_adds_and_speedup():
    net = preset("lenet-300-100")
    assert count_multiply_adds(net).total == 784 * 300 + 300 * 100 + 100 * 10 == 266_200
    assert speedup(net, net.ones_mask()) == 1.0
    m = magnitude_mask(net, init_glorot(net, make_rng(0, "init")), 0.03)
    counts = kept_counts(net, m)
    assert count_multiply_adds(net, m).total == sum(counts.values())
    assert speedup(net, m) == 266_200 / sum(counts.values())


def test_conv_multiply_adds_scale_with_output_positions(small_cnn):
    # 3 filters of 3x3x1 on a 6x6 output, plus the two dense layers
    assert count_multiply_adds(small_cnn).total == 27 * 36 + 27 * 4 + 4 * 3


def test_round_half_up():
    assert [round_half_up(v) for v in (0.5, 1.5, 2.5, 2.4999)] == [1, 2, 3, 2]


@pytest.mark.parametrize("scheme", ["layerwise", "global"])
def test_magnitude_mask_counts_and_bias(scheme, rng):
    net = mlp([20, 30, 10, 3])
    p = rng.standard_normal(net.n_params)
    m = magnitude_mask(net, p, 0.1, scheme)
    assert set(np.unique(m)) <= {0.0, 1.0}
    for b in net.bias_blocks:
        assert np.all(m[b.slice] == 1)
    want = target_counts(net, 0.1, scheme)
    got = kept_counts(net, m)
    if scheme == "layerwise":
        assert got == want
    else:
        assert sum(got.values()) == want
        kept = np.abs(p[net.weight_indicator() & (m == 1)])
        dropped = np.abs(p[net.weight_indicator() & (m == 0)])
        assert kept.min() >= dropped.max()


def test_select_mask_ties_prune_lowest_index_first():
    net = mlp([4, 1], bias=False)
    m = select_mask(net, np.ones(4), 0.5, "layerwise")
    np.testing.assert_array_equal(m, [0, 0, 1, 1])


def test_select_mask_rejects_bad_input(small_mlp):
    with pytest.raises(ConfigError):
        select_mask(small_mlp, np.ones(small_mlp.n_params), 0.0)
    with pytest.raises(ConfigError):
        select_mask(small_mlp, np.ones(small_mlp.n_params), 0.5, "blockwise")
    with pytest.raises(ValueError):
        select_mask(small_mlp, np.full(small_mlp.n_params, np.nan), 0.5)
