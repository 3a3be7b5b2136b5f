"""Randomized invariants over architectures, densities and seeds."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from ntt import autodiff as ad
from ntt.baselines import random_mask
from ntt.checkpoint import decode_checkpoint, encode_checkpoint
from ntt.masks import kept_counts, select_mask, target_counts
from ntt.network import count_multiply_adds, make_rng, mlp, round_half_up, speedup
from ntt.ntk import empirical_ntk
from ntt.transfer import Teacher, ntt_gradient

sizes = st.lists(st.integers(1, 12), min_size=2, max_size=4)
densities = st.floats(0.01, 1.0, allow_nan=False)
schemes = st.sampled_from(["layerwise", "global"])
seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=60, deadline=None)
@given(sizes, densities, schemes, seeds)
def test_selected_masks_have_exact_counts(layer_sizes, p, scheme, seed):
    net = mlp(layer_sizes)
    scores = make_rng(seed).standard_normal(net.n_params) ** 2
    m = select_mask(net, scores, p, scheme)
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert np.all(m[~net.weight_indicator()] == 1)
    got, want = kept_counts(net, m), target_counts(net, p, scheme)
    assert (got == want) if scheme == "layerwise" else (sum(got.values()) == want)
    assert np.all(select_mask(net, scores, 1.0, scheme) == 1)


@settings(max_examples=60, deadline=None)
@given(sizes, densities, schemes, seeds)
def test_random_masks_have_exact_per_layer_counts(layer_sizes, p, scheme, seed):
    net = mlp(layer_sizes)
    m = random_mask(net, p, scheme, make_rng(seed, "mask"))
    assert kept_counts(net, m) == {b.layer: round_half_up(p * b.size) for b in net.weight_blocks}
    assert np.all(m[~net.weight_indicator()] == 1)


@settings(max_examples=40, deadline=None)
@given(sizes, densities, seeds)
def test_speedup_is_ratio_of_kept_sums(layer_sizes, p, seed):
    net = mlp(layer_sizes)
    m = random_mask(net, p, "layerwise", make_rng(seed))
    sparse = sum(kept_counts(net, m).values())
    assert count_multiply_adds(net, m).total == sparse
    if sparse:
        assert speedup(net, m) == count_multiply_adds(net).total / sparse
    assert speedup(net, net.ones_mask()) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 300), seeds, st.text(max_size=20))
def test_checkpoint_roundtrip(P, seed, name):
    rng = make_rng(seed)
    mask = (rng.random(P) < 0.5).astype(float)
    params = rng.standard_normal(P)
    ck = decode_checkpoint(encode_checkpoint(name, seed, mask, params))
    assert ck.arch == name and ck.seed == seed
    assert ck.params.tobytes() == params.tobytes() and np.array_equal(ck.mask, mask)


@settings(max_examples=20, deadline=None)
@given(sizes, st.integers(1, 5), seeds, densities)
def test_kernel_is_symmetric_psd(layer_sizes, n, seed, p):
    net = mlp(layer_sizes)
    rng = make_rng(seed)
    params = rng.standard_normal(net.n_params)
    m = random_mask(net, p, "layerwise", rng)
    H = empirical_ntk(net, params, m, rng.standard_normal((n, layer_sizes[0])))
    assert np.abs(H - H.T).max() <= 1e-12 * max(1.0, np.abs(H).max())
    lam = np.linalg.eigvalsh(H)
    assert lam.min() >= -1e-8 * max(lam.max(), 1e-300)


@settings(max_examples=20, deadline=None)
@given(sizes, st.integers(1, 4), seeds, densities)
def test_transfer_gradient_vanishes_on_masked_entries(layer_sizes, n, seed, p):
    net = mlp(layer_sizes)
    rng = make_rng(seed)
    t = rng.standard_normal(net.n_params)
    m = random_mask(net, p, "layerwise", rng)
    g = ntt_gradient(Teacher(net, t), t + 0.1 * rng.standard_normal(t.size), m,
                     rng.standard_normal((n, layer_sizes[0])), 0.1)
    assert np.all(g[m == 0] == 0)
    assert np.all(np.isfinite(g))


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 6))
def test_evaluation_is_bit_identical(seed, n):
    net = mlp([4, 5, 3])
    rng = make_rng(seed)
    p = rng.standard_normal(net.n_params)
    x = rng.standard_normal((n, 4))
    a = ad.evaluate(net.graph, p, x)
    assert a.tobytes() == ad.evaluate(net.graph, p, x).tobytes()
