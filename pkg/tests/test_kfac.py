"""Tests for Kronecker factor estimation, damping, and eigenbases."""

import numpy as np
import pytest

from kfeprune import kfac
from kfeprune.data import Dataset, synth_dataset
from kfeprune.errors import (
    DimensionError,
    SingularityError,
    StateError,
    ValidationError,
)
from kfeprune.layers import ConvLayer, DenseLayer
from kfeprune.network import Network, build_mlp
from kfeprune.oracle import exact_fisher
from kfeprune.tensormath import kron, vec


def random_spd(rng, dim, floor=0.0):
    m = rng.standard_normal((dim, dim))
    return m @ m.T + floor * np.eye(dim)


def single_sample_factors(seed):
    rng = np.random.default_rng(seed)
    net = Network([DenseLayer(rng.standard_normal((3, 4)))])
    ds = Dataset(
        x=rng.standard_normal((1, 3)),
        y=np.array([2]),
        num_classes=4,
        name="one",
    )
    factors = kfac.estimate_factors(net, ds, batch_size=1)
    return net, ds, factors[0]


def test_single_sample_dense_outer_products():
    net, ds, kf = single_sample_factors(0)
    logits = net.forward(ds.x, capture=True)
    net.backward(logits, ds.y)
    tape = net.captures()[0]
    a, g = tape["a"][0], tape["g"][0]
    np.testing.assert_allclose(kf.a, np.outer(a, a), atol=1e-14)
    np.testing.assert_allclose(kf.s, np.outer(g, g), atol=1e-14)
    assert kf.count == 1 and kf.variant == "dense"


def test_single_sample_kron_equals_exact_fisher():
    net, ds, kf = single_sample_factors(1)
    fisher = exact_fisher(net, ds)
    assert np.max(np.abs(kron(kf.s, kf.a) - fisher)) <= 1e-12


def test_constant_activation_rank_one_factor():
    f = kfac.empty_factors(3, 2, "dense")
    a = np.tile(np.array([[1.0, 0.0, 0.0]]), (5, 1))
    g = np.random.default_rng(2).standard_normal((5, 2))
    f = kfac.accumulate_dense(f, a, g)
    expected = np.zeros((3, 3))
    expected[0, 0] = 1.0
    np.testing.assert_allclose(f.a, expected, atol=1e-14)


def test_dense_factor_matches_direct_mean():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((3, 4))
    g = rng.standard_normal((3, 2))
    f = kfac.accumulate_dense(kfac.empty_factors(4, 2, "dense"), a, g)
    ref_a = sum(np.outer(a[i], a[i]) for i in range(3)) / 3
    ref_s = sum(np.outer(g[i], g[i]) for i in range(3)) / 3
    np.testing.assert_allclose(f.a, ref_a, atol=1e-14)
    np.testing.assert_allclose(f.s, ref_s, atol=1e-14)


def test_estimate_factors_batch_invariant():
    ds = synth_dataset("blobs", seed=4, n=30, classes=3, dim=5)
    net = build_mlp(5, [4], 3, seed=0)
    f_big = kfac.estimate_factors(net, ds, batch_size=30)
    f_small = kfac.estimate_factors(net, ds, batch_size=7)
    for lid in f_big:
        np.testing.assert_allclose(f_small[lid].a, f_big[lid].a, atol=1e-13)
        np.testing.assert_allclose(f_small[lid].s, f_big[lid].s, atol=1e-13)
        assert f_small[lid].count == 30


def test_factors_symmetric_psd():
    ds = synth_dataset("blobs", seed=5, n=24, classes=2, dim=3)
    net = build_mlp(3, [5], 2, seed=1)
    for kf in kfac.estimate_factors(net, ds, batch_size=8).values():
        for m in (kf.a, kf.s):
            np.testing.assert_allclose(m, m.T, atol=1e-10)
            eigs = np.linalg.eigvalsh(m)
            assert eigs.min() >= -1e-8 * max(eigs.max(), 1e-30)


def conv_net_and_data(seed, h=4, w=4, c_in=2, c_out=3, k=3, n=2):
    rng = np.random.default_rng(seed)
    conv = ConvLayer(
        rng.standard_normal((c_in * k * k, c_out)), None, c_in=c_in, k=k, stride=1, padding=1
    )
    flat_dim = c_out * h * w
    dense = DenseLayer(rng.standard_normal((flat_dim, 2)) * 0.3)
    from kfeprune.layers import FlattenLayer

    net = Network([conv, FlattenLayer(), dense])
    ds = Dataset(
        x=rng.standard_normal((n, c_in, h, w)),
        y=rng.integers(0, 2, size=n),
        num_classes=2,
        name="convtoy",
    )
    return net, ds


def test_conv_full_factors_match_location_loops():
    net, ds = conv_net_and_data(6)
    factors = kfac.estimate_factors(net, ds, conv_variant="full", batch_size=2)
    logits = net.forward(ds.x, capture=True)
    net.backward(logits, ds.y)
    tape = net.captures()[0]
    patches, g = tape["patches"], tape["g"]
    b, locs, n_dim = patches.shape
    ref_a = np.zeros((n_dim, n_dim))
    ref_s = np.zeros((g.shape[2], g.shape[2]))
    for s in range(b):
        for l in range(locs):
            ref_a += np.outer(patches[s, l], patches[s, l])
            ref_s += np.outer(g[s, l], g[s, l])
    # A sums over locations per sample, S averages over both
    np.testing.assert_allclose(factors[0].a, ref_a / b, atol=1e-12)
    np.testing.assert_allclose(factors[0].s, ref_s / (b * locs), atol=1e-12)


def test_conv_channel_factor_matches_pixel_loop():
    net, ds = conv_net_and_data(7)
    factors = kfac.estimate_factors(net, ds, conv_variant="channel", batch_size=2)
    x = ds.x
    b, c, h, w = x.shape
    ref = np.zeros((c, c))
    for s in range(b):
        for i in range(h):
            for j in range(w):
                ref += np.outer(x[s, :, i, j], x[s, :, i, j])
    np.testing.assert_allclose(factors[0].a, ref / (b * h * w), atol=1e-12)


def test_conv_channel_identical_channels_rank_one():
    rng = np.random.default_rng(8)
    base = rng.standard_normal((2, 1, 3, 3))
    x = np.concatenate([base, base], axis=1)
    g = rng.standard_normal((2, 9, 2))
    f = kfac.accumulate_conv_channel(kfac.empty_factors(2, 2, "conv_channel"), x, g)
    eigs = np.sort(np.linalg.eigvalsh(f.a))
    assert eigs[0] <= 1e-10 * eigs[-1]


def test_one_by_one_conv_reduces_to_dense_accumulation():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((4, 3, 1, 1))
    g = rng.standard_normal((4, 1, 2))
    f_conv = kfac.accumulate_conv(
        kfac.empty_factors(3, 2, "conv_full"), x.reshape(4, 1, 3), g
    )
    f_dense = kfac.accumulate_dense(
        kfac.empty_factors(3, 2, "dense"), x.reshape(4, 3), g.reshape(4, 2)
    )
    np.testing.assert_allclose(f_conv.a, f_dense.a, atol=1e-14)
    np.testing.assert_allclose(f_conv.s, f_dense.s, atol=1e-14)


def test_zero_gradients_give_zero_s():
    rng = np.random.default_rng(10)
    patches = rng.standard_normal((2, 4, 6))
    f = kfac.accumulate_conv(
        kfac.empty_factors(6, 3, "conv_full"), patches, np.zeros((2, 4, 3))
    )
    np.testing.assert_array_equal(f.s, np.zeros((3, 3)))


def test_accumulate_validation():
    f = kfac.empty_factors(3, 2, "dense")
    with pytest.raises(ValidationError):
        kfac.accumulate_conv(f, np.zeros((1, 2, 3)), np.zeros((1, 2, 2)))
    with pytest.raises(DimensionError):
        kfac.accumulate_dense(f, np.zeros((2, 3)), np.zeros((3, 2)))
    fc = kfac.empty_factors(6, 3, "conv_full")
    fc = kfac.accumulate_conv(fc, np.zeros((1, 4, 6)), np.zeros((1, 4, 3)))
    with pytest.raises(DimensionError):
        kfac.accumulate_conv(fc, np.zeros((1, 9, 6)), np.zeros((1, 9, 3)))
    with pytest.raises(ValidationError):
        kfac.KronFactors(np.eye(2), np.eye(2), 0, 1, 1, "bogus")


def test_damp_zero_is_identity():
    rng = np.random.default_rng(11)
    f = kfac.KronFactors(random_spd(rng, 3), random_spd(rng, 2), 4, 1, 1, "dense")
    d = kfac.damp(f, 0.0)
    np.testing.assert_array_equal(d.a, f.a)
    np.testing.assert_array_equal(d.s, f.s)
    with pytest.raises(ValidationError):
        kfac.damp(f, -1.0)


def test_damp_zero_factor_stays_singular():
    f = kfac.KronFactors(np.zeros((3, 3)), np.zeros((2, 2)), 1, 1, 1, "dense")
    d = kfac.damp(f, 1.0)
    np.testing.assert_array_equal(d.a, np.zeros((3, 3)))
    with pytest.raises(SingularityError):
        kfac.inv_psd(d.a)


def test_damp_lifts_smallest_eigenvalue():
    rng = np.random.default_rng(12)
    u = np.linalg.qr(rng.standard_normal((4, 4)))[0]
    a = u @ np.diag([3.0, 1.0, 0.5, 0.0]) @ u.T
    f = kfac.KronFactors(a, np.eye(2), 1, 1, 1, "dense")
    lam = 1e-4
    d = kfac.damp(f, lam)
    shift = np.sqrt(lam) * np.trace(a) / 4
    assert np.linalg.eigvalsh(d.a).min() >= shift - 1e-10


def test_eigenbasis_identity_and_diag():
    f = kfac.KronFactors(np.eye(3), np.eye(2), 1, 1, 1, "dense")
    ef = kfac.eigenbasis(f)
    np.testing.assert_allclose(ef.lam_a, np.ones(3), atol=1e-14)
    np.testing.assert_allclose(ef.lam_s, np.ones(2), atol=1e-14)
    fd = kfac.KronFactors(np.diag([1.0, 5.0, 3.0]), np.diag([2.0, 4.0]), 1, 1, 1, "dense")
    efd = kfac.eigenbasis(fd)
    np.testing.assert_allclose(efd.lam_a, [5.0, 3.0, 1.0], atol=1e-14)
    np.testing.assert_allclose(efd.lam_s, [4.0, 2.0], atol=1e-14)
    # eigenvectors of a diagonal matrix are signed permutation columns
    np.testing.assert_allclose(np.abs(efd.qa), np.eye(3)[:, [1, 2, 0]], atol=1e-14)


def test_eigenbasis_diagonalizes_kron():
    rng = np.random.default_rng(13)
    f = kfac.KronFactors(random_spd(rng, 5), random_spd(rng, 4), 1, 1, 1, "dense")
    ef = kfac.eigenbasis(f)
    big_q = kron(ef.qs, ef.qa)
    rotated = big_q.T @ kron(f.s, f.a) @ big_q
    off = rotated - np.diag(np.diag(rotated))
    assert np.max(np.abs(off)) <= 1e-10
    np.testing.assert_allclose(np.diag(rotated), np.kron(ef.lam_s, ef.lam_a), atol=1e-10)


def test_fisher_vec_identity_and_rank_one():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((3, 2))
    f_id = kfac.KronFactors(np.eye(3), np.eye(2), 1, 1, 1, "dense")
    np.testing.assert_allclose(kfac.fisher_vec(f_id, x), x, atol=1e-14)
    a = rng.standard_normal(3)
    g = rng.standard_normal(2)
    f_r1 = kfac.KronFactors(np.outer(a, a), np.outer(g, g), 1, 1, 1, "dense")
    expected = np.outer(a, g) * (a @ x @ g)
    np.testing.assert_allclose(kfac.fisher_vec(f_r1, x), expected, atol=1e-12)


def test_fisher_vec_matches_kron_matvec():
    rng = np.random.default_rng(15)
    f = kfac.KronFactors(random_spd(rng, 4), random_spd(rng, 3), 1, 1, 1, "dense")
    x = rng.standard_normal((4, 3))
    out = kfac.fisher_vec(f, x)
    np.testing.assert_allclose(vec(out), kron(f.s, f.a) @ vec(x), atol=1e-11)
    with pytest.raises(DimensionError):
        kfac.fisher_vec(f, np.zeros((3, 4)))


def test_inv_psd():
    rng = np.random.default_rng(16)
    m = random_spd(rng, 4, floor=0.5)
    np.testing.assert_allclose(kfac.inv_psd(m) @ m, np.eye(4), atol=1e-10)
    with pytest.raises(SingularityError):
        kfac.inv_psd(np.zeros((3, 3)))


def test_offdiag_ratio():
    assert kfac.offdiag_ratio(np.diag([1.0, 2.0, 3.0])) == 0.0
    np.testing.assert_allclose(
        kfac.offdiag_ratio(np.ones((2, 2))), np.sqrt(2.0) / 2.0, atol=1e-14
    )


def test_estimate_factors_options():
    ds = synth_dataset("blobs", seed=17, n=20, classes=2, dim=3)
    net = build_mlp(3, [4], 2, seed=0)
    subset = kfac.estimate_factors(net, ds, layer_ids=[2], batch_size=5)
    assert list(subset) == [2]
    limited = kfac.estimate_factors(net, ds, batch_size=5, max_batches=2)
    assert limited[0].count == 10
    with pytest.raises(ValidationError):
        kfac.estimate_factors(net, ds, conv_variant="bogus")
    with pytest.raises(StateError):
        kfac.estimate_factors(net, ds, max_batches=0)
