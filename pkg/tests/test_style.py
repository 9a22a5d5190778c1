import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fsrlab.gradcheck import gradcheck
from fsrlab.style import adain, channel_stats, instance_norm, normalized_content
from fsrlab.tensor import ShapeError, Tensor

maps = st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(2, 6), st.integers(2, 6), st.integers(0, 2**31))


def random_map(spec):
    n, c, h, w, seed = spec
    rng = np.random.default_rng(seed)
    # per-channel scale and shift keep channels well away from constant
    return rng.uniform(-2, 2, (n, c, h, w)) * rng.uniform(0.5, 3, (1, c, 1, 1)) + rng.uniform(-3, 3, (1, c, 1, 1)), rng


def test_stats_hand_case():
    st_ = channel_stats(Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2)), eps=0.0)
    assert st_.mu.item() == 4.0
    assert np.isclose(st_.sigma.item(), np.sqrt(5.0), rtol=0, atol=1e-15)


def test_constant_map_sigma_is_sqrt_eps():
    st_ = channel_stats(Tensor(np.full((2, 3, 4, 4), 2.5)), eps=1e-6)
    assert np.allclose(st_.mu.data, 2.5)
    assert np.allclose(st_.sigma.data, 1e-3, rtol=1e-12)


@given(maps)
def test_stats_match_numpy_and_ignore_spatial_order(spec):
    f, rng = random_map(spec)
    st_ = channel_stats(Tensor(f))
    assert np.allclose(st_.mu.data, f.mean(axis=(2, 3)), atol=1e-12)
    assert np.allclose(st_.sigma.data, np.sqrt(f.var(axis=(2, 3)) + 1e-6), atol=1e-12)
    n, c, h, w = f.shape
    perm = rng.permutation(h * w)
    g = f.reshape(n, c, -1)[:, :, perm].reshape(f.shape)
    st2 = channel_stats(Tensor(g))
    assert np.allclose(st_.mu.data, st2.mu.data, atol=1e-12)
    assert np.allclose(st_.sigma.data, st2.sigma.data, atol=1e-12)
    assert np.all(st_.sigma.data >= np.sqrt(1e-6))


def test_instance_norm_standardizes(rng):
    f = rng.uniform(-2, 2, (3, 4, 8, 8)) * 5 + 2
    out = instance_norm(Tensor(f), np.ones(4), np.zeros(4))
    st_ = channel_stats(out, eps=0.0)
    assert np.allclose(st_.mu.data, 0.0, atol=1e-4)
    assert np.allclose(st_.sigma.data, 1.0, atol=1e-4)


def test_instance_norm_zero_gamma_gives_beta(rng):
    beta = np.array([1.0, -2.0, 0.5])
    out = instance_norm(Tensor(rng.standard_normal((2, 3, 4, 4))), np.zeros(3), beta)
    assert np.array_equal(out.data, np.broadcast_to(beta.reshape(1, 3, 1, 1), (2, 3, 4, 4)))


def test_instance_norm_idempotent(rng):
    f = Tensor(rng.uniform(-2, 2, (2, 3, 5, 5)) * 4)
    once = instance_norm(f, np.ones(3), np.zeros(3), eps=0.0)
    twice = instance_norm(once, np.ones(3), np.zeros(3), eps=0.0)
    assert np.max(np.abs(once.data - twice.data)) <= 1e-9


@given(maps)
def test_adain_identity(spec):
    f, _ = random_map(spec)
    st_ = channel_stats(Tensor(f))
    out = adain(Tensor(f), st_.mu, st_.sigma)
    assert np.max(np.abs(out.data - f)) <= 1e-9


def test_adain_zero_one_standardizes(rng):
    f = Tensor(rng.uniform(-2, 2, (2, 3, 6, 6)) * 3)
    st_ = channel_stats(adain(f, np.zeros(3), np.ones(3)), eps=0.0)
    assert np.allclose(st_.mu.data, 0.0, atol=1e-12)
    assert np.allclose(st_.sigma.data, 1.0, atol=1e-6)


@given(maps)
def test_adain_output_stats_exact_formula(spec):
    f, rng = random_map(spec)
    n, c = f.shape[:2]
    mu, sig = rng.uniform(-3, 3, (n, c)), rng.uniform(0.2, 3, (n, c))
    st_ = channel_stats(adain(Tensor(f), mu, sig), eps=0.0)
    var = f.var(axis=(2, 3))
    assert np.allclose(st_.mu.data, mu, rtol=0, atol=1e-9)
    # the eps inside adain shrinks the output spread by sqrt(var / (var + eps))
    assert np.allclose(st_.sigma.data, sig * np.sqrt(var / (var + 1e-6)), rtol=1e-12)


@given(st.integers(0, 2**31))
def test_adain_hits_target_stats(seed):
    rng = np.random.default_rng(seed)
    f = rng.uniform(-2, 2, (4, 8, 8, 8)) * rng.uniform(1, 3, (1, 8, 1, 1))
    mu, sig = rng.uniform(-3, 3, (4, 8)), rng.uniform(0.2, 3, (4, 8))
    st_ = channel_stats(adain(Tensor(f), mu, sig), eps=0.0)
    assert np.allclose(st_.mu.data, mu, rtol=1e-6, atol=1e-9)
    assert np.allclose(st_.sigma.data, sig, rtol=1e-6, atol=0)


@given(maps)
def test_adain_preserves_content(spec):
    f, rng = random_map(spec)
    n, c = f.shape[:2]
    g = adain(Tensor(f), rng.uniform(-3, 3, (n, c)), rng.uniform(0.2, 3, (n, c)))
    before = normalized_content(Tensor(f), eps=0.0).data
    after = normalized_content(g, eps=0.0).data
    assert np.max(np.abs(before - after)) <= 1e-9


@given(maps)
def test_adain_idempotent(spec):
    f, rng = random_map(spec)
    c = f.shape[1]
    mu, sig = rng.uniform(-3, 3, c), rng.uniform(0.2, 3, c)
    once = adain(Tensor(f), mu, sig, eps=0.0)
    twice = adain(once, mu, sig, eps=0.0)
    assert np.max(np.abs(once.data - twice.data)) <= 1e-9


def test_per_channel_target_broadcasts_over_batch(rng):
    f = Tensor(rng.standard_normal((3, 2, 4, 4)))
    mu, sig = np.array([1.0, -1.0]), np.array([2.0, 0.5])
    a = adain(f, mu, sig)
    b = adain(f, np.tile(mu, (3, 1)), np.tile(sig, (3, 1)))
    assert np.array_equal(a.data, b.data)


def test_adain_rejects_bad_targets(rng):
    f = Tensor(rng.standard_normal((2, 3, 4, 4)))
    with pytest.raises(ValueError):
        adain(f, np.zeros(3), -np.ones(3))
    with pytest.raises(ShapeError):
        adain(f, np.zeros(4), np.ones(4))
    with pytest.raises(ShapeError):
        channel_stats(Tensor(np.zeros((3, 4))))


def test_channel_stats_gradient(rng):
    f = Tensor(rng.uniform(-2, 2, (2, 3, 4, 4)), requires_grad=True, name="f")
    m1, m2 = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))

    def loss():
        s = channel_stats(f)
        return (s.mu * m1).sum() + (s.sigma * m2).sum()
    rep = gradcheck(loss, [f])
    assert rep.passed, rep.summary()
