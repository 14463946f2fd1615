import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from i3net import autodiff as ad
from i3net import copm
from i3net.autodiff import ShapeError, Tensor, grad_check
from i3net.copm import RandomProjections, attention_map, fuse, pattern_match_loss


def fixed_proj(r1, r2):
    return RandomProjections(0, 0, r1=np.asarray(r1, float), r2=np.asarray(r2, float))


# ------------------------------------------------------------------ fusion
def test_fuse_worked_example():
    proj = fixed_proj(np.eye(2), [[1.0], [1.0]])
    np.testing.assert_array_equal(fuse([3.0, 2.0], [0.5], proj).data, [1.5, 1.0])


def test_fuse_zero_features():
    proj = RandomProjections(4, 3, 16, np.random.default_rng(0))
    assert not fuse(np.zeros(4), [0.2, 0.3, 0.5], proj).data.any()


def test_fuse_bilinear_in_features():
    proj = RandomProjections(4, 3, 16, np.random.default_rng(0))
    a, p = np.array([0.3, -1.0, 2.0, 0.5]), np.array([0.2, 0.3, 0.5])
    np.testing.assert_array_equal(fuse(2 * a, p, proj).data, 2 * fuse(a, p, proj).data)


def test_fuse_dimension_mismatch():
    proj = RandomProjections(4, 3, 8, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        fuse(np.ones(5), np.ones(3), proj)
    with pytest.raises(ShapeError):
        fuse(np.ones(4), np.ones(2), proj)


def test_projection_entry_statistics():
    proj = RandomProjections(160, 4, 64, np.random.default_rng(3))
    r = proj.r1.ravel()
    assert r.size >= 10_000
    assert abs(r.mean()) < 0.05 and abs(r.var() - 1) < 0.1
    assert np.all(np.abs(r) <= math.sqrt(3))


def test_projection_state_round_trip():
    proj = RandomProjections(8, 4, 16, np.random.default_rng(1))
    back = RandomProjections.from_state(proj.state())
    assert back.r1.tobytes() == proj.r1.tobytes() and back.r2.tobytes() == proj.r2.tobytes()


# ------------------------------------------------------------------ attention
def test_attention_examples():
    assert attention_map(np.array([2.0, -1.0]).reshape(2, 1, 1)).data[0, 0] == 5.0
    assert not attention_map(np.zeros((3, 2, 2))).data.any()
    x = np.random.default_rng(0).normal(size=(4, 3, 3))
    np.testing.assert_array_equal(attention_map(-x).data, attention_map(x).data)


def test_attention_nonnegative():
    rng = np.random.default_rng(9)
    for _ in range(1000):
        assert attention_map(rng.normal(scale=3, size=(5, 2, 3))).data.min() >= 0


# ------------------------------------------------------------------ pattern loss
def test_pattern_loss_examples():
    assert pattern_match_loss([1.0, 0, 0, 0], [0, 1.0, 0, 0]).item() == pytest.approx(2.828427, abs=1e-6)
    f = np.array([0.5, 2.0, 1.0, 0.1])
    assert pattern_match_loss(f, f).item() == 0.0
    assert pattern_match_loss(f, 7 * f).item() == pytest.approx(0.0, abs=1e-15)


def test_pattern_loss_zero_map_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="i3net.copm"):
        assert pattern_match_loss(np.zeros(4), [1.0, 0, 0, 0]).item() == 0.0
    assert "zero-norm" in caplog.text


def test_pattern_loss_length_mismatch():
    with pytest.raises(ShapeError):
        pattern_match_loss(np.ones(4), np.ones(9))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_pattern_loss_scale_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    fs, ft = rng.uniform(0, 5, size=16), rng.uniform(0, 5, size=16)
    base = pattern_match_loss(fs, ft).item()
    assert pattern_match_loss(a * fs, b * ft).item() == pytest.approx(base, abs=1e-12)
    assert 0 <= base <= math.sqrt(2) * 4 + 1e-12


# ------------------------------------------------------------------ pixel adversarial
def test_pixel_loss_at_chance():
    s, t = Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros((1, 1, 3, 3)))
    assert copm.pixel_bce(s, t).item() == pytest.approx(0.693147, abs=1e-6)
    assert copm.pixel_bce(t, s).item() == copm.pixel_bce(s, t).item()


def test_pixel_loss_perfect_discriminator():
    s, t = Tensor(np.full((1, 1, 2, 2), 50.0)), Tensor(np.full((1, 1, 2, 2), -50.0))
    assert copm.pixel_bce(s, t).item() < 1e-20


def test_pixel_discriminator_shape_and_range():
    disc = copm.PixelDiscriminator(6, np.random.default_rng(0))
    out = disc(Tensor(np.random.default_rng(1).normal(size=(2, 6, 5, 4)))).data
    assert out.shape == (2, 1, 5, 4) and np.all((out > 0) & (out < 1))


def test_copm_loss_sum():
    assert copm.copm_loss(Tensor(2.828427), Tensor(0.693147)).item() == pytest.approx(3.521574, abs=1e-12)
    assert copm.copm_loss(Tensor(0.0), Tensor(0.0)).item() == 0.0


# ------------------------------------------------------------------ resampling
def test_bilinear_resize_preserves_constants():
    x = Tensor(np.full((1, 2, 4, 4), 0.25))
    np.testing.assert_allclose(copm.resize_bilinear(x, (8, 8)).data, 0.25, atol=1e-15)


def test_bilinear_interp_rows_sum_to_one():
    for src, dst in [(4, 8), (8, 16), (3, 7), (8, 4)]:
        np.testing.assert_allclose(copm._interp_matrix(src, dst).sum(axis=1), 1.0, atol=1e-15)


# ------------------------------------------------------------------ gradients
def test_pattern_loss_gradient():
    for seed in range(20):
        f_t = np.random.default_rng(seed + 100).uniform(0.1, 2, size=9)
        fs = np.random.default_rng(seed).uniform(0.1, 2, size=9)
        assert grad_check(lambda x: pattern_match_loss(x, f_t), fs) < 1e-4


def test_batch_attention_gradient_through_both_inputs():
    rng = np.random.default_rng(0)
    proj = RandomProjections(3, 2, 8, rng)
    low = Tensor(rng.uniform(0, 1, size=(2, 3, 4, 4)), requires_grad=True)
    logits = Tensor(rng.normal(size=(2, 2, 2, 2)), requires_grad=True)
    ref = rng.uniform(0.5, 1.0, size=16)

    def loss():
        probs = ad.softmax(logits, axis=1)
        return pattern_match_loss(copm.batch_attention(low, probs, proj), ref)

    assert ad.parameters_grad_check(loss, [low, logits]) < 1e-4


def test_pixel_adv_gradient_reversed():
    rng = np.random.default_rng(2)
    disc = copm.PixelDiscriminator(3, rng)
    disc.conv2.weight.data[:] = rng.normal(size=disc.conv2.weight.shape)
    s = Tensor(rng.normal(size=(1, 3, 2, 2)), requires_grad=True)
    t = Tensor(rng.normal(size=(1, 3, 2, 2)), requires_grad=True)
    copm.pixel_adv_loss(s, t, disc).backward()
    rev = s.grad.copy()
    s.grad = None
    copm.pixel_bce(disc.logits(s), disc.logits(t)).backward()
    np.testing.assert_allclose(rev, -s.grad, rtol=1e-12)


# ------------------------------------------------------------------ unbiasedness
def test_random_fusion_inner_product_unbiased():
    rng = np.random.default_rng(42)
    quads = []
    for _ in range(10):
        x, y = rng.uniform(0.2, 1, size=5), rng.uniform(0.2, 1, size=4)
        quads.append((x, x + rng.uniform(0, 0.3, size=5), y, y + rng.uniform(0, 0.3, size=4)))
    draws, fused = 10_000, 64
    acc = np.zeros(10)
    for _ in range(draws):
        proj = RandomProjections(5, 4, fused, rng)
        for q, (x, x2, y, y2) in enumerate(quads):
            acc[q] += fuse(x, y, proj).data @ fuse(x2, y2, proj).data / fused
    for q, (x, x2, y, y2) in enumerate(quads):
        expected = (x @ x2) * (y @ y2)
        assert abs(acc[q] / draws - expected) / expected < 0.05


# ------------------------------------------------------------------ export
def test_pgm_export_round_trip(tmp_path):
    amap = np.array([[0.0, 1.0], [2.0, 4.0]])
    copm.export_pgm(tmp_path / "a.pgm", amap)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n2 2\n255\n")
    np.testing.assert_array_equal(copm.read_pgm(tmp_path / "a.pgm"), [[0, 64], [128, 255]])
