import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from promptdepth import gradcore as gc
from promptdepth import losses
from promptdepth.gradcore import Tensor
from promptdepth.synthscene import Intrinsics


def rays(h=16, w=16, f=16.0):
    return Intrinsics(height=h, width=w, fx=f, fy=f, cx=w / 2, cy=h / 2).rays().astype(np.float32)


# ---------------------------------------------------------------- disparity to depth


def test_disparity_endpoints_and_midpoint():
    d = np.array([[0.0, 0.5], [1.0, 0.25]], dtype=np.float32)
    out = losses.disparity_to_depth(d).data
    assert out[1, 0] == 1.0  # max disparity
    assert out[0, 0] == 20.0  # min disparity: 1 / 0.05
    assert out[0, 1] == 2.0  # midpoint
    assert out[1, 1] == 4.0


def test_disparity_is_shift_and_scale_free():
    rng = np.random.default_rng(0)
    d = rng.uniform(-3, 7, size=(8, 8)).astype(np.float32)
    a = losses.disparity_to_depth(d).data
    b = losses.disparity_to_depth(d * 2.0 + 5.0).data
    np.testing.assert_allclose(a, b, rtol=1e-5)


def test_constant_disparity_falls_back_to_twenty():
    with pytest.warns(losses.DegenerateDisparityWarning):
        out = losses.disparity_to_depth(np.full((4, 4), 3.0)).data
    np.testing.assert_array_equal(out, np.full((4, 4), 20.0))


def test_disparity_fg_mask_restricts_min_max():
    d = np.array([[0.0, 1.0, 2.0, 10.0]], dtype=np.float32)
    fg = np.array([[False, True, True, False]])
    out = losses.disparity_to_depth(d, fg).data
    assert out[0, 1] == 20.0 and out[0, 2] == 1.0


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, (3, 5), elements=st.floats(-100, 100, width=32)))
def test_disparity_monotone_and_bounded(d):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", losses.DegenerateDisparityWarning)
        out = losses.disparity_to_depth(d).data
    assert out.min() >= 1.0 and out.max() <= 20.0
    order = np.argsort(d, axis=None, kind="stable")
    assert (np.diff(out.reshape(-1)[order]) <= 1e-6).all()


def test_disparity_batched_per_map():
    d = np.stack([np.linspace(0, 1, 16).reshape(4, 4), np.linspace(5, 9, 16).reshape(4, 4)]).astype(np.float32)
    out = losses.disparity_to_depth(d).data
    np.testing.assert_allclose(out[0], out[1], rtol=1e-5)


# ---------------------------------------------------------------- scale-invariant loss


def test_optimal_scale_examples():
    m = np.ones((1, 2), bool)
    d_star = np.array([[2.0, 2.0]])
    assert losses.optimal_scale(d_star, d_star, m) == 1.0
    assert losses.optimal_scale(2 * d_star, d_star, m) == 0.5
    assert np.isclose(losses.optimal_scale(np.array([[1.0, 2.0]]), d_star, m), 1.2, rtol=1e-12)


def test_si_rmse_example():
    got = float(losses.si_rmse(np.array([[1.0, 2.0]]), np.array([[2.0, 2.0]]), np.ones((1, 2), bool)).data)
    assert abs(got - np.sqrt((0.64 + 0.16) / 2)) < 1e-6
    assert abs(got - 0.63246) < 1e-5


def test_si_rmse_ignores_pixels_outside_v():
    m = np.array([[True, True, False]])
    a = losses.si_rmse(np.array([[1.0, 2.0, 50.0]]), np.array([[2.0, 2.0, -7.0]]), m).data
    b = losses.si_rmse(np.array([[1.0, 2.0]]), np.array([[2.0, 2.0]]), np.ones((1, 2), bool)).data
    assert a == b


def test_si_rmse_errors():
    with pytest.raises(ValueError, match="empty"):
        losses.si_rmse(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(ValueError, match="all-zero"):
        losses.optimal_scale(np.zeros((2, 2)), np.ones((2, 2)), np.ones((2, 2), bool))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_si_rmse_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0.5, 5.0, size=(6, 6)).astype(np.float32)
    g = rng.uniform(0.5, 5.0, size=(6, 6)).astype(np.float32)
    m = rng.random((6, 6)) < 0.6
    m[0, 0] = True
    a = float(losses.si_rmse(d, g, m).data)
    b = float(losses.si_rmse((d * np.float32(c)).astype(np.float32), g, m).data)
    assert abs(a - b) <= 1e-6 * max(a, 1e-12) + 1e-7


def test_optimal_scale_is_minimizer_on_random_instances():
    rng = np.random.default_rng(1)
    for _ in range(200):
        d = rng.uniform(0.1, 5.0, size=(5, 5))
        g = rng.uniform(0.1, 5.0, size=(5, 5))
        m = rng.random((5, 5)) < 0.5
        m[2, 2] = True
        s = losses.optimal_scale(d, g, m)
        err = lambda k: ((k * d - g)[m] ** 2).mean()  # noqa: E731
        assert err(s) <= err(s * (1 + 1e-3)) and err(s) <= err(s * (1 - 1e-3))


def test_fused_si_rmse_matches_reference_and_gradients():
    rng = np.random.default_rng(2)
    d = rng.uniform(0.5, 2.0, size=(2, 5, 5)).astype(np.float32)
    g = rng.uniform(0.5, 2.0, size=(2, 5, 5)).astype(np.float32)
    m = rng.random((2, 5, 5)) < 0.7
    fused, ref = losses.si_rmse(d, g, m).data, losses.si_rmse_reference(d, g, m).data
    np.testing.assert_allclose(fused, ref, rtol=1e-5)
    a, b = Tensor(d, True), Tensor(d, True)
    gc.sum(losses.si_rmse(a, g, m)).backward()
    gc.sum(losses.si_rmse_reference(b, g, m)).backward()
    np.testing.assert_allclose(a.grad, b.grad, rtol=1e-3, atol=1e-6)
    assert gc.gradient_check(lambda t: gc.sum(losses.si_rmse(t, g, m)), d, eps=1e-2) < 1e-2


# ---------------------------------------------------------------- normals and cosine loss


def test_fronto_parallel_plane_normals():
    r = rays()
    n, valid = losses.normals_from_depth(np.full((16, 16), 3.0, np.float32), r, np.ones((16, 16), bool))
    assert valid[1:-1, 1:-1].all() and not valid[0].any() and not valid[:, -1].any()
    np.testing.assert_allclose(n.data[valid], np.tile([0.0, 0.0, -1.0], (valid.sum(), 1)), atol=1e-6)


def test_tilted_plane_normals_match_analytic():
    # plane n . X = c with n = (0, -sin t, -cos t); depth along ray r is c / (n . r)
    t = 0.4
    normal = np.array([0.0, -np.sin(t), -np.cos(t)])
    r = rays(32, 32, 32.0)
    depth = (-4.0 / (r.astype(np.float64) @ normal)).astype(np.float32)
    n, valid = losses.normals_from_depth(depth, r, np.ones((32, 32), bool))
    got = n.data[valid].astype(np.float64)
    assert np.abs(got[:, 0]).max() < 1e-3
    assert np.abs(got - normal).max() < 1e-3


def test_normals_drop_stencils_leaving_v():
    m = np.zeros((8, 8), bool)
    m[2:6, 2:6] = True
    valid = losses.stencil_valid(m)
    assert valid.sum() == 4 and valid[3:5, 3:5].all()


def test_normals_are_scale_invariant():
    rng = np.random.default_rng(3)
    d = rng.uniform(2.0, 3.0, size=(12, 12)).astype(np.float32)
    r, m = rays(12, 12), np.ones((12, 12), bool)
    a, _ = losses.normals_from_depth(d, r, m)
    b, _ = losses.normals_from_depth(d * np.float32(7.5), r, m)
    np.testing.assert_allclose(a.data, b.data, atol=1e-5)


def test_cos_sim_loss_examples():
    m = np.ones((4, 4), bool)
    n = np.tile([0.0, 0.0, -1.0], (4, 4, 1)).astype(np.float32)
    ortho = np.tile([1.0, 0.0, 0.0], (4, 4, 1)).astype(np.float32)
    assert float(losses.cos_sim_loss(n, n, m).data) == 0.0
    assert float(losses.cos_sim_loss(n, -n, m).data) == 1.0
    assert float(losses.cos_sim_loss(n, ortho, m).data) == 0.5
    with pytest.raises(ValueError, match="unit normals"):
        losses.cos_sim_loss(n * 2, n, m)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_cos_sim_loss_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(5, 5, 3))
    b = rng.normal(size=(5, 5, 3))
    a /= np.linalg.norm(a, axis=-1, keepdims=True)
    b /= np.linalg.norm(b, axis=-1, keepdims=True)
    val = float(losses.cos_sim_loss(a.astype(np.float32), b.astype(np.float32), np.ones((5, 5), bool)).data)
    assert 0.0 <= val <= 1.0


def sphere_depth(h=32, r=1.0, z=4.0):
    ray = Intrinsics(height=h, width=h, fx=h, fy=h, cx=h / 2, cy=h / 2).rays()
    d = ray / np.linalg.norm(ray, axis=-1, keepdims=True)
    b = -2 * d[..., 2] * z
    disc = b * b - 4 * (z * z - r * r)
    hit = disc > 0
    t = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0))) / 2, np.inf)
    depth = t * d[..., 2]
    return np.where(hit, depth, 1.0).astype(np.float32), hit, ray.astype(np.float32)


def test_total_loss_examples():
    depth, m, r = sphere_depth()
    gt = losses.normalize_mean5(depth, m)
    assert float(losses.total_loss(Tensor(gt), gt, r, m).data) < 1e-5
    assert float(losses.total_loss(Tensor(gt * 3), gt, r, m).data) < 1e-5
    noisy = gt + np.random.default_rng(4).normal(scale=0.05, size=gt.shape).astype(np.float32)
    si = float(losses.si_rmse(noisy, gt, m).data)
    n_p, v_p = losses.normals_from_depth(noisy, r, m)
    n_g, v_g = losses.normals_from_depth(gt, r, m)
    cos = float(losses.cos_sim_loss(n_p, n_g.data, v_p & v_g).data)
    assert np.isclose(float(losses.total_loss(Tensor(noisy), gt, r, m).data), si + cos, rtol=1e-5)


def test_total_loss_gradient():
    depth, m, r = sphere_depth(16)
    gt = losses.normalize_mean5(depth, m)
    pred = (gt * np.random.default_rng(5).uniform(0.9, 1.1, size=gt.shape)).astype(np.float32)
    idx = np.flatnonzero(m)[::7]
    err = gc.gradient_check(lambda t: losses.total_loss(t, gt, r, m), pred, eps=1e-2, indices=idx)
    assert err < 1e-2


def test_normalize_mean5():
    m = np.zeros((4, 4), bool)
    m[1:3, 1:3] = True
    np.testing.assert_array_equal(losses.normalize_mean5(np.full((4, 4), 10.0), m)[m], 5.0)
    d = np.random.default_rng(6).uniform(1, 9, size=(4, 4))
    once = losses.normalize_mean5(d, m)
    assert abs(once[m].mean() - 5.0) < 5e-6
    np.testing.assert_allclose(losses.normalize_mean5(once, m), once, rtol=1e-6)
    with pytest.raises(ValueError):
        losses.normalize_mean5(d, np.zeros((4, 4), bool))
