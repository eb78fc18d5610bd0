import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from spongiosa import diffmorph as dm
from spongiosa import morphometry as m
from spongiosa.datapipe import PhantomSpec, phantom_volume


def f(t):
    return float(t)


def test_softplus_examples():
    assert f(dm.softplus_eps(1.0)) == pytest.approx(1.0, abs=1e-12)
    assert f(dm.softplus_eps(0.0)) == pytest.approx(1e-4 * math.log1p(math.exp(-1)) + 1e-4, rel=1e-12)
    assert f(dm.softplus_eps(0.0)) == pytest.approx(1.3133e-4, rel=1e-4)
    v = f(dm.softplus_eps(-1.0))
    assert v > 0 and v == pytest.approx(1e-4, rel=1e-9)
    assert math.isfinite(f(dm.softplus_eps(1e6)))


@settings(max_examples=60, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1))
def test_softplus_positive_increasing(a, b):
    lo, hi = sorted((a, b))
    slo, shi = f(dm.softplus_eps(lo)), f(dm.softplus_eps(hi))
    assert slo > 0 and slo <= shi


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-3, 10))
def test_softplus_tail_bound(a):
    eps = 1e-4
    assert abs(f(dm.softplus_eps(a, eps)) - a) <= eps * math.exp(1 - a / eps) + eps


def test_softplus_convex_on_grid():
    a = torch.linspace(-5e-4, 1e-3, 301, dtype=torch.float64)
    s = dm.softplus_eps(a)
    assert torch.all(s[2:] - 2 * s[1:-1] + s[:-2] >= -1e-18)


def test_smooth_heaviside_examples():
    assert f(dm.smooth_heaviside(225.0)) == 0.5
    assert f(dm.smooth_heaviside(325.0)) == pytest.approx(0.9999546, abs=1e-7)
    assert f(dm.smooth_heaviside(125.0)) == pytest.approx(4.54e-5, rel=1e-3)


@settings(max_examples=60, deadline=None)
@given(st.floats(-300, 300), st.floats(0.01, 50))
def test_bvtv_star_strictly_inside(shift, width):
    x = torch.full((2, 2, 2), 225.0 + shift, dtype=torch.float64)
    v = f(dm.bvtv_star(x, 225.0, 10.0))
    assert 0.0 < v < 1.0


def test_bvtv_star_examples():
    assert f(dm.bvtv_star(np.full((3, 3, 3), 225.0))) == 0.5
    assert f(dm.bvtv_star(np.full((3, 3, 3), 325.0))) == pytest.approx(0.99995, abs=1e-5)
    with pytest.raises(ValueError):
        dm.bvtv_star(np.zeros((0, 2, 2)))


def test_tmd_star_examples():
    assert f(dm.tmd_star(np.full((4, 4, 4), 340.0))) == pytest.approx(340.0, abs=0.01)
    near_empty = f(dm.tmd_star(np.full((4, 4, 4), 125.0)))
    assert math.isfinite(near_empty)
    x = np.full((4, 4, 4), -100.0)
    x[0, 0, 0], x[1, 1, 1] = 300.0, 400.0
    assert abs(f(dm.tmd_star(x)) - m.tmd(x)) < 1.0


def test_p_vector_examples():
    p = dm.p_vector(np.full((3, 3, 3), 300.0)).numpy()
    assert p[0] == pytest.approx(300.0) and p[1] == pytest.approx(0.0, abs=1e-9)
    assert p[2] == pytest.approx(1.0, abs=1e-3) and p[3] == pytest.approx(300.0, abs=0.1)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 600, (4, 4, 4))
    base = dm.p_vector(x, dm.SmoothParams(alphas=(1, 1, 1, 1))).numpy()
    dbl = dm.p_vector(x, dm.SmoothParams(alphas=(1, 1, 2, 1))).numpy()
    np.testing.assert_array_equal(dbl[[0, 1, 3]], base[[0, 1, 3]])
    assert dbl[2] == 2 * base[2]


def test_p_vector_batches():
    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, (3, 4, 4, 4))
    batch = dm.p_vector_normalized(X).numpy()
    single = np.stack([dm.p_vector_normalized(x).numpy() for x in X])
    np.testing.assert_allclose(batch, single, rtol=1e-12)


def test_bmd_sd_matches_classic():
    x = np.random.default_rng(2).normal(200, 80, (5, 5, 5))
    assert f(dm.bmd_sd(x)) == pytest.approx(m.bmd_sd(x), rel=1e-12)
    assert f(dm.bmd(x)) == pytest.approx(m.bmd(x), rel=1e-12)


def _fd_gradients(x, h=1e-3):
    """Per-voxel central differences of p_vector_normalized via one batched call."""
    n = x.size
    eye = np.eye(n).reshape(n, *x.shape)
    plus = dm.p_vector_normalized(x[None] + h * eye).numpy()
    minus = dm.p_vector_normalized(x[None] - h * eye).numpy()
    return ((plus - minus) / (2 * h)).T  # (4, n)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(5):
        x = rng.uniform(-0.9, 0.9, (8, 8, 8))
        xt = torch.tensor(x, requires_grad=True)
        p = dm.p_vector_normalized(xt)
        grads = np.stack([torch.autograd.grad(p[i], xt, retain_graph=True)[0].numpy().ravel()
                          for i in range(4)])
        fd = _fd_gradients(x)
        rel = np.linalg.norm(grads - fd, axis=1) / np.linalg.norm(fd, axis=1)
        assert np.all(rel <= 1e-3), rel


def _banded_phantom(sigma, t=225.0, band=5.0, seed=0):
    vol = phantom_volume(PhantomSpec(shape=(32, 32, 32), seed=seed)).values.astype(np.float64)
    near = np.abs(vol - t) < band * sigma
    vol[near] = np.where(vol[near] >= t, t + band * sigma, t - band * sigma)
    return vol


@pytest.mark.parametrize("sigma", [10.0, 1.0, 0.1])
def test_smooth_matches_classic_away_from_threshold(sigma):
    vol = _banded_phantom(sigma)
    assert abs(f(dm.bvtv_star(vol, 225.0, sigma)) - m.bvtv(vol)) < 1e-3
    assert abs(f(dm.tmd_star(vol, 225.0, sigma)) - m.tmd(vol)) < 1.0


def test_smooth_params_serialization():
    sp = dm.SmoothParams(alphas=(1, 2, 3, 4))
    assert dm.SmoothParams.from_dict(sp.to_dict()) == sp
    with pytest.raises(ValueError):
        dm.SmoothParams.from_dict({"epsilon": 1e-4, "beta": 1})
    for bad in ({"epsilon": 0}, {"sigma": -1}, {"alphas": (1, 1, 0, 1)}, {"t": float("nan")}):
        with pytest.raises(ValueError):
            dm.SmoothParams(**bad)


def test_style_vector_transformer():
    rng = np.random.default_rng(4)
    X = rng.uniform(-1, 1, (20, 4, 4, 4))
    est = dm.StyleVectorTransformer().fit(X)
    W = est.transform(X)
    np.testing.assert_allclose(W.std(axis=0, ddof=1), 1.0, rtol=1e-9)
    fixed = dm.StyleVectorTransformer(alphas=(1, 1, 1, 1)).fit(X)
    np.testing.assert_allclose(fixed.transform(X), dm.p_vector_normalized(X).numpy())
    with pytest.raises(ValueError):
        dm.StyleVectorTransformer().transform(X)
    with pytest.raises(ValueError):
        dm.StyleVectorTransformer().fit(np.zeros((3, 4, 4, 4)))
