import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq
from scipy.stats import norm

from oracles import dense_conditional
from spherespde.deform import CoeffLayout
from spherespde.errors import InputError
from spherespde.fvm import precision
from spherespde.geometry import random_sphere_points
from spherespde.lgm import (LaplaceConfig, LaplaceModel, MarginalFamily, ObsData, fit_temporal, laplace_fit,
                            latent_marginals, latent_mean, predict_at_triangles, predict_response)


@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.floats(0.01, 0.99))
def test_mixture_quantile_matches_root_finding(seed, k, q):
    from spherespde.lgm.posterior import mixture_quantile

    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(k))
    m = rng.normal(0, 3, k)
    s = rng.uniform(0.1, 2.0, k)
    cdf = lambda t: np.sum(w * norm.cdf((t - m) / s)) - q  # noqa: E731
    ref = brentq(cdf, -100, 100, xtol=1e-13)
    got = mixture_quantile(w, m[:, None], s[:, None], q)[0]
    assert got == pytest.approx(ref, abs=1e-9)


def test_mixture_quantile_level_check():
    from spherespde.lgm.posterior import mixture_quantile

    with pytest.raises(InputError):
        mixture_quantile([1.0], np.zeros((1, 1)), np.ones((1, 1)), 1.0)


@pytest.fixture(scope="module")
def gaussian_fit(world_mesh_small):
    rng = np.random.default_rng(8)
    pts = random_sphere_points(rng, 50)
    y = rng.normal(size=(2, 50))
    obs = ObsData.from_points(world_mesh_small, pts, y)
    fam = MarginalFamily.gaussian(0.1)
    model = LaplaceModel(world_mesh_small, obs, fam, CoeffLayout(0, land_sea=False), LaplaceConfig(explore=False))
    return laplace_fit(model), fam


def test_single_point_marginals_equal_dense_conditional(gaussian_fit, world_mesh_small):
    hp, fam = gaussian_fit
    obs = hp.model.obs
    c = hp.coeffs()
    Q = precision(world_mesh_small, c).toarray()
    noise = c.nugget[obs.nugget_domain] + fam.param
    post = latent_marginals(hp, np.arange(world_mesh_small.n_triangles))
    for r in range(2):
        mean, var = dense_conditional(Q, obs.tri, obs.y[r], noise)
        np.testing.assert_allclose(post.mean[r], mean, atol=1e-8)
        np.testing.assert_allclose(post.sd[r], np.sqrt(var), atol=1e-8)
        np.testing.assert_allclose(post.quantiles[0.975][r], mean + norm.ppf(0.975) * np.sqrt(var), atol=1e-7)
    np.testing.assert_allclose(latent_mean(hp), post.mean, atol=1e-10)


def test_mixture_moments(world_mesh_small):
    rng = np.random.default_rng(9)
    obs = ObsData.from_points(world_mesh_small, random_sphere_points(rng, 40), rng.normal(size=(1, 40)))
    model = LaplaceModel(world_mesh_small, obs, MarginalFamily.gaussian(0.1), CoeffLayout(0, land_sea=False))
    hp = laplace_fit(model)
    assert len(hp.points) > 1
    post = latent_marginals(hp, [0, 7, 30])
    w = hp.mixture_weights[:, None, None]
    mean = np.sum(w * post.comp_mean, axis=0)
    var = np.sum(w * (post.comp_sd**2 + (post.comp_mean - mean) ** 2), axis=0)
    np.testing.assert_allclose(post.mean, mean, atol=1e-12)
    np.testing.assert_allclose(post.sd, np.sqrt(var), atol=1e-12)
    np.testing.assert_allclose(post.quantile(0.5), post.quantiles[0.5], atol=1e-12)
    np.testing.assert_allclose(latent_mean(hp, [0, 7, 30]), post.mean, atol=1e-10)


def test_response_prediction_moments(gaussian_fit):
    hp, fam = gaussian_fit
    tri = hp.model.obs.tri[:5]
    pred = predict_at_triangles(hp, fam, tri, offset=1.0, n_draws=40_000, seed=0)
    post = latent_marginals(hp, tri, quantiles=())
    tau2 = hp.coeffs().nugget[0]
    sd = np.sqrt(post.sd[0] ** 2 + tau2)
    assert np.all(np.abs(pred.mean - (1.0 + post.mean[0])) <= 4 * sd / np.sqrt(40_000))
    np.testing.assert_allclose(pred.sd, sd, rtol=0.03)
    assert np.all((pred.lower < pred.median) & (pred.median < pred.upper))
    same = predict_at_triangles(hp, fam, tri, offset=1.0, n_draws=100, seed=0, keep_draws=True)
    assert same.draws.shape == (100, 5)


def test_predict_response_uses_nearest_fixed_predictor(world_mesh_small):
    rng = np.random.default_rng(10)
    pts = random_sphere_points(rng, 30)
    series = rng.gamma(2.0, 1.0, (30, 20))
    tf = fit_temporal(series, "gamma", K=1, period=365.0)
    fam = tf.family
    obs = ObsData.from_points(world_mesh_small, pts, series.T, offset=tf.fitted.T)
    model = LaplaceModel(world_mesh_small, obs, fam, CoeffLayout(0, land_sea=False), LaplaceConfig(explore=False))
    hp = laplace_fit(model, keep_latent=False)
    at_obs = predict_response(hp, tf, fam, pts[:3], t=4, n_draws=500, seed=1)
    direct = predict_at_triangles(hp, fam, obs.tri[:3], tf.fitted[:3, 4], replicate=4,
                                  nugget_domain=obs.nugget_domain[:3], n_draws=500, seed=1)
    np.testing.assert_allclose(at_obs.mean, direct.mean, rtol=1e-12)
    assert np.all(at_obs.mean > 0)
    with pytest.raises(InputError):
        predict_response(hp, tf, fam, pts[:1], t=99)
