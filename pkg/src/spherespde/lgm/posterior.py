"""Latent marginals as mixtures over the hyperparameter grid, and predictions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import ndtr

from ..errors import InputError
from ..fvm import precision
from ..gmrf import factorize
from .families import MarginalFamily
from .laplace import HyperPosterior
from .temporal import TemporalFit

DEFAULT_QUANTILES = (0.025, 0.5, 0.975)


@dataclass(frozen=True, eq=False)
class LatentPosterior:
    """Per-target mixture-of-Gaussians marginals of ``x``.

    Arrays have shape (n_rep, n_targets); mixture components are stacked on
    a leading axis of length ``len(weights)``.
    """

    targets: np.ndarray
    weights: np.ndarray
    comp_mean: np.ndarray
    comp_sd: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    quantiles: dict

    def quantile(self, q: float) -> np.ndarray:
        return mixture_quantile(self.weights, self.comp_mean, self.comp_sd, q)


def mixture_quantile(weights, means, sds, q: float, iters: int = 80) -> np.ndarray:
    """Quantile of a Gaussian mixture by vectorised bisection."""
    if not 0.0 < q < 1.0:
        raise InputError("quantile level must be in (0, 1)")
    w = np.asarray(weights, dtype=float)
    wshape = (len(w),) + (1,) * (means.ndim - 1)
    w = w.reshape(wshape)
    sds = np.maximum(sds, 1e-300)
    lo = np.min(means - 12 * sds, axis=0)
    hi = np.max(means + 12 * sds, axis=0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        cdf = np.sum(w * ndtr((mid - means) / sds), axis=0)
        below = cdf < q
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


CACHE_LIMIT = 5_000_000  # floats per cached moment array


def _components(hp: HyperPosterior, targets, need_var: bool = True):
    if hp.model is None:
        raise InputError("HyperPosterior has no attached model to recompute components")
    model = hp.model
    size = len(hp.points) * model.obs.n_rep * model.n
    if need_var and size <= CACHE_LIMIT:
        if "moments" not in hp.cache:
            hp.cache["moments"] = _components_raw(hp, np.arange(model.n), True)
        cm, cs = hp.cache["moments"]
        return cm[..., targets], cs[..., targets]
    return _components_raw(hp, targets, need_var)


def _components_raw(hp: HyperPosterior, targets, need_var: bool):
    model = hp.model
    means, sds = [], []
    for k, th in enumerate(hp.points):
        res = model.inner(th, keep_factors=need_var)
        mk = np.array([m.x[targets] if m is not None else np.zeros(len(targets)) for m in res.modes])
        means.append(mk)
        if need_var:
            cache = {}
            vk = []
            for m in res.modes:
                if m is None:
                    # replicate without data: prior marginal variance
                    key = "prior"
                    if key not in cache:
                        cache[key] = factorize(precision(model.mesh, hp.coeffs(k))).diag_inverse()
                    vk.append(cache[key][targets])
                    continue
                key = id(m.factor)
                if key not in cache:
                    cache[key] = m.factor.diag_inverse()
                vk.append(cache[key][targets])
            sds.append(np.sqrt(np.maximum(np.array(vk), 0.0)))
    return np.array(means), (np.array(sds) if need_var else None)


def latent_marginals(hp: HyperPosterior, targets, quantiles=DEFAULT_QUANTILES) -> LatentPosterior:
    """Marginal posteriors of ``x`` at triangle indices ``targets``."""
    targets = np.asarray(targets, dtype=np.int64).ravel()
    w = hp.mixture_weights
    cm, cs = _components(hp, targets)
    wr = w.reshape((-1,) + (1,) * (cm.ndim - 1))
    mean = np.sum(wr * cm, axis=0)
    second = np.sum(wr * (cs**2 + cm**2), axis=0)
    sd = np.sqrt(np.maximum(second - mean**2, 0.0))
    qs = {q: mixture_quantile(w, cm, cs, q) for q in quantiles}
    return LatentPosterior(targets, w, cm, cs, mean, sd, qs)


def latent_mean(hp: HyperPosterior, targets=None) -> np.ndarray:
    """Mixture mean of ``x`` (n_rep, n_targets) from the stored grid modes."""
    if hp.latent_means is None:
        cm, _ = _components(hp, np.arange(hp.model.n) if targets is None else targets, need_var=False)
    else:
        cm = np.array(hp.latent_means)
        if targets is not None:
            cm = cm[..., np.asarray(targets)]
    w = hp.mixture_weights.reshape((-1,) + (1,) * (cm.ndim - 1))
    return np.sum(w * cm, axis=0)


@dataclass(frozen=True, eq=False)
class ResponsePrediction:
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    median: np.ndarray
    draws: np.ndarray | None = None


def predict_at_triangles(hp: HyperPosterior, family: MarginalFamily, tri, offset, replicate: int = 0,
                         nugget_domain=None, n_draws: int = 4000, seed=None, level: float = 0.95,
                         include_nugget: bool = True, keep_draws: bool = False) -> ResponsePrediction:
    """Monte-Carlo response-scale summaries ``mu = g^{-1}(offset + x + u)``.

    Parameters
    ----------
    tri : (N,) triangle of each prediction point
    offset : (N,) fixed linear predictor at the points (temporal fit)
    replicate : which replicate (day) of the latent field to use
    nugget_domain : (N,) sea/land domain for the nugget draw
    """
    tri = np.asarray(tri, dtype=np.int64).ravel()
    offset = np.broadcast_to(np.asarray(offset, dtype=float), tri.shape)
    rng = np.random.default_rng(seed)
    post = latent_marginals(hp, tri, quantiles=())
    cm = post.comp_mean[:, replicate]
    cs = post.comp_sd[:, replicate]
    k = rng.choice(len(post.weights), size=n_draws, p=post.weights / post.weights.sum())
    x = cm[k] + cs[k] * rng.standard_normal((n_draws, len(tri)))
    eta = offset + x
    if include_nugget:
        dom = np.zeros(len(tri), dtype=np.int64) if nugget_domain is None else np.asarray(nugget_domain)
        tau2 = np.array([hp.coeffs(kk).nugget for kk in range(len(hp.points))])  # (K, 2)
        eta = eta + np.sqrt(tau2[k][:, dom]) * rng.standard_normal((n_draws, len(tri)))
    if family.kind == "gamma":
        # the negative-inverse link needs eta < 0; positive draws mean an unbounded mean
        eta = np.minimum(eta, -1e-12)
    mu = family.inverse_link(eta)
    a = (1.0 - level) / 2.0
    lo, med, hi = np.quantile(mu, [a, 0.5, 1.0 - a], axis=0)
    return ResponsePrediction(mu.mean(axis=0), mu.std(axis=0), lo, hi, med, mu if keep_draws else None)


def predict_response(hp: HyperPosterior, fit: TemporalFit, family: MarginalFamily, points, t: int,
                     time=None, covariates=None, neighbors: int = 1, **kw) -> ResponsePrediction:
    """Response-scale prediction at arbitrary points for replicate ``t``.

    The fixed part ``intercept + covariates + f_time`` comes from ``fit``,
    whose rows are aligned with the observation locations of ``hp.model``.
    A new point takes the inverse-distance weighted fixed predictor of its
    ``neighbors`` nearest observed locations (the nearest one by default).
    ``time`` is the time value of replicate ``t`` (default ``fit.times[t]``).
    """
    if hp.model is None:
        raise InputError("HyperPosterior has no attached model")
    model = hp.model
    if fit.n_locations != model.obs.n_loc:
        raise InputError("temporal fit rows must match the observation locations")
    if not 0 <= t < model.obs.n_rep:
        raise InputError(f"replicate index {t} out of range")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tri = model.mesh.locate(pts)
    obs_xyz = model.mesh.centroids[model.obs.tri]
    k = int(min(max(neighbors, 1), len(obs_xyz)))
    dist, idx = cKDTree(obs_xyz).query(pts, k=k)
    dist, idx = dist.reshape(len(pts), k), idx.reshape(len(pts), k)
    w = 1.0 / np.maximum(dist, 1e-12)
    w /= w.sum(axis=1, keepdims=True)
    time = fit.times[t] if time is None else time
    fixed = fit.predictor(np.array([time], dtype=float), covariates)[:, 0]
    offset = np.sum(w * fixed[idx], axis=1)
    return predict_at_triangles(hp, family, tri, offset, replicate=t, nugget_domain=model.mesh.domain[tri], **kw)
