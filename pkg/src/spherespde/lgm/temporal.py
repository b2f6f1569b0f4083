"""Per-location temporal fit: intercept, covariates and K annual harmonics.

Gaussian series use ordinary least squares. Bernoulli and Gamma series use
iteratively reweighted least squares (maximum likelihood on the link scale),
batched over locations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ..errors import InputError
from .families import MarginalFamily

ETA_CAP = 10.0
IRLS_MAX_ITER = 100
IRLS_TOL = 1e-10
COND_LIMIT = 1e12


def harmonic_design(times, K: int, period: float) -> np.ndarray:
    """Columns ``sin(2 pi k t / period), cos(2 pi k t / period)`` for k = 1..K."""
    t = np.asarray(times, dtype=float)
    cols = []
    for k in range(1, K + 1):
        w = 2.0 * np.pi * k * t / period
        cols += [np.sin(w), np.cos(w)]
    return np.stack(cols, axis=-1) if cols else np.zeros(t.shape + (0,))


@dataclass(frozen=True, eq=False)
class TemporalFit:
    """Coefficients of the stepwise temporal model, one row per location.

    ``coef`` columns are ``[intercept, beta_1..beta_P, zeta_1, zeta'_1, ...,
    zeta_K, zeta'_K]``.
    """

    family: MarginalFamily
    coef: np.ndarray
    K: int
    period: float
    n_covariates: int
    times: np.ndarray
    fitted: np.ndarray
    rank_deficient: np.ndarray
    separated: np.ndarray
    converged: np.ndarray = field(default=None)

    @property
    def n_locations(self) -> int:
        return self.coef.shape[0]

    @property
    def n_temporal_params(self) -> int:
        return 2 * self.K * self.n_locations

    @property
    def intercept(self) -> np.ndarray:
        return self.coef[:, 0]

    @property
    def zeta(self) -> np.ndarray:
        """Sine coefficients, shape (n_locations, K)."""
        return self.coef[:, 1 + self.n_covariates :: 2]

    @property
    def zeta_prime(self) -> np.ndarray:
        return self.coef[:, 2 + self.n_covariates :: 2]

    def f_time(self, times) -> np.ndarray:
        """Harmonic component only, shape (n_locations, len(times))."""
        H = harmonic_design(times, self.K, self.period)
        return self.coef[:, 1 + self.n_covariates :] @ H.T

    def predictor(self, times=None, covariates=None) -> np.ndarray:
        """Linear predictor ``intercept + covariates + f_time`` on the link scale."""
        times = self.times if times is None else np.asarray(times, dtype=float)
        eta = self.coef[:, :1] + self.f_time(times)
        if self.n_covariates:
            if covariates is None:
                raise InputError("this fit uses covariates; pass them to predictor()")
            cov = np.asarray(covariates, dtype=float)
            eta = eta + np.einsum("ltp,lp->lt", cov, self.coef[:, 1 : 1 + self.n_covariates])
        return eta


def _design(n_loc, times, K, period, covariates):
    H = harmonic_design(times, K, period)
    n_t = len(times)
    parts = [np.ones((n_loc, n_t, 1))]
    P = 0
    if covariates is not None:
        cov = np.asarray(covariates, dtype=float)
        if cov.ndim != 3 or cov.shape[:2] != (n_loc, n_t):
            raise InputError("covariates must have shape (n_locations, n_times, P)")
        parts.append(cov)
        P = cov.shape[2]
    parts.append(np.broadcast_to(H, (n_loc, n_t, H.shape[1])))
    return np.concatenate(parts, axis=2), P


def _wls(X, w, z):
    """Batched weighted least squares; ill-conditioned systems return NaN."""
    XtW = X * w[..., None]
    A = np.einsum("ltp,ltq->lpq", XtW, X)
    b = np.einsum("ltp,lt->lp", XtW, z)
    ev = np.linalg.eigvalsh(A)
    bad = ~(ev[:, 0] > ev[:, -1] / COND_LIMIT)
    A_safe = np.where(bad[:, None, None], np.eye(A.shape[1]), A)
    beta = np.linalg.solve(A_safe, b[..., None])[..., 0]
    beta[bad] = np.nan
    return beta, bad


def fit_temporal(series, family, K: int = 2, period: float = 365.0, covariates=None,
                 times=None) -> TemporalFit:
    """Fit the temporal model independently at every location.

    Parameters
    ----------
    series : (n_locations, n_times) array; NaN marks missing values
    family : MarginalFamily or family name. For the Gamma, the shape is
        estimated from Pearson residuals and stored in the returned family.
    K : number of harmonics
    period : 365 or 366 for daily data
    covariates : optional (n_locations, n_times, P) array
    times : optional time index, default 1..n_times
    """
    y = np.atleast_2d(np.asarray(series, dtype=float))
    n_loc, n_t = y.shape
    kind = family.kind if isinstance(family, MarginalFamily) else str(family)
    if K < 0:
        raise InputError("K must be non-negative")
    times = np.arange(1, n_t + 1, dtype=float) if times is None else np.asarray(times, dtype=float)
    X, P = _design(n_loc, times, K, period, covariates)
    mask = np.isfinite(y)
    fam_check = MarginalFamily(kind, 1.0 if kind != "bernoulli" else None)
    if not fam_check.valid_response(y):
        raise InputError(f"series contains values outside the {kind} support")
    p = X.shape[2]
    too_short = mask.sum(axis=1) < p
    w_mask = mask & ~too_short[:, None]
    y0 = np.where(mask, y, 0.0)

    separated = np.zeros(n_loc, dtype=bool)
    converged = np.ones(n_loc, dtype=bool)
    if kind == "gaussian":
        beta, bad = _wls(X, w_mask.astype(float), y0)
    else:
        beta, bad, converged = _irls(kind, X, y0, w_mask)
        if kind == "bernoulli":
            eta = np.einsum("ltp,lp->lt", X, np.nan_to_num(beta))
            peak = np.max(np.abs(np.where(w_mask, eta, 0.0)), axis=1)
            separated = peak > ETA_CAP
            scale = np.where(separated, ETA_CAP / np.maximum(peak, 1e-300), 1.0)
            beta = beta * scale[:, None]
    rank_def = bad | too_short
    fitted = np.einsum("ltp,lp->lt", X, beta)

    if kind == "gaussian":
        resid = (y0 - fitted)[w_mask & ~rank_def[:, None]]
        dof = max(resid.size - p * int(np.sum(~rank_def)), 1)
        fam = MarginalFamily.gaussian(max(float(resid @ resid) / dof, 1e-12))
    elif kind == "bernoulli":
        fam = MarginalFamily.bernoulli()
    else:
        ok = w_mask & ~rank_def[:, None]
        mu = -1.0 / fitted[ok]
        pearson = ((y0[ok] - mu) / mu) ** 2
        dof = max(pearson.size - p * int(np.sum(~rank_def)), 1)
        fam = MarginalFamily.gamma(dof / max(float(pearson.sum()), 1e-300))
    return TemporalFit(fam, beta, K, float(period), P, times, fitted, rank_def, separated, converged)


def _irls(kind, X, y, mask):
    n_loc, n_t, p = X.shape
    w_obs = mask.astype(float)
    if kind == "bernoulli":
        mu = np.where(mask, (y + 0.5) / 2.0, 0.5)
        eta = np.log(mu / (1 - mu))
    else:
        cnt = mask.sum(axis=1)
        ymean = np.where(cnt > 0, np.sum(np.where(mask, y, 0.0), axis=1) / np.maximum(cnt, 1), 1.0)
    beta = None
    if kind == "gamma":
        beta = np.zeros((n_loc, p))
        beta[:, 0] = -1.0 / ymean
        eta = np.einsum("ltp,lp->lt", X, beta)
    bad = np.zeros(n_loc, dtype=bool)
    converged = np.zeros(n_loc, dtype=bool)
    for _it in range(IRLS_MAX_ITER):
        if kind == "bernoulli":
            e = np.clip(eta, -ETA_CAP - 5, ETA_CAP + 5)
            mu = expit(e)
            w = np.maximum(mu * (1 - mu), 1e-12)
            z = e + (y - mu) / w
        else:
            mu = -1.0 / eta
            w = mu**2
            z = eta + (y - mu) / mu**2
        new, bad_now = _wls(X, w * w_obs, np.where(mask, z, 0.0))
        bad |= bad_now
        new = np.where(bad[:, None], 0.0, new)
        if beta is not None and kind == "gamma":
            # keep every fitted predictor negative by step halving
            for _h in range(30):
                eta_new = np.einsum("ltp,lp->lt", X, new)
                infeasible = np.any(mask & (eta_new >= 0), axis=1)
                if not infeasible.any():
                    break
                new[infeasible] = 0.5 * (new[infeasible] + beta[infeasible])
        if beta is not None:
            converged = np.max(np.abs(new - beta), axis=1) < IRLS_TOL * (1 + np.max(np.abs(beta), axis=1))
            if np.all(converged | bad):
                beta = new
                break
        beta = new
        eta = np.einsum("ltp,lp->lt", X, beta)
    converged = converged | bad
    beta = np.where(bad[:, None], np.nan, beta)
    return beta, bad, converged
