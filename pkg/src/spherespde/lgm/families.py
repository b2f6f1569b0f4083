"""Marginal families with their canonical-pairing links.

Each family exposes the log-likelihood in the linear predictor ``eta`` and
its first two derivatives, which is all the inner Newton loop needs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln, logit

from ..errors import InputError

LINKS = {"gaussian": "identity", "bernoulli": "logit", "gamma": "negative-inverse"}


@dataclass(frozen=True)
class MarginalFamily:
    """Gaussian(identity), Bernoulli(logit) or Gamma(negative inverse).

    Parameters
    ----------
    kind : {"gaussian", "bernoulli", "gamma"}
    param : float, optional
        Observation variance for the Gaussian, shape for the Gamma.
    """

    kind: str
    param: float | None = None

    def __post_init__(self):
        if self.kind not in LINKS:
            raise InputError(f"unknown family {self.kind!r}")
        if self.kind == "bernoulli":
            object.__setattr__(self, "param", None)
        else:
            if self.param is None or not self.param > 0:
                raise InputError(f"{self.kind} family needs a positive parameter, got {self.param}")
            object.__setattr__(self, "param", float(self.param))

    @classmethod
    def gaussian(cls, sigma2: float) -> "MarginalFamily":
        return cls("gaussian", sigma2)

    @classmethod
    def bernoulli(cls) -> "MarginalFamily":
        return cls("bernoulli")

    @classmethod
    def gamma(cls, shape: float) -> "MarginalFamily":
        return cls("gamma", shape)

    @property
    def link(self) -> str:
        return LINKS[self.kind]

    # -- links --------------------------------------------------------------
    def link_fn(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            return mu
        if self.kind == "bernoulli":
            return logit(mu)
        return -1.0 / mu

    def inverse_link(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.kind == "gaussian":
            return eta
        if self.kind == "bernoulli":
            return expit(eta)
        return -1.0 / eta

    def feasible(self, eta) -> np.ndarray:
        """Linear predictors inside the link's domain."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == "gamma":
            return eta < 0
        return np.isfinite(eta)

    # -- likelihood -----------------------------------------------------------
    def loglik(self, y, eta) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if self.kind == "gaussian":
            s2 = self.param
            return -0.5 * np.log(2 * np.pi * s2) - 0.5 * (y - eta) ** 2 / s2
        if self.kind == "bernoulli":
            return y * eta - np.logaddexp(0.0, eta)
        a = self.param
        with np.errstate(invalid="ignore", divide="ignore"):
            out = a * np.log(-a * eta) + (a - 1.0) * np.log(y) + a * y * eta - gammaln(a)
        return np.where(eta < 0, out, -np.inf)

    def derivs(self, y, eta):
        """``(d loglik / d eta, -d^2 loglik / d eta^2)``."""
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if self.kind == "gaussian":
            return (y - eta) / self.param, np.full_like(eta, 1.0 / self.param)
        if self.kind == "bernoulli":
            p = expit(eta)
            return y - p, p * (1.0 - p)
        a = self.param
        return a / eta + a * y, a / eta**2

    def mean_var(self, eta):
        """Response mean and variance given the linear predictor."""
        mu = self.inverse_link(eta)
        if self.kind == "gaussian":
            return mu, np.full_like(mu, self.param)
        if self.kind == "bernoulli":
            return mu, mu * (1.0 - mu)
        return mu, mu**2 / self.param

    def sample(self, rng: np.random.Generator, eta) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        if self.kind == "gaussian":
            return eta + np.sqrt(self.param) * rng.standard_normal(eta.shape)
        if self.kind == "bernoulli":
            return (rng.random(eta.shape) < expit(eta)).astype(float)
        mu = -1.0 / eta
        return rng.gamma(self.param, mu / self.param)

    def valid_response(self, y) -> bool:
        y = np.asarray(y, dtype=float)
        y = y[np.isfinite(y)]
        if self.kind == "bernoulli":
            return bool(np.all((y == 0) | (y == 1)))
        if self.kind == "gamma":
            return bool(np.all(y > 0))
        return True
