"""Nested Laplace approximation for the spatial hyperparameters.

Model per replicate ``r`` (a day, or one simulated field)::

    eta_ri = offset_ri + x_r[tri(i)] + u_ri,
    x_r ~ N(0, Q(theta)^{-1}),   u_ri ~ N(0, tau2_{j(i)}),

with observations ``y_ri`` drawn conditionally independently from the
marginal family. The nugget ``u`` is eliminated exactly by a Schur
complement, so each Newton step costs one sparse factorisation of

    S = Q + A^T diag(W P / (W + P)) A,

where ``W`` is the negative log-likelihood curvature and ``P = 1/tau2``.
For the Gaussian family one Newton step from zero is exact and all
replicates with the same missing-data pattern share one factorisation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from ..deform import CoeffLayout, DeformationCoeffs
from ..errors import (
    DegenerateMetricError,
    InferenceError,
    InputError,
    NonConvergenceError,
    NotSPDError,
)
from ..fvm import precision
from ..gmrf import CholeskyFactor, factorize, fill_ordering
from ..mesh import SphereMesh
from .families import MarginalFamily

log = logging.getLogger(__name__)

_EVAL_ERRORS = (NonConvergenceError, NotSPDError, DegenerateMetricError, FloatingPointError)


@dataclass(frozen=True)
class LaplaceConfig:
    """Numerical constants of the inner and outer loops."""

    newton_tol: float = 1e-8
    newton_max_iter: int = 50
    max_halvings: int = 20
    fd_step: float = 1e-4
    hess_step: float = 1e-2
    bfgs_gtol: float = 1e-3
    bfgs_maxiter: int = 200
    grid_step: float = 0.75
    grid_drop: float = 5.0
    grid_max_steps: int = 8
    explore: bool = True


@dataclass(frozen=True, eq=False)
class ObsData:
    """Observations mapped to mesh triangles.

    Attributes
    ----------
    tri : (n_loc,) triangle containing each location
    y : (n_rep, n_loc) responses, NaN where missing
    offset : (n_rep, n_loc) fixed linear predictor (temporal fit)
    nugget_domain : (n_loc,) governing domain (sea=0, land=1) of each location
    """

    tri: np.ndarray
    y: np.ndarray
    offset: np.ndarray
    nugget_domain: np.ndarray

    def __post_init__(self):
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        tri = np.asarray(self.tri, dtype=np.int64)
        off = np.broadcast_to(np.asarray(self.offset, dtype=float), y.shape).copy()
        dom = np.asarray(self.nugget_domain, dtype=np.int64)
        if y.shape[1] != len(tri) or dom.shape != tri.shape:
            raise InputError("y columns, tri and nugget_domain must agree in length")
        if not np.all(np.isfinite(off[np.isfinite(y)])):
            raise InputError("offset must be finite where y is observed")
        for name, val in (("tri", tri), ("y", y), ("offset", off), ("nugget_domain", dom)):
            object.__setattr__(self, name, val)

    @classmethod
    def from_points(cls, mesh: SphereMesh, points, y, offset=0.0) -> "ObsData":
        if not mesh.tagged:
            raise InputError("mesh must be region-tagged")
        tri = mesh.locate(points)
        return cls(tri, y, offset, mesh.domain[tri])

    @classmethod
    def empty(cls, n_loc: int = 0) -> "ObsData":
        return cls(np.zeros(n_loc, dtype=np.int64), np.full((1, n_loc), np.nan), 0.0,
                   np.zeros(n_loc, dtype=np.int64))

    @property
    def n_rep(self) -> int:
        return self.y.shape[0]

    @property
    def n_loc(self) -> int:
        return self.y.shape[1]

    def subset_locations(self, keep) -> "ObsData":
        keep = np.asarray(keep)
        return ObsData(self.tri[keep], self.y[:, keep], self.offset[:, keep], self.nugget_domain[keep])

    def subset_replicates(self, keep) -> "ObsData":
        keep = np.asarray(keep)
        return ObsData(self.tri, self.y[keep], self.offset[keep], self.nugget_domain)


@dataclass(eq=False)
class ReplicateMode:
    """Gaussian approximation of ``x_r`` at one hyperparameter value."""

    x: np.ndarray
    u: np.ndarray
    factor: CholeskyFactor | None
    log_marginal: float
    iterations: int = 0
    grad_norm: float = 0.0
    trace: list = field(default_factory=list)


@dataclass(eq=False)
class InnerResult:
    log_marginal: float
    modes: list
    groups: list


class LaplaceModel:
    """Laplace-approximated marginal likelihood ``log p(Y | theta)``.

    Parameters
    ----------
    mesh : region-tagged SphereMesh
    obs : ObsData
    family : MarginalFamily
    layout : CoeffLayout mapping the unconstrained ``theta`` to coefficients
    """

    def __init__(self, mesh: SphereMesh, obs: ObsData, family: MarginalFamily, layout: CoeffLayout,
                 config: LaplaceConfig | None = None):
        if not mesh.tagged:
            raise InputError("mesh must be region-tagged")
        if np.any((obs.tri < 0) | (obs.tri >= mesh.n_triangles)):
            raise InputError("observation triangle index out of range")
        if not family.valid_response(obs.y):
            raise InputError(f"responses outside the {family.kind} support")
        self.mesh = mesh
        self.obs = obs
        self.family = family
        self.layout = layout
        self.config = config or LaplaceConfig()
        n = mesh.n_triangles
        self.n = n
        self._perm = fill_ordering(precision(mesh, layout.expand(np.zeros(layout.size))))
        self._groups = self._mask_groups()
        self._warm: dict = {}
        self.n_evals = 0

    def _mask_groups(self):
        mask = np.isfinite(self.obs.y)
        groups = {}
        for r in range(self.obs.n_rep):
            if mask[r].any():
                groups.setdefault(mask[r].tobytes(), []).append(r)
        return [(np.flatnonzero(mask[rs[0]]), np.array(rs)) for rs in groups.values()]

    # -- prior ----------------------------------------------------------------
    @staticmethod
    def log_prior(theta) -> float:
        theta = np.asarray(theta, dtype=float)
        return float(-0.5 * theta @ theta - 0.5 * len(theta) * np.log(2 * np.pi))

    def coeffs(self, theta) -> DeformationCoeffs:
        return self.layout.expand(theta)

    # -- inner loop -----------------------------------------------------------
    def inner(self, theta, keep_factors: bool = False) -> InnerResult:
        """Gaussian approximations of every replicate at ``theta``."""
        self.n_evals += 1
        coeffs = self.coeffs(theta)
        Q = precision(self.mesh, coeffs)
        fq = factorize(Q, self._perm)
        P_loc = 1.0 / coeffs.nugget[self.obs.nugget_domain]
        total = 0.0
        modes = [None] * self.obs.n_rep
        for idx, reps in self._groups:
            tri_o = self.obs.tri[idx]
            P = P_loc[idx]
            if self.family.kind == "gaussian":
                res = self._gaussian_group(Q, fq, tri_o, P, idx, reps, keep_factors)
                for r, m in zip(reps, res):
                    modes[r] = m
                    total += m.log_marginal
            else:
                for r in reps:
                    m = self._newton(Q, fq, tri_o, P, self.obs.y[r, idx], self.obs.offset[r, idx], r,
                                     keep_factors)
                    modes[r] = m
                    total += m.log_marginal
        return InnerResult(total, modes, self._groups)

    def _gaussian_group(self, Q, fq, tri_o, P, idx, reps, keep):
        W = 1.0 / self.family.param
        c = W * P / (W + P)
        S = Q + sp.diags(np.bincount(tri_o, weights=c, minlength=self.n))
        fs = factorize(S, self._perm)
        resid = self.obs.y[np.ix_(reps, idx)] - self.obs.offset[np.ix_(reps, idx)]  # (R, m)
        rhs = np.stack([np.bincount(tri_o, weights=c * rr, minlength=self.n) for rr in resid], axis=1)
        X = fs.solve(rhs).T  # (R, n)
        const = (0.5 * fq.logdet - 0.5 * fs.logdet + 0.5 * np.sum(np.log(P)) - 0.5 * np.sum(np.log(W + P)))
        out = []
        for r_i, x in enumerate(X):
            g_u = W * resid[r_i]
            u = (g_u - W * x[tri_o]) / (W + P)
            eta = self.obs.offset[reps[r_i], idx] + x[tri_o] + u
            ll = float(np.sum(self.family.loglik(self.obs.y[reps[r_i], idx], eta)))
            lm = ll - 0.5 * float(x @ (Q @ x)) - 0.5 * float(np.sum(P * u * u)) + const
            out.append(ReplicateMode(x, u, fs if keep else None, lm, 1, 0.0))
        return out

    def _psi(self, Q, y, eta, x, u, P):
        ll = self.family.loglik(y, eta)
        if not np.all(np.isfinite(ll)):
            return -np.inf
        return float(np.sum(ll) - 0.5 * x @ (Q @ x) - 0.5 * np.sum(P * u * u))

    def _newton(self, Q, fq, tri_o, P, y, off, r, keep):
        cfg = self.config
        fam = self.family
        n = self.n
        warm = self._warm.get(r)
        if warm is not None and len(warm[1]) == len(y):
            x, u = warm[0].copy(), warm[1].copy()
        else:
            x, u = np.zeros(n), np.zeros(len(y))
        eta = off + x[tri_o] + u
        if not np.all(fam.feasible(eta)):
            x, u = np.zeros(n), np.zeros(len(y))
            eta = off + u
            bad = ~fam.feasible(eta)
            # start infeasible Gamma predictors at the saturated value -1/y
            u[bad] = -1.0 / y[bad] - off[bad]
            eta = off + u
        psi = self._psi(Q, y, eta, x, u, P)
        trace = [psi]
        it = 0
        while True:
            d1, W = fam.derivs(y, eta)
            gx = np.bincount(tri_o, weights=d1, minlength=n) - Q @ x
            gu = d1 - P * u
            gnorm = float(np.sqrt(gx @ gx + gu @ gu))
            if gnorm <= cfg.newton_tol:
                break
            if it >= cfg.newton_max_iter:
                raise NonConvergenceError(f"inner Newton stopped at gradient norm {gnorm:.3e}")
            c = W * P / (W + P)
            fs = factorize(Q + sp.diags(np.bincount(tri_o, weights=c, minlength=n)), self._perm)
            dx = fs.solve(gx - np.bincount(tri_o, weights=W / (W + P) * gu, minlength=n))
            du = (gu - W * dx[tri_o]) / (W + P)
            step = 1.0
            for _ in range(cfg.max_halvings + 1):
                xn, un = x + step * dx, u + step * du
                etan = off + xn[tri_o] + un
                psin = self._psi(Q, y, etan, xn, un, P) if np.all(fam.feasible(etan)) else -np.inf
                if psin >= psi - 1e-12 * max(1.0, abs(psi)):
                    break
                step *= 0.5
            else:
                if gnorm <= 1e3 * cfg.newton_tol:
                    break  # round-off floor reached
                raise NonConvergenceError("step halving failed to increase the objective")
            x, u, eta, psi = xn, un, etan, max(psin, psi)
            trace.append(psin)
            it += 1
        d1, W = fam.derivs(y, eta)
        c = W * P / (W + P)
        fs = factorize(Q + sp.diags(np.bincount(tri_o, weights=c, minlength=n)), self._perm)
        lm = psi + 0.5 * fq.logdet + 0.5 * np.sum(np.log(P)) - 0.5 * np.sum(np.log(W + P)) - 0.5 * fs.logdet
        self._warm[r] = (x, u)
        return ReplicateMode(x, u, fs if keep else None, float(lm), it, gnorm, trace)

    # -- outer objective -------------------------------------------------------
    def log_marginal(self, theta) -> float:
        return self.inner(theta).log_marginal

    def log_posterior(self, theta) -> float:
        return self.log_marginal(theta) + self.log_prior(theta)

    def safe_log_posterior(self, theta) -> float:
        try:
            val = self.log_posterior(theta)
        except _EVAL_ERRORS as exc:
            log.debug("theta rejected: %s", exc)
            return -np.inf
        return val if np.isfinite(val) else -np.inf

    def gradient(self, theta, h: float | None = None) -> np.ndarray:
        """Central-difference gradient of the log-posterior."""
        h = self.config.fd_step if h is None else h
        theta = np.asarray(theta, dtype=float)
        g = np.empty_like(theta)
        for k in range(len(theta)):
            e = np.zeros_like(theta)
            e[k] = h
            g[k] = (self.safe_log_posterior(theta + e) - self.safe_log_posterior(theta - e)) / (2 * h)
        return g


@dataclass(eq=False)
class HyperPosterior:
    """Explored hyperparameter points with integration weights.

    ``weights`` are normalised so that ``sum(weights * delta) == 1``.
    """

    layout: CoeffLayout
    mode: np.ndarray
    points: np.ndarray
    log_post: np.ndarray
    delta: np.ndarray
    weights: np.ndarray
    hessian: np.ndarray
    latent_means: list | None
    diagnostics: dict
    model: LaplaceModel | None = None
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def mixture_weights(self) -> np.ndarray:
        """Probability of each point, ``weights * delta``."""
        return self.weights * self.delta

    def posterior_mean(self) -> np.ndarray:
        return self.mixture_weights @ self.points

    def posterior_sd(self) -> np.ndarray:
        m = self.posterior_mean()
        return np.sqrt(np.maximum(self.mixture_weights @ (self.points - m) ** 2, 0.0))

    def coeffs(self, k: int | None = None) -> DeformationCoeffs:
        theta = self.mode if k is None else self.points[k]
        return self.layout.expand(theta)

    def to_dict(self) -> dict:
        return {
            "parameters": self.layout.names(),
            "mode": self.mode.tolist(),
            "posterior_mean": self.posterior_mean().tolist(),
            "posterior_sd": self.posterior_sd().tolist(),
            "grid": [
                {"theta": p.tolist(), "log_post": float(lp), "delta": float(d), "weight": float(w)}
                for p, lp, d, w in zip(self.points, self.log_post, self.delta, self.weights)
            ],
            "diagnostics": {k: v for k, v in self.diagnostics.items() if np.isscalar(v) or isinstance(v, list)},
        }


def _hessian(f, x0, f0, h):
    """Forward second differences of ``f`` with central diagonal terms."""
    p = len(x0)
    fp = np.empty(p)
    fm = np.empty(p)
    E = np.eye(p) * h
    for i in range(p):
        fp[i] = f(x0 + E[i])
        fm[i] = f(x0 - E[i])
    H = np.empty((p, p))
    for i in range(p):
        H[i, i] = (fp[i] - 2 * f0 + fm[i]) / h**2
        for j in range(i + 1, p):
            H[i, j] = H[j, i] = (f(x0 + E[i] + E[j]) - fp[i] - fp[j] + f0) / h**2
    return H


def laplace_fit(model: LaplaceModel, theta0=None, keep_latent: bool = True) -> HyperPosterior:
    """Mode search, curvature and grid exploration of ``log pi(theta | Y)``.

    Raises
    ------
    InferenceError
        If no explored point can be evaluated.
    """
    cfg = model.config
    p = model.layout.size
    theta0 = np.zeros(p) if theta0 is None else np.asarray(theta0, dtype=float)
    if not np.isfinite(model.safe_log_posterior(theta0)):
        raise InferenceError("log-posterior is not finite at the starting point")

    trace = []

    def fun(t):
        v = -model.safe_log_posterior(t)
        return v if np.isfinite(v) else 1e300

    def jac(t):
        return -model.gradient(t)

    def callback(xk):
        trace.append(float(-model.safe_log_posterior(xk)))

    res = minimize(fun, theta0, jac=jac, method="BFGS", callback=callback,
                   options={"gtol": cfg.bfgs_gtol, "maxiter": cfg.bfgs_maxiter})
    mode = np.asarray(res.x, dtype=float)
    lp_mode = model.safe_log_posterior(mode)
    if not np.isfinite(lp_mode):
        raise InferenceError("optimizer ended at an invalid hyperparameter")

    # curvature of the negative log-posterior at the mode
    negf = lambda t: -model.safe_log_posterior(t)  # noqa: E731
    H = _hessian(negf, mode, -lp_mode, cfg.hess_step)
    if not np.all(np.isfinite(H)):
        H = np.where(np.isfinite(H), H, 0.0)
    H = 0.5 * (H + H.T)
    evals, evecs = np.linalg.eigh(H)
    floor = max(1e-6, 1e-10 * np.max(np.abs(evals)))
    evals = np.maximum(evals, floor)
    scale = evecs / np.sqrt(evals)  # columns: standardised directions

    points = [mode]
    lps = [lp_mode]
    deltas = [cfg.grid_step]
    if cfg.explore:
        for k in range(p):
            for sign in (1.0, -1.0):
                walked = []
                for s in range(1, cfg.grid_max_steps + 1):
                    th = mode + sign * s * cfg.grid_step * scale[:, k]
                    lp = model.safe_log_posterior(th)
                    if not np.isfinite(lp) or lp_mode - lp > cfg.grid_drop:
                        break
                    walked.append((th, lp))
                for i, (th, lp) in enumerate(walked):
                    points.append(th)
                    lps.append(lp)
                    deltas.append(cfg.grid_step * (0.5 if i == len(walked) - 1 else 1.0))
    points = np.array(points)
    lps = np.array(lps)
    deltas = np.array(deltas)
    best = int(np.argmax(lps))
    if best != 0:
        # a grid point beat the optimizer: make it the stored mode
        order = np.r_[best, np.delete(np.arange(len(lps)), best)]
        points, lps, deltas = points[order], lps[order], deltas[order]
    w = np.exp(lps - lps.max())
    weights = w / np.sum(w * deltas)

    latent = None
    if keep_latent:
        latent = [np.array([m.x if m is not None else np.zeros(model.n)
                            for m in model.inner(th).modes]) for th in points]
    diagnostics = {
        "bfgs_iterations": int(res.nit),
        "bfgs_success": bool(res.success),
        "bfgs_message": str(res.message),
        "objective_trace": trace,
        "n_points": int(len(points)),
        "n_evals": int(model.n_evals),
        "hessian_eigenvalues": evals.tolist(),
    }
    return HyperPosterior(model.layout, points[0], points, lps, deltas, weights, H, latent, diagnostics, model)
