"""Simulation studies: posterior consistency, covariance KLD and interpolation skill.

Every simulation owns a generator spawned from ``SeedSequence(seed)`` and its
index, so studies are reproducible bit-for-bit regardless of the number of
worker processes.
"""
from __future__ import annotations

import csv
import enum
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .deform import CoeffLayout
from .errors import (
    DegenerateMetricError,
    InferenceError,
    InputError,
    NonConvergenceError,
    NotSPDError,
)
from .fvm import precision
from .geometry import lonlat_to_xyz, random_sphere_points
from .gmrf import dense_covariance, factorize, kld_gaussian, sample
from .lgm.families import MarginalFamily
from .lgm.laplace import LaplaceConfig, LaplaceModel, ObsData, laplace_fit
from .lgm.posterior import latent_mean
from .mesh import RegionMap, build_mesh, tag_regions

log = logging.getLogger(__name__)

FIT_ERRORS = (InferenceError, NonConvergenceError, NotSPDError, DegenerateMetricError, FloatingPointError,
              np.linalg.LinAlgError)


class ModelVariant(str, enum.Enum):
    NS_LS = "NS-LS"
    NS = "NS"
    S_LS = "S-LS"
    S = "S"

    def layout(self, order: int = 1) -> CoeffLayout:
        stationary = self in (ModelVariant.S_LS, ModelVariant.S)
        land_sea = self in (ModelVariant.NS_LS, ModelVariant.S_LS)
        return CoeffLayout(0 if stationary else order, land_sea)


ALL_VARIANTS = tuple(ModelVariant)

# cap centres (lon, lat) of the held-out areas; radius is calibrated to hold ~8% of points
DEFAULT_CAPS = ((-100.0, 40.0), (20.0, -10.0), (140.0, 30.0))


@dataclass(frozen=True)
class SimConfig:
    """Configuration of a simulation study (desk-scale defaults)."""

    n: int = 500
    mesh: str = "geodesic:5"
    buffer_km: float = 200.0
    order: int = 1
    n_r: tuple = (10, 40)
    n_s: int = 20
    sigma2: float = 0.05
    theta_mean: float = 1.0
    theta_sd: float = 0.5
    test_caps: tuple = DEFAULT_CAPS
    test_fraction: float = 0.08
    seed: int = 0
    variants: tuple = ("NS-LS", "NS", "S-LS", "S")
    explore: bool = True
    roc_grid: int = 101

    def __post_init__(self):
        if self.n < 10 or self.n_s < 1:
            raise InputError("n must be >= 10 and n_s >= 1")
        if not self.n_r or min(self.n_r) < 1:
            raise InputError("n_r must list positive replicate counts")
        if not 0.0 < self.test_fraction < 1.0:
            raise InputError("test_fraction must be in (0, 1)")
        if self.sigma2 <= 0 or self.theta_sd < 0:
            raise InputError("sigma2 must be positive and theta_sd non-negative")
        for v in self.variants:
            ModelVariant(v)
        object.__setattr__(self, "n_r", tuple(int(r) for r in self.n_r))
        object.__setattr__(self, "test_caps", tuple(tuple(map(float, c)) for c in self.test_caps))
        object.__setattr__(self, "variants", tuple(self.variants))

    @property
    def split(self) -> tuple:
        return (1.0 - self.test_fraction, self.test_fraction)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_r"] = list(self.n_r)
        d["test_caps"] = [list(c) for c in self.test_caps]
        d["variants"] = list(self.variants)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise InputError(f"unknown simulation config keys: {sorted(extra)}")
        kw = dict(d)
        for key in ("n_r", "variants"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "test_caps" in kw:
            kw["test_caps"] = tuple(tuple(c) for c in kw["test_caps"])
        return cls(**kw)


@dataclass
class SimResult:
    """Tidy rows ``(study, sim, variant, n_r, metric, value)`` plus status.

    ``curves`` maps ``(study, variant, case)`` to ``{sim: tpr}`` with the
    true-positive rate on a common false-positive grid.
    """

    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)

    def add(self, study, sim, variant, n_r, metric, value):
        self.rows.append((study, int(sim), str(variant), int(n_r), str(metric), float(value)))

    def extend(self, other: "SimResult"):
        self.rows += other.rows
        self.failures += other.failures
        for k, v in other.curves.items():
            self.curves.setdefault(k, {}).update(v)

    def values(self, metric, variant=None, n_r=None) -> dict:
        """``{sim: value}`` for one metric, optionally filtered."""
        out = {}
        for _study, sim, var, nr, met, val in self.rows:
            if met == metric and (variant is None or var == variant) and (n_r is None or nr == n_r):
                out[sim] = val
        return out

    def median(self, metric, variant=None, n_r=None) -> float:
        v = list(self.values(metric, variant, n_r).values())
        return float(np.median(v)) if v else math.nan

    def curve_matrix(self, key) -> np.ndarray:
        """Curves of one ``(study, variant, case)`` stacked in simulation order."""
        cur = self.curves[key]
        return np.array([cur[k] for k in sorted(cur)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["study", "sim", "variant", "n_r", "metric", "value"])
        for r in sorted(self.rows, key=lambda r: r[:5]):
            w.writerow([r[0], r[1], r[2], r[3], r[4], repr(r[5])])
        return buf.getvalue()

    def failures_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["study", "sim", "variant", "n_r", "error"])
        for f in sorted(self.failures):
            w.writerow(list(f))
        return buf.getvalue()


# -- shared set-up ---------------------------------------------------------
_MESH_CACHE: dict = {}


def sim_mesh(cfg: SimConfig):
    key = (cfg.mesh, cfg.buffer_km)
    if key not in _MESH_CACHE:
        _MESH_CACHE[key] = tag_regions(build_mesh(cfg.mesh), RegionMap.world(cfg.buffer_km))
    return _MESH_CACHE[key]


def sim_streams(cfg: SimConfig, sim: int):
    """Independent generators for locations, truth, fields and noise of one simulation."""
    ss = np.random.SeedSequence([cfg.seed, sim])
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def draw_truth(cfg: SimConfig, rng) -> np.ndarray:
    """Transformed NS-LS hyperparameters drawn i.i.d. N(theta_mean, theta_sd^2)."""
    return rng.normal(cfg.theta_mean, cfg.theta_sd, CoeffLayout(cfg.order, True).size)


def cap_split(points, caps, fraction: float):
    """Boolean test mask: the points inside three equal-radius caps.

    The common angular radius is the smallest one at which the caps hold at
    least ``fraction`` of the points.
    """
    pts = np.asarray(points, dtype=float)
    centres = lonlat_to_xyz(np.array([c[0] for c in caps]), np.array([c[1] for c in caps]))
    ang = np.arccos(np.clip(pts @ centres.T, -1.0, 1.0)).min(axis=1)
    k = max(int(math.ceil(fraction * len(pts))), 1)
    radius = np.sort(ang)[k - 1]
    return ang <= radius


def observation_covariance(mesh, coeffs, tri, dom) -> np.ndarray:
    """Dense covariance of ``x[tri] + u`` at the observation locations."""
    C = dense_covariance(factorize(precision(mesh, coeffs)))
    S = C[np.ix_(tri, tri)]
    S[np.diag_indices_from(S)] += coeffs.nugget[dom]
    return S


@dataclass(frozen=True, eq=False)
class SimData:
    points: np.ndarray
    tri: np.ndarray
    dom: np.ndarray
    theta: np.ndarray
    x: np.ndarray  # (n_r, n_T) latent fields
    y: np.ndarray  # (n_r, n) responses
    test: np.ndarray


def simulate(cfg: SimConfig, sim: int, family: str = "gaussian", n_rep: int | None = None) -> SimData:
    """Draw locations, NS-LS truth, latent fields and responses for one simulation."""
    mesh = sim_mesh(cfg)
    r_loc, r_theta, r_field, r_noise = sim_streams(cfg, sim)
    n_rep = max(cfg.n_r) if n_rep is None else n_rep
    pts = random_sphere_points(r_loc, cfg.n)
    tri = mesh.locate(pts)
    dom = mesh.domain[tri]
    theta = draw_truth(cfg, r_theta)
    coeffs = CoeffLayout(cfg.order, True).expand(theta)
    x = sample(factorize(precision(mesh, coeffs)), n_rep, r_field)
    eta = x[:, tri] + r_noise.standard_normal((n_rep, cfg.n)) * np.sqrt(coeffs.nugget[dom])
    if family == "gaussian":
        y = MarginalFamily.gaussian(cfg.sigma2).sample(r_noise, eta)
    elif family == "bernoulli":
        y = MarginalFamily.bernoulli().sample(r_noise, eta)
    else:
        raise InputError(f"unsupported simulation family {family!r}")
    test = cap_split(pts, cfg.test_caps, cfg.test_fraction)
    return SimData(pts, tri, dom, theta, x, y, test)


def _family(cfg, kind):
    return MarginalFamily.gaussian(cfg.sigma2) if kind == "gaussian" else MarginalFamily.bernoulli()


def _fit(cfg, obs, kind, variant):
    layout = ModelVariant(variant).layout(cfg.order)
    model = LaplaceModel(sim_mesh(cfg), obs, _family(cfg, kind), layout, LaplaceConfig(explore=cfg.explore))
    return laplace_fit(model, keep_latent=True)


# -- consistency ------------------------------------------------------------
def consistency_one(cfg: SimConfig, sim: int) -> SimResult:
    out = SimResult()
    data = simulate(cfg, sim, "gaussian")
    mesh = sim_mesh(cfg)
    layout = CoeffLayout(cfg.order, True)
    S_true = observation_covariance(mesh, layout.expand(data.theta), data.tri, data.dom)
    for nr in cfg.n_r:
        obs = ObsData(data.tri, data.y[:nr], 0.0, data.dom)
        try:
            hp = _fit(cfg, obs, "gaussian", ModelVariant.NS_LS)
        except FIT_ERRORS as exc:
            out.failures.append(("consistency", sim, "NS-LS", nr, f"{type(exc).__name__}: {exc}"))
            continue
        pm = hp.posterior_mean()
        out.add("consistency", sim, "NS-LS", nr, "hyper_mse", np.mean((pm - data.theta) ** 2))
        S_fit = observation_covariance(mesh, layout.expand(pm), data.tri, data.dom)
        out.add("consistency", sim, "NS-LS", nr, "kld", kld_gaussian(S_true, S_fit))
        for name, sd in zip(layout.names(), hp.posterior_sd()):
            out.add("consistency", sim, "NS-LS", nr, f"post_sd:{name}", sd)
        for name, m in zip(layout.names(), pm):
            out.add("consistency", sim, "NS-LS", nr, f"post_mean:{name}", m)
    return out


# -- interpolation ----------------------------------------------------------
def roc_curve(scores, labels):
    """ROC points ``(fpr, tpr)`` from the highest threshold down; ties share a point."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        raise InputError("ROC needs both classes")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    cut = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[cut]
    fp = np.cumsum(~y)[cut]
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    return fpr, tpr


def auc(scores, labels) -> float:
    fpr, tpr = roc_curve(scores, labels)
    return float(np.trapezoid(tpr, fpr))


def roc_on_grid(scores, labels, grid) -> np.ndarray:
    fpr, tpr = roc_curve(scores, labels)
    return np.interp(grid, fpr, tpr)


def interpolation_one(cfg: SimConfig, sim: int, family: str = "gaussian", n_rep: int | None = None) -> SimResult:
    """Fit every variant on all locations and on the training split of one simulation."""
    out = SimResult()
    n_rep = min(cfg.n_r) if n_rep is None else n_rep
    data = simulate(cfg, sim, family, n_rep)
    train = np.flatnonzero(~data.test)
    test = np.flatnonzero(data.test)
    grid = np.linspace(0.0, 1.0, cfg.roc_grid)
    study = f"interp-{family}"
    for variant in cfg.variants:
        for case, fit_idx, eval_idx in (("all", np.arange(cfg.n), np.arange(cfg.n)), ("cv", train, test)):
            obs = ObsData(data.tri[fit_idx], data.y[:, fit_idx], 0.0, data.dom[fit_idx])
            try:
                hp = _fit(cfg, obs, family, variant)
            except FIT_ERRORS as exc:
                out.failures.append((study, sim, variant, n_rep, f"{case} {type(exc).__name__}: {exc}"))
                continue
            xhat = latent_mean(hp)[:, data.tri[eval_idx]]  # (n_rep, m)
            if family == "gaussian":
                err = xhat - data.x[:, data.tri[eval_idx]]
                out.add(study, sim, variant, n_rep, f"mse_{case}", np.mean(err**2))
            else:
                labels = data.y[:, eval_idx].ravel()
                scores = xhat.ravel()
                out.add(study, sim, variant, n_rep, f"auc_{case}", auc(scores, labels))
                out.curves.setdefault((study, variant, case), {})[sim] = roc_on_grid(scores, labels, grid)
    return out


# -- functional boxplot ------------------------------------------------------
def band_depth(curves) -> np.ndarray:
    """Modified band depth of order 2 for each row of ``curves`` (n, p)."""
    c = np.asarray(curves, dtype=float)
    if c.ndim != 2 or c.shape[0] < 2:
        raise InputError("band depth needs at least two curves on a common grid")
    n = c.shape[0]
    above = (c[None, :, :] > c[:, None, :]).sum(axis=1)
    below = (c[None, :, :] < c[:, None, :]).sum(axis=1)
    pairs = n * (n - 1) / 2.0
    inside = pairs - above * (above - 1) / 2.0 - below * (below - 1) / 2.0
    return inside.mean(axis=1) / pairs


@dataclass(frozen=True, eq=False)
class FunctionalBox:
    depth: np.ndarray
    median: np.ndarray
    central_lo: np.ndarray
    central_hi: np.ndarray
    outer_lo: np.ndarray
    outer_hi: np.ndarray
    outliers: np.ndarray


def functional_box(curves, inflation: float = 1.5) -> FunctionalBox:
    """Median curve, central-50% envelope and non-outlying envelope."""
    c = np.asarray(curves, dtype=float)
    if c.ndim != 2:
        raise InputError("curves must be a 2-D array on a common grid")
    if c.shape[0] < 3:
        raise InputError("functional boxplot needs at least 3 curves")
    if not np.all(np.isfinite(c)):
        raise InputError("curves must be finite")
    depth = band_depth(c)
    order = np.argsort(-depth, kind="stable")
    central = c[order[: int(math.ceil(c.shape[0] / 2))]]
    lo, hi = central.min(axis=0), central.max(axis=0)
    span = hi - lo
    fence_lo, fence_hi = lo - inflation * span, hi + inflation * span
    inside = np.all((c >= fence_lo) & (c <= fence_hi), axis=1)
    keep = c[inside]
    return FunctionalBox(depth, c[order[0]].copy(), lo, hi, keep.min(axis=0), keep.max(axis=0),
                         np.flatnonzero(~inside))


def envelopes_csv(curves, grid) -> str:
    fb = functional_box(curves)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "median", "central_lo", "central_hi", "outer_lo", "outer_hi"])
    for row in zip(grid, fb.median, fb.central_lo, fb.central_hi, fb.outer_lo, fb.outer_hi):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


# -- drivers ------------------------------------------------------------------
def _sim_indices(cfg, sims):
    if sims is None:
        return list(range(cfg.n_s))
    sims = sorted({int(s) for s in sims})
    if not sims or sims[0] < 0 or sims[-1] >= cfg.n_s:
        raise InputError(f"simulation indices must lie in [0, {cfg.n_s})")
    return sims


def _run(fn, cfg, jobs, sims, *args) -> SimResult:
    res = SimResult()
    sims = _sim_indices(cfg, sims)
    m = len(sims)
    if jobs and jobs > 1 and m > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, m)) as pool:
            parts = list(pool.map(fn, [cfg] * m, sims, *[[a] * m for a in args]))
    else:
        parts = [fn(cfg, s, *args) for s in sims]
    for p in parts:
        res.extend(p)
    return res


def run_consistency(cfg: SimConfig, jobs: int = 1, sims=None) -> SimResult:
    """Hyperparameter MSE and covariance KLD against the number of replicates.

    ``sims`` restricts the run to a subset of simulation indices; each
    simulation draws from its own seed stream, so a subset reproduces the
    corresponding rows of the full run.
    """
    return _run(consistency_one, cfg, jobs, sims)


def run_interpolation(cfg: SimConfig, family: str = "gaussian", jobs: int = 1, n_rep: int | None = None,
                      sims=None) -> SimResult:
    """Interpolation MSE (Gaussian) or AUC and ROC curves (Bernoulli) for every variant."""
    if family not in ("gaussian", "bernoulli"):
        raise InputError("family must be 'gaussian' or 'bernoulli'")
    return _run(interpolation_one, cfg, jobs, sims, family, n_rep)


def roc_difference(result: SimResult, family: str = "bernoulli", case: str = "cv", reference: str = "S"):
    """Mean ROC difference curve of every variant against ``reference``, over paired simulations."""
    study = f"interp-{family}"
    ref = result.curves[(study, reference, case)]
    out = {}
    for (s, v, c), cur in result.curves.items():
        if s != study or c != case or v == reference:
            continue
        common = sorted(set(cur) & set(ref))
        if common:
            out[v] = np.mean([cur[k] - ref[k] for k in common], axis=0)
    return out


def paired_win_rate(result: SimResult, metric: str, better: str, worse: str, lower_is_better: bool = True):
    """Fraction of simulations (fitted by both variants) where ``better`` wins."""
    a = result.values(metric, better)
    b = result.values(metric, worse)
    common = sorted(set(a) & set(b))
    if not common:
        return math.nan, 0
    wins = [(a[s] < b[s]) if lower_is_better else (a[s] > b[s]) for s in common]
    return float(np.mean(wins)), len(common)


PRESETS = {
    "table1-desk": SimConfig(),
    "table2-desk": SimConfig(n_r=(10,)),
    "smoke": SimConfig(n=120, mesh="geodesic:3", n_r=(3, 6), n_s=2, explore=False),
    "table1-full": SimConfig(n=2000, mesh="geodesic:10", n_r=tuple(range(10, 101, 10)), n_s=100),
    "table2-full": SimConfig(n=2000, mesh="geodesic:10", n_r=(100,), n_s=100),
}


def preset(name: str, **overrides) -> SimConfig:
    if name not in PRESETS:
        raise InputError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)
