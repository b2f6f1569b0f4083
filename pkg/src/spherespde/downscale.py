"""Precipitation downscaling: gridded model output to station sites.

Steps
-----
1. ``make_events`` splits daily totals into a wet/dry occurrence series and
   a wet-day intensity series.
2. ``fit_application`` fits the temporal model at every grid cell and then a
   Bernoulli (logit) and a Gamma (negative-inverse) latent Gaussian model
   with a deformed-SPDE daily anomaly field.
3. The fitted models are interpolated to the stations, where
   ``fit_downscale`` regresses station quantities on the interpolated ones
   (logit-logit for occurrence, log-log for intensity).
4. ``evaluate`` reports RMSE, R^2 and leave-one-station-out coverage.
"""
from __future__ import annotations

import csv
import gzip
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree
from scipy.special import expit, logit

from .deform import CoeffLayout
from .errors import FormatError, InputError, InsufficientDataError
from .fvm import precision
from .geometry import lonlat_to_xyz
from .gmrf import factorize, sample
from .lgm.families import MarginalFamily
from .lgm.laplace import HyperPosterior, LaplaceConfig, LaplaceModel, ObsData, laplace_fit
from .lgm.posterior import ResponsePrediction, predict_response
from .lgm.temporal import TemporalFit, fit_temporal
from .mesh import RegionMap, SphereMesh, build_mesh, tag_regions

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86_400.0
GAUGE_CAPACITY_MM = 600.0
DEFAULT_WET_MM = 0.1
PROB_CLAMP = 1e-6
TARGETS = ("occurrence", "intensity")


def convert_mrr(raw) -> np.ndarray:
    """Mean rain rate in kg m^-2 s^-1 to a daily total in mm."""
    raw = np.asarray(raw, dtype=float)
    if np.any(raw[np.isfinite(raw)] < 0):
        raise InputError("rain rates must be non-negative")
    # kg/m^2 over one day is a depth in mm (density 1000 kg/m^3, 1000 mm/m)
    return raw * SECONDS_PER_DAY


# -- series containers -------------------------------------------------------
def _check_dates(dates) -> np.ndarray:
    d = np.asarray(dates, dtype="datetime64[D]")
    if d.ndim != 1 or len(d) == 0:
        raise InputError("dates must be a non-empty 1-D sequence")
    if len(d) > 1 and not np.all(np.diff(d) == np.timedelta64(1, "D")):
        raise InputError("dates must be contiguous daily")
    return d


def _check_values(values, n_sites, n_dates) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.shape != (n_sites, n_dates):
        raise InputError(f"values must have shape ({n_sites}, {n_dates}), got {v.shape}")
    if np.any(v[np.isfinite(v)] < 0):
        raise InputError("precipitation values must be non-negative")
    return v


@dataclass(frozen=True, eq=False)
class GridSeries:
    """Daily gridded totals in mm; ``values[i, t]`` at cell ``i`` and date ``t``."""

    lon: np.ndarray
    lat: np.ndarray
    dates: np.ndarray
    values: np.ndarray
    regular: bool = False
    note: str = ""

    def __post_init__(self):
        lon = np.asarray(self.lon, dtype=float).ravel()
        lat = np.asarray(self.lat, dtype=float).ravel()
        if lon.shape != lat.shape:
            raise InputError("lon and lat must have the same length")
        d = _check_dates(self.dates)
        v = _check_values(self.values, len(lon), len(d))
        if self.regular:
            for axis in (np.unique(lon), np.unique(lat)):
                if len(axis) > 2 and not np.allclose(np.diff(axis), axis[1] - axis[0]):
                    raise InputError("grid declared regular but spacing is not constant")
        for name, val in (("lon", lon), ("lat", lat), ("dates", d), ("values", v)):
            object.__setattr__(self, name, val)

    @property
    def n_cells(self) -> int:
        return len(self.lon)

    @property
    def points(self) -> np.ndarray:
        return lonlat_to_xyz(self.lon, self.lat)


@dataclass(frozen=True, eq=False)
class StationSeries:
    """Daily station totals in mm with the gauge-capacity check."""

    ids: tuple
    lon: np.ndarray
    lat: np.ndarray
    dates: np.ndarray
    values: np.ndarray
    capacity_mm: float = GAUGE_CAPACITY_MM

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        lon = np.asarray(self.lon, dtype=float).ravel()
        lat = np.asarray(self.lat, dtype=float).ravel()
        if not len(ids) == len(lon) == len(lat):
            raise InputError("ids, lon and lat must have the same length")
        if len(set(ids)) != len(ids):
            raise InputError("station ids must be unique")
        d = _check_dates(self.dates)
        v = _check_values(self.values, len(ids), len(d))
        for name, val in (("ids", ids), ("lon", lon), ("lat", lat), ("dates", d), ("values", v)):
            object.__setattr__(self, name, val)
        n_over = int(np.sum(self.over_capacity))
        if n_over:
            log.warning("%d station values exceed the %.0f mm gauge capacity", n_over, self.capacity_mm)

    @property
    def n_stations(self) -> int:
        return len(self.ids)

    @property
    def points(self) -> np.ndarray:
        return lonlat_to_xyz(self.lon, self.lat)

    @property
    def over_capacity(self) -> np.ndarray:
        """Boolean mask of values above the gauge capacity (kept, but flagged)."""
        return np.nan_to_num(self.values, nan=0.0) > self.capacity_mm

    def drop(self, i: int) -> "StationSeries":
        keep = np.arange(self.n_stations) != i
        return StationSeries(tuple(np.array(self.ids)[keep]), self.lon[keep], self.lat[keep], self.dates,
                             self.values[keep], self.capacity_mm)


@dataclass(frozen=True, eq=False)
class Events:
    occurrence: np.ndarray
    intensity: np.ndarray
    threshold: float


def make_events(values, wet_threshold: float = DEFAULT_WET_MM) -> Events:
    """Occurrence ``value > threshold`` and wet-day intensity (NaN on dry days).

    Missing values stay missing in both series.
    """
    if wet_threshold < 0:
        raise InputError("wet threshold must be non-negative")
    v = np.asarray(values.values if hasattr(values, "values") else values, dtype=float)
    miss = ~np.isfinite(v)
    wet = np.where(miss, False, v > wet_threshold)
    occ = np.where(miss, np.nan, wet.astype(float))
    inten = np.where(wet, v, np.nan)
    return Events(occ, inten, float(wet_threshold))


def period_for(dates) -> float:
    """Harmonic period: 366 for leap years, else 365 (years taken from the first date)."""
    year = int(np.datetime64(dates[0], "Y").astype(int)) + 1970
    leap = (year % 4 == 0 and year % 100 != 0) or year % 400 == 0
    return 366.0 if leap else 365.0


def day_of_year(dates) -> np.ndarray:
    d = np.asarray(dates, dtype="datetime64[D]")
    return (d - d.astype("datetime64[Y]")).astype(int).astype(float) + 1.0


# -- CSV input / output -------------------------------------------------------
GRID_COLUMNS = ("lon", "lat", "date", "value")
STATION_COLUMNS = ("station_id", "lon", "lat", "date", "value")


def _open_text(path, mode="r"):
    """Open a CSV, transparently gzip-compressed when the name ends in ``.gz``."""
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t", newline="")
    return open(path, mode, newline="")


def _read_rows(path, columns):
    with _open_text(path) as fh:
        reader = csv.DictReader(fh)
        missing = set(columns) - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        return list(reader)


def _pivot(keys, dates, values):
    site_keys = list(dict.fromkeys(keys))
    index = {k: i for i, k in enumerate(site_keys)}
    d = np.array(dates, dtype="datetime64[D]")
    all_dates = np.arange(d.min(), d.max() + np.timedelta64(1, "D"))
    out = np.full((len(site_keys), len(all_dates)), np.nan)
    out[[index[k] for k in keys], (d - d.min()).astype(int)] = values
    return site_keys, all_dates, out


def read_grid_csv(path, note: str = "") -> GridSeries:
    """Long-format grid CSV (``lon,lat,date,value``); absent dates become NaN."""
    rows = _read_rows(path, GRID_COLUMNS)
    try:
        keys = [(float(r["lon"]), float(r["lat"])) for r in rows]
        vals = [float(r["value"]) if r["value"] != "" else np.nan for r in rows]
        sites, dates, values = _pivot(keys, [r["date"] for r in rows], vals)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    lon, lat = np.array(sites).T
    return GridSeries(lon, lat, dates, values, note=note or str(path))


def read_station_csv(path) -> StationSeries:
    rows = _read_rows(path, STATION_COLUMNS)
    try:
        ids = [r["station_id"] for r in rows]
        vals = [float(r["value"]) if r["value"] != "" else np.nan for r in rows]
        sites, dates, values = _pivot(ids, [r["date"] for r in rows], vals)
        loc = {}
        for r in rows:
            loc.setdefault(r["station_id"], (float(r["lon"]), float(r["lat"])))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    lon, lat = np.array([loc[s] for s in sites]).T
    return StationSeries(tuple(sites), lon, lat, dates, values)


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def write_grid_csv(grid: GridSeries, path) -> None:
    with _open_text(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for i in range(grid.n_cells):
            for t, d in enumerate(grid.dates):
                w.writerow([repr(float(grid.lon[i])), repr(float(grid.lat[i])), str(d), _fmt(grid.values[i, t])])


def write_station_csv(st: StationSeries, path) -> None:
    with _open_text(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATION_COLUMNS)
        for i, sid in enumerate(st.ids):
            for t, d in enumerate(st.dates):
                w.writerow([sid, repr(float(st.lon[i])), repr(float(st.lat[i])), str(d), _fmt(st.values[i, t])])


# -- application models --------------------------------------------------------
@dataclass(frozen=True)
class ApplicationConfig:
    """Settings of the grid-level models and the downscaling step."""

    K: int = 2
    period: float | None = None
    order: int = 1
    land_sea: bool = True
    wet_threshold: float = DEFAULT_WET_MM
    fit_dates: tuple | None = None
    per_date: bool = True
    neighbors: int = 4
    n_draws: int = 1000
    level: float = 0.95
    seed: int = 0
    explore: bool = True

    def layout(self) -> CoeffLayout:
        return CoeffLayout(self.order, self.land_sea)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fit_dates"] = None if self.fit_dates is None else list(self.fit_dates)
        return d


@dataclass(eq=False)
class TargetModel:
    """Temporal fit plus spatial hyperposterior for one target."""

    target: str
    temporal: TemporalFit
    hyper: HyperPosterior
    dates: np.ndarray  # indices of the grid dates used as spatial replicates

    @property
    def family(self) -> MarginalFamily:
        return self.temporal.family


@dataclass(eq=False)
class ApplicationFit:
    mesh: SphereMesh
    grid: GridSeries
    config: ApplicationConfig
    models: dict = field(default_factory=dict)
    cells: dict = field(default_factory=dict)

    def replicate_of(self, date_index: int) -> int:
        dates = self.models["occurrence"].dates
        hit = np.flatnonzero(dates == date_index)
        if not len(hit):
            raise InputError(f"date index {date_index} was not part of the spatial fit")
        return int(hit[0])

    def predict(self, target: str, points, date_index: int, seed=None, **kw) -> ResponsePrediction:
        """Response-scale prediction of ``target`` at ``points`` on one grid date."""
        m = self.models[target]
        r = self.replicate_of(date_index)
        time = m.temporal.times[date_index]
        seed = self.config.seed if seed is None else seed
        return predict_response(m.hyper, _temporal_rows(m.temporal, m.dates), m.family, points, r, time=time,
                                neighbors=self.config.neighbors, n_draws=self.config.n_draws, seed=seed,
                                level=self.config.level, **kw)


def _temporal_rows(fit: TemporalFit, dates) -> TemporalFit:
    # predict_response only reads coefficients and times; times index replicates
    return replace(fit, times=fit.times[np.asarray(dates)])


def _fit_target(target, mesh, grid, series, family, cfg, dates, times, period):
    temporal = fit_temporal(series, family, K=cfg.K, period=period, times=times)
    bad = temporal.rank_deficient
    if bad.any():
        log.warning("%s: %d grid cells with rank-deficient temporal fits are left out", target, int(bad.sum()))
    keep = np.flatnonzero(~bad)
    if len(keep) < 3:
        raise InsufficientDataError(f"{target}: fewer than 3 grid cells with a usable temporal fit")
    temporal = replace(temporal, coef=temporal.coef[keep], fitted=temporal.fitted[keep],
                       rank_deficient=bad[keep], separated=temporal.separated[keep],
                       converged=temporal.converged[keep])
    y = series[keep][:, dates].T
    offset = temporal.fitted[:, dates].T
    tri = mesh.locate(grid.points[keep])
    obs = ObsData(tri, y, np.where(np.isfinite(y), offset, 0.0), mesh.domain[tri])
    model = LaplaceModel(mesh, obs, temporal.family, cfg.layout(), LaplaceConfig(explore=cfg.explore))
    hp = laplace_fit(model, keep_latent=False)
    return TargetModel(target, temporal, hp, np.asarray(dates)), keep


def fit_application(grid: GridSeries, mesh: SphereMesh, K: int = 2, config: ApplicationConfig | None = None
                    ) -> ApplicationFit:
    """Occurrence (Bernoulli, logit) and intensity (Gamma, negative inverse) grid models.

    The temporal model is fitted at every cell on all dates; its fitted
    predictor enters the spatial model as a fixed offset. The spatial
    hyperparameters are estimated from the dates in ``config.fit_dates``
    (default: all dates), each date being an independent replicate.
    """
    cfg = replace(config or ApplicationConfig(), K=K)
    if not mesh.tagged:
        raise InputError("mesh must be region-tagged")
    period = cfg.period or period_for(grid.dates)
    times = day_of_year(grid.dates)
    dates = np.arange(len(grid.dates)) if cfg.fit_dates is None else np.asarray(cfg.fit_dates, dtype=int)
    if np.any((dates < 0) | (dates >= len(grid.dates))):
        raise InputError("fit_dates out of range")
    ev = make_events(grid, cfg.wet_threshold)
    fit = ApplicationFit(mesh, grid, replace(cfg, period=period))
    occ, keep_o = _fit_target("occurrence", mesh, grid, ev.occurrence, MarginalFamily.bernoulli(), cfg, dates,
                              times, period)
    inten, keep_i = _fit_target("intensity", mesh, grid, ev.intensity, MarginalFamily.gamma(1.0), cfg, dates,
                                times, period)
    fit.models = {"occurrence": occ, "intensity": inten}
    fit.cells = {"occurrence": keep_o, "intensity": keep_i}
    return fit


# -- downscaling regressions -----------------------------------------------------
def _transform(target, values):
    v = np.asarray(values, dtype=float)
    if target == "occurrence":
        return logit(np.clip(v, PROB_CLAMP, 1.0 - PROB_CLAMP))
    if target == "intensity":
        if np.any(v[np.isfinite(v)] <= 0):
            raise InputError("intensity values must be positive")
        return np.log(v)
    raise InputError(f"unknown target {target!r}")


def _inverse(target, z):
    return expit(z) if target == "occurrence" else np.exp(z)


@dataclass(frozen=True)
class DownscaleFit:
    """OLS fit ``T(station) = beta0 + beta1 T(model) + xi`` on the link scale."""

    target: str
    beta0: float
    beta1: float
    sigma2: float
    r2: float
    n: int
    xbar: float
    sxx: float
    pooled: bool = False
    date: int | None = None

    @property
    def se(self) -> tuple:
        s0 = np.sqrt(self.sigma2 * (1.0 / self.n + self.xbar**2 / self.sxx))
        return float(s0), float(np.sqrt(self.sigma2 / self.sxx))

    @property
    def cov(self) -> np.ndarray:
        c01 = -self.xbar * self.sigma2 / self.sxx
        s0, s1 = self.se
        return np.array([[s0**2, c01], [c01, s1**2]])

    def predict(self, model_hat) -> np.ndarray:
        return _inverse(self.target, self.beta0 + self.beta1 * _transform(self.target, model_hat))

    def interval(self, model_hat, level: float = 0.95):
        """OLS prediction interval mapped back to the response scale."""
        x = _transform(self.target, model_hat)
        se = np.sqrt(self.sigma2 * (1.0 + 1.0 / self.n + (x - self.xbar) ** 2 / self.sxx))
        q = stats.t.ppf(0.5 + level / 2.0, self.n - 2)
        m = self.beta0 + self.beta1 * x
        return _inverse(self.target, m - q * se), _inverse(self.target, m + q * se)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["se_beta0"], d["se_beta1"] = self.se
        return d


def fit_downscale(station_hat, model_hat, target: str, pooled: bool = False, date=None) -> DownscaleFit:
    """Ordinary least squares on the logit (occurrence) or log (intensity) scale.

    Non-finite pairs are dropped. Raises InsufficientDataError with fewer
    than 3 pairs or a constant regressor.
    """
    y = _transform(target, np.ravel(station_hat))
    x = _transform(target, np.ravel(model_hat))
    if x.shape != y.shape:
        raise InputError("station_hat and model_hat must be paired")
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    n = len(x)
    if n < 3:
        raise InsufficientDataError(f"{target}: {n} pairs, need at least 3")
    xbar, ybar = x.mean(), y.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    if sxx <= 1e-12 * max(1.0, float(np.sum(x * x))):
        raise InsufficientDataError(f"{target}: regressor is constant")
    b1 = float(np.sum((x - xbar) * (y - ybar)) / sxx)
    b0 = float(ybar - b1 * xbar)
    resid = y - b0 - b1 * x
    sse = float(resid @ resid)
    syy = float(np.sum((y - ybar) ** 2))
    r2 = 1.0 if syy == 0 else min(max(1.0 - sse / syy, 0.0), 1.0)
    return DownscaleFit(target, b0, b1, sse / (n - 2) if n > 2 else 0.0, r2, n, float(xbar), sxx, pooled, date)


# -- station-side quantities -------------------------------------------------------
def station_occurrence_hat(stations: StationSeries, cfg: ApplicationConfig, period: float) -> np.ndarray:
    """Per-station time-series-only occurrence probability (no spatial term)."""
    ev = make_events(stations, cfg.wet_threshold)
    fit = fit_temporal(ev.occurrence, MarginalFamily.bernoulli(), K=cfg.K, period=period,
                       times=day_of_year(stations.dates))
    return expit(fit.fitted)


def nearest_cells(grid: GridSeries, points) -> np.ndarray:
    return cKDTree(grid.points).query(np.atleast_2d(points))[1]


@dataclass(eq=False)
class DownscaleResult:
    """Station-date arrays (stations, dates) of regressors, fits and predictions."""

    mode: str
    dates: np.ndarray
    station_truth: dict
    regressor: dict
    regressor_var: dict
    fits: dict
    predictions: dict
    config: ApplicationConfig


def _spde_regressors(app: ApplicationFit, points, dates):
    """Posterior medians (and link-scale variances) of the grid quantities at ``points``."""
    reg, var = {}, {}
    for target in TARGETS:
        med = np.full((len(points), len(dates)), np.nan)
        v = np.full_like(med, np.nan)
        for j, d in enumerate(dates):
            pr = app.predict(target, points, int(d), include_nugget=False, keep_draws=True)
            med[:, j] = pr.median
            v[:, j] = np.var(_transform(target, pr.draws), axis=0)
        reg[target], var[target] = med, v
    return reg, var


def _baseline_regressors(app: ApplicationFit, points, dates):
    """Raw values of the grid cell nearest each station (no spatial model)."""
    cells = nearest_cells(app.grid, points)
    ev = make_events(app.grid.values[cells][:, dates], app.config.wet_threshold)
    return {"occurrence": ev.occurrence, "intensity": ev.intensity}, {t: np.zeros(ev.occurrence.shape)
                                                                      for t in TARGETS}


def _fit_all(truth, reg, dates, per_date):
    fits = {}
    for target in TARGETS:
        if per_date:
            fits[target] = [fit_downscale(truth[target][:, j], reg[target][:, j], target, date=int(d))
                            for j, d in enumerate(dates)]
        else:
            fits[target] = [fit_downscale(truth[target], reg[target], target, pooled=True)]
    return fits


def _apply(fits, reg, per_date):
    pred = {}
    for target, fl in fits.items():
        if per_date:
            pred[target] = np.stack([f.predict(reg[target][:, j]) for j, f in enumerate(fl)], axis=1)
        else:
            pred[target] = fl[0].predict(reg[target])
    return pred


def downscale(app: ApplicationFit, stations: StationSeries, mode: str = "spde", dates=None,
              per_date: bool | None = None) -> DownscaleResult:
    """Downscaling regressions at the stations.

    ``mode="spde"`` uses the interpolated model; ``mode="baseline"`` uses the
    raw value of the nearest grid cell.
    """
    cfg = app.config
    if not np.array_equal(stations.dates, app.grid.dates):
        raise InputError("station and grid dates must coincide")
    per_date = cfg.per_date if per_date is None else per_date
    dates = app.models["occurrence"].dates if dates is None else np.asarray(dates, dtype=int)
    truth = {
        "occurrence": station_occurrence_hat(stations, cfg, cfg.period)[:, dates],
        "intensity": make_events(stations, cfg.wet_threshold).intensity[:, dates],
    }
    pts = stations.points
    if mode == "spde":
        reg, var = _spde_regressors(app, pts, dates)
    elif mode == "baseline":
        reg, var = _baseline_regressors(app, pts, dates)
    else:
        raise InputError("mode must be 'spde' or 'baseline'")
    fits = _fit_all(truth, reg, dates, per_date)
    return DownscaleResult(mode, dates, truth, reg, var, fits, _apply(fits, reg, per_date), cfg)


def _rmse(a, b) -> float:
    ok = np.isfinite(a) & np.isfinite(b)
    return float(np.sqrt(np.mean((a[ok] - b[ok]) ** 2))) if ok.any() else float("nan")


def loocv_coverage(res: DownscaleResult, target: str, n_draws: int = 2000, seed: int = 0) -> tuple:
    """Leave-one-station-out coverage of the 95% interval of ``target``.

    For each held-out station the regression is refitted without it. The
    interval combines the regressor's posterior spread, the coefficient
    uncertainty, and the part of the residual variance not already
    explained by that spread.
    """
    cfg = res.config
    rng = np.random.default_rng(seed)
    y_all = _transform(target, res.station_truth[target])
    x_all = _transform(target, res.regressor[target])
    v_all = res.regressor_var[target]
    n_st, n_d = y_all.shape
    a = (1.0 - cfg.level) / 2.0
    hit, total = 0, 0
    cols = range(n_d) if cfg.per_date else [slice(None)]
    for i in range(n_st):
        keep = np.arange(n_st) != i
        for c in cols:
            yi = np.atleast_1d(y_all[i, c])
            xi = np.atleast_1d(x_all[i, c])
            vi = np.atleast_1d(v_all[i, c])
            ok_i = np.isfinite(yi) & np.isfinite(xi)
            if not ok_i.any():
                continue
            yk, xk, vk = y_all[keep][:, c], x_all[keep][:, c], v_all[keep][:, c]
            try:
                f = fit_downscale(_inverse(target, yk), _inverse(target, xk), target)
            except InsufficientDataError:
                continue
            okk = np.isfinite(yk) & np.isfinite(xk)
            s2_extra = max(f.sigma2 - f.beta1**2 * float(np.mean(vk[okk])), 0.0)
            beta = rng.multivariate_normal([f.beta0, f.beta1], f.cov, size=n_draws)
            for yv, xv, vv in zip(yi[ok_i], xi[ok_i], vi[ok_i]):
                xd = xv + np.sqrt(max(vv, 0.0)) * rng.standard_normal(n_draws)
                zd = beta[:, 0] + beta[:, 1] * xd + np.sqrt(s2_extra) * rng.standard_normal(n_draws)
                lo, hi = np.quantile(zd, [a, 1.0 - a])
                hit += int(lo <= yv <= hi)
                total += 1
    return (hit / total if total else float("nan")), total


def evaluate(res: DownscaleResult, loocv: bool = True, seed: int = 0) -> dict:
    """Report RMSE per target, R^2 of the regressions and LOOCV coverage."""
    report = {
        "mode": res.mode,
        "wet_threshold_mm": res.config.wet_threshold,
        "rmse_intensity": _rmse(res.predictions["intensity"], res.station_truth["intensity"]),
        "rmse_probability": _rmse(res.predictions["occurrence"], res.station_truth["occurrence"]),
        "r2_probability": float(np.median([f.r2 for f in res.fits["occurrence"]])),
        "r2_intensity": float(np.median([f.r2 for f in res.fits["intensity"]])),
        "n_dates": int(len(res.dates)),
    }
    if loocv:
        for target, key in (("intensity", "coverage_intensity"), ("occurrence", "coverage_probability")):
            cov, n = loocv_coverage(res, target, seed=seed)
            report[key] = cov
            report[key + "_n"] = n
    report["fits"] = {t: [f.to_dict() for f in fl] for t, fl in res.fits.items()}
    return report


def prediction_rows(app: ApplicationFit, points, lonlat, date_index: int, res: DownscaleResult | None = None):
    """Rows ``lon, lat, date, prob, intensity, sd, lower, upper`` at arbitrary points."""
    p_occ = app.predict("occurrence", points, date_index)
    p_int = app.predict("intensity", points, date_index)
    prob, inten = p_occ.median, p_int.median
    lo, hi = p_int.lower, p_int.upper
    if res is not None:
        j = int(np.flatnonzero(res.dates == date_index)[0]) if res.config.per_date else 0
        fo, fi = res.fits["occurrence"][j], res.fits["intensity"][j]
        prob, inten = fo.predict(prob), fi.predict(inten)
        lo, hi = fi.predict(lo), fi.predict(hi)
    date = str(app.grid.dates[date_index])
    return [(float(lonlat[0][k]), float(lonlat[1][k]), date, float(prob[k]), float(inten[k]), float(p_int.sd[k]),
             float(lo[k]), float(hi[k])) for k in range(len(prob))]


# -- synthetic truth -------------------------------------------------------------------
SYNTH_BOX = (-110.0, -90.0, 30.0, 45.0)
SYNTH_MESH = "geodesic:4+refine:4@-110,-90,30,45"


@dataclass(frozen=True)
class SyntheticTruth:
    beta_occurrence: tuple = (0.3, 0.9)
    beta_intensity: tuple = (0.2, 0.8)
    sigma_occurrence: float = 0.2
    sigma_intensity: float = 0.15
    gamma_shape: float = 0.826
    rho: float = 0.15
    nugget: float = 1e-4


def synthetic_dataset(mesh: SphereMesh, seed: int = 0, n_stations: int = 100, n_days: int = 365,
                      spacing: tuple = (1.25, 1.0), box=SYNTH_BOX, truth: SyntheticTruth | None = None,
                      start: str = "2021-01-01"):
    """Grid and station data generated from the occurrence/intensity model.

    Grid cells follow the application model (temporal harmonics, a daily
    SPDE anomaly field, a Bernoulli occurrence and a Gamma intensity).
    Stations follow the downscaling regressions exactly on the transformed
    scale: the station's seasonal wet-day probability is linear in the grid
    model's seasonal logit plus a per-station error, and each wet-day
    amount is linear (in logs) in the grid model's mean plus daily noise.

    Returns ``(grid, stations, info)`` where ``info`` records the truth.
    """
    truth = truth or SyntheticTruth()
    rng = np.random.default_rng(seed)
    lons = np.arange(box[0] + spacing[0] / 2, box[1], spacing[0])
    lats = np.arange(box[2] + spacing[1] / 2, box[3], spacing[1])
    glon, glat = (a.ravel() for a in np.meshgrid(lons, lats))
    slon = rng.uniform(box[0] + 0.5, box[1] - 0.5, n_stations)
    slat = rng.uniform(box[2] + 0.5, box[3] - 0.5, n_stations)
    dates = np.arange(np.datetime64(start, "D"), np.datetime64(start, "D") + np.timedelta64(n_days, "D"))
    t = day_of_year(dates)
    period = period_for(dates)

    def smooth(lon, lat, phase):
        u = (lon - box[0]) / (box[1] - box[0])
        w = (lat - box[2]) / (box[3] - box[2])
        return np.sin(np.pi * u + phase) * np.cos(0.5 * np.pi * w)

    def occ_eta0(lon, lat):
        return -0.3 + 1.5 * smooth(lon, lat, 0.3)[:, None] + 0.5 * np.sin(2 * np.pi * t / period)[None, :]

    def int_mu(lon, lat):
        return 0.25 * np.exp(1.0 * smooth(lon, lat, 1.1))[:, None] * (1 + 0.2 * np.cos(2 * np.pi * t / period))[None, :]

    coeffs = CoeffLayout(0, False).expand(np.array([np.log(truth.rho) * 2 * np.sqrt(np.pi), np.log(truth.nugget)]))
    fac = factorize(precision(mesh, coeffs))
    x_occ = sample(fac, n_days, rng)  # (days, n_T)
    x_int = sample(fac, n_days, rng)
    gtri = mesh.locate(lonlat_to_xyz(glon, glat))
    stri = mesh.locate(lonlat_to_xyz(slon, slat))

    def grid_quantities(lon, lat, tri, nugget):
        eta_o = occ_eta0(lon, lat) + x_occ[:, tri].T
        eta_i = -1.0 / int_mu(lon, lat) + x_int[:, tri].T
        if nugget:
            eta_o = eta_o + np.sqrt(truth.nugget) * rng.standard_normal(eta_o.shape)
        eta_i = np.minimum(eta_i, -1.0 / 200.0)
        return expit(eta_o), -1.0 / eta_i

    p_g, mu_g = grid_quantities(glon, glat, gtri, True)
    wet = rng.random(p_g.shape) < p_g
    amount = rng.gamma(truth.gamma_shape, mu_g / truth.gamma_shape)
    gvals = np.where(wet, amount, 0.0)
    grid = GridSeries(glon, glat, dates, gvals, regular=True, note=f"synthetic seed {seed}")

    _, mu_s = grid_quantities(slon, slat, stri, False)
    bo, bi = truth.beta_occurrence, truth.beta_intensity
    # the station target is a seasonal probability, so its noise is per station
    xi = truth.sigma_occurrence * rng.standard_normal((n_stations, 1))
    p_st = expit(bo[0] + bo[1] * occ_eta0(slon, slat) + xi)
    s_wet = rng.random(p_st.shape) < p_st
    ln_y = bi[0] + bi[1] * np.log(mu_s) + truth.sigma_intensity * rng.standard_normal(mu_s.shape)
    svals = np.where(s_wet, np.exp(ln_y), 0.0)
    ids = tuple(f"ST{k:03d}" for k in range(n_stations))
    stations = StationSeries(ids, slon, slat, dates, svals)
    info = {"truth": asdict(truth), "station_probability": p_st, "station_mu_model": mu_s, "seed": seed}
    return grid, stations, info


FIXTURE_SEED = 0


def bundled_fixture_paths() -> dict:
    root = Path(__file__).parent / "data"
    return {"grid": root / "synthetic_grid.csv.gz", "stations": root / "synthetic_stations.csv.gz",
            "truth": root / "synthetic_truth.json"}


def synthetic_mesh() -> SphereMesh:
    return tag_regions(build_mesh(SYNTH_MESH), RegionMap.world())


def write_fixtures(directory, seed: int = FIXTURE_SEED) -> dict:
    """Write the synthetic grid/station CSVs and the truth record to ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    grid, stations, info = synthetic_dataset(synthetic_mesh(), seed=seed)
    paths = {"grid": directory / "synthetic_grid.csv.gz", "stations": directory / "synthetic_stations.csv.gz",
             "truth": directory / "synthetic_truth.json"}
    write_grid_csv(grid, paths["grid"])
    write_station_csv(stations, paths["stations"])
    paths["truth"].write_text(json.dumps({"seed": seed, "mesh": SYNTH_MESH, **info["truth"]}, indent=2) + "\n")
    return paths


def report_json(report: dict) -> str:
    def clean(o):
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, (np.floating, float)):
            return None if not np.isfinite(o) else float(o)
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.bool_):
            return bool(o)
        return o

    return json.dumps(clean(report), indent=2, sort_keys=True) + "\n"
