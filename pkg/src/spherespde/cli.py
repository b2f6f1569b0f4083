"""Command-line entry point: ``spherespde <subcommand> [options]``.

Every subcommand resolves its configuration as defaults, then the preset,
then explicit flags, then the ``--config`` JSON file. The resolved
configuration is written next to the outputs, and it can be fed back through
``--config`` to repeat a run.

Exit codes: 0 on success, 2 on usage errors, 1 on runtime failures. Failures
print one JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import downscale as ds
from . import simlab
from .deform import DeformationCoeffs
from .errors import InputError, SphereSPDEError
from .fvm import precision
from .geometry import lonlat_to_xyz, xyz_to_lonlat
from .gmrf import krige
from .lgm import LaplaceConfig, LaplaceModel, MarginalFamily, ObsData, laplace_fit, latent_marginals
from .mesh import RegionMap, build_mesh, load_mesh, save_mesh, tag_regions

log = logging.getLogger("spherespde")

JOBS_ENV = "SPHERESPDE_JOBS"
SUBCOMMANDS = ("mesh", "simulate", "fit", "krige", "simstudy", "downscale")


class UsageError(InputError):
    """Bad flags or configuration keys (exit code 2)."""


# -- configuration keys ------------------------------------------------------------
@dataclass(frozen=True)
class Key:
    """One configuration key with its flag, kind and default.

    ``kind`` is one of int, float, str, bool, ints, floats, strs, json,
    and the optional forms int?, float?, str?, ints? which accept null.
    """

    name: str
    default: object
    kind: str
    help: str = ""
    choices: tuple | None = None

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


_SCALAR = {"int": int, "float": float, "str": str}


def _coerce(key: Key, value):
    """Canonical JSON-compatible value of ``key`` (lists for sequences)."""
    kind = key.kind
    if kind.endswith("?"):
        if value is None or (isinstance(value, list) and not value and kind == "ints?"):
            return None
        kind = kind[:-1]
    try:
        if kind == "bool":
            if not isinstance(value, bool):
                raise TypeError
            out = value
        elif kind in _SCALAR:
            if isinstance(value, bool) or (kind == "str") != isinstance(value, str):
                raise TypeError
            if kind == "int" and isinstance(value, float) and not value.is_integer():
                raise TypeError
            out = _SCALAR[kind](value)
        elif kind in ("ints", "floats", "strs"):
            if not isinstance(value, (list, tuple)):
                raise TypeError
            out = [_coerce(Key(key.name, None, kind[:-1]), v) for v in value]
        elif kind == "json":
            out = json.loads(json.dumps(value))
        else:
            raise AssertionError(f"unknown key kind {kind}")
    except (TypeError, ValueError):
        raise UsageError(f"config key {key.name!r} expects {key.kind}, got {value!r}") from None
    if key.choices is not None:
        vals = out if isinstance(out, list) else [out]
        bad = [v for v in vals if v not in key.choices]
        if bad:
            raise UsageError(f"config key {key.name!r}: {bad} not in {list(key.choices)}")
    return out


def _fmt_default(v) -> str:
    return json.dumps(v).replace("%", "%%")


def _json_arg(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"invalid JSON: {exc}") from None


def _optional(fn):
    def conv(text):
        return None if text.lower() in ("none", "null") else fn(text)

    conv.__name__ = fn.__name__
    return conv


def _add_keys(parser, keys):
    for k in keys:
        text = f"{k.help} (default: {_fmt_default(k.default)})".strip()
        kw = dict(dest=k.name, default=argparse.SUPPRESS, help=text)
        base = k.kind.rstrip("?")
        if k.choices is not None and base in ("str", "strs"):
            kw["choices"] = k.choices
        if base == "bool":
            parser.add_argument(k.flag, action=argparse.BooleanOptionalAction, **kw)
        elif base in _SCALAR:
            conv = _SCALAR[base]
            parser.add_argument(k.flag, type=_optional(conv) if k.kind.endswith("?") else conv, **kw)
        elif base in ("ints", "floats", "strs"):
            conv = _SCALAR[base[:-1]]
            parser.add_argument(k.flag, type=conv, nargs="*" if k.kind.endswith("?") else "+", **kw)
        elif base == "json":
            parser.add_argument(k.flag, type=_json_arg, metavar="JSON", **kw)


_HELP = {
    "n": "number of observation locations",
    "mesh": "mesh spec, e.g. icosphere:S, geodesic:F or geodesic:F+refine:L@lon0,lon1,lat0,lat1",
    "buffer_km": "coastal buffer width in km",
    "order": "spherical-harmonic order of the deformation fields",
    "n_r": "replicate counts",
    "n_s": "number of simulations",
    "sigma2": "Gaussian observation variance",
    "theta_mean": "mean of the transformed true hyperparameters",
    "theta_sd": "sd of the transformed true hyperparameters",
    "test_caps": "centres [lon, lat] of the held-out spherical caps",
    "test_fraction": "fraction of locations held out in the caps",
    "seed": "random seed",
    "variants": "model variants to fit",
    "explore": "explore the hyperparameter grid around the mode",
    "roc_grid": "number of false-positive-rate grid points for ROC curves",
    "K": "number of temporal harmonics",
    "period": "harmonic period in days (null: from the calendar)",
    "land_sea": "separate land and sea fields",
    "wet_threshold": "wet-day threshold in mm",
    "fit_dates": "grid date indices used as spatial replicates (empty: all dates)",
    "per_date": "fit one downscaling regression per date",
    "neighbors": "nearest observed cells averaged for the fixed predictor at new points",
    "n_draws": "Monte-Carlo draws per prediction",
    "level": "interval level",
}


def _dataclass_keys(cls, skip=(), kinds=None, choices=None) -> list:
    kinds, choices = kinds or {}, choices or {}
    out = []
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        d = f.default
        if f.name in kinds:
            kind = kinds[f.name]
        elif isinstance(d, bool):
            kind = "bool"
        elif isinstance(d, int):
            kind = "int"
        elif isinstance(d, float):
            kind = "float"
        elif isinstance(d, str):
            kind = "str"
        else:
            raise AssertionError(f"no key kind for {cls.__name__}.{f.name}")
        default = list(d) if isinstance(d, tuple) else d
        if kind == "json":
            default = json.loads(json.dumps(d))
        out.append(Key(f.name, default, kind, _HELP.get(f.name, f.name.replace("_", " ")), choices.get(f.name)))
    return out


VARIANTS = tuple(v.value for v in simlab.ModelVariant)
SIM_KEYS = _dataclass_keys(simlab.SimConfig, kinds={"n_r": "ints", "test_caps": "json", "variants": "strs"},
                           choices={"variants": VARIANTS})
LAPLACE_KEYS = _dataclass_keys(LaplaceConfig)
APP_KEYS = _dataclass_keys(ds.ApplicationConfig, kinds={"period": "float?", "fit_dates": "ints?"})
REGION_KEYS = [
    Key("regions", "world", "str", "region tagging: bundled world coastlines, all sea, or untagged",
        ("world", "ocean", "none")),
    Key("buffer_km", 200.0, "float", _HELP["buffer_km"]),
]
MESH_SOURCE = [
    Key("mesh", "geodesic:5", "str", _HELP["mesh"]),
    Key("mesh_file", None, "str?", "load the mesh from a mesh file instead of building it"),
]

SUBCOMMAND_KEYS = {
    "mesh": [
        Key("spec", "icosphere:3", "str", _HELP["mesh"]),
        Key("subdivisions", None, "int?", "shortcut for spec icosphere:SUBDIVISIONS"),
        *REGION_KEYS,
        Key("out", None, "str?", "output mesh file (required)"),
    ],
    "simulate": [
        Key("preset", "table2-desk", "str", "simulation preset", tuple(simlab.PRESETS)),
        *[k for k in SIM_KEYS if k.name not in ("n_r", "n_s", "variants", "explore", "roc_grid")],
        Key("family", "gaussian", "str", "response family", ("gaussian", "bernoulli")),
        Key("n_rep", 10, "int", "number of replicates"),
        Key("sim", 0, "int", "simulation index (selects the seed stream)"),
        Key("out_dir", "simulate-out", "str", "output directory"),
    ],
    "fit": [
        Key("obs", None, "str?", "observation CSV with columns rep,lon,lat,value (required)"),
        *MESH_SOURCE,
        *REGION_KEYS,
        Key("family", "gaussian", "str", "response family", ("gaussian", "bernoulli", "gamma")),
        Key("sigma2", 0.05, "float", "Gaussian observation variance"),
        Key("shape", 1.0, "float", "Gamma shape"),
        Key("variant", "NS-LS", "str", "model variant", VARIANTS),
        Key("order", 1, "int", _HELP["order"]),
        *LAPLACE_KEYS,
        Key("out_dir", "fit-out", "str", "output directory"),
    ],
    "krige": [
        Key("obs", None, "str?", "observation CSV with columns lon,lat,value (required)"),
        Key("targets", None, "str?", "target CSV with columns lon,lat (default: every triangle centroid)"),
        *MESH_SOURCE,
        *REGION_KEYS,
        Key("coeffs", None, "str?", "deformation coefficient file (default: stationary with range RHO)"),
        Key("rho", 0.3, "float", "stationary range in radians"),
        Key("noise_var", 0.01, "float", "observation noise variance"),
        Key("n_samples", 0, "int", "conditional samples to draw"),
        Key("seed", 0, "int", _HELP["seed"]),
        Key("out_dir", "krige-out", "str", "output directory"),
    ],
    "simstudy": [
        Key("preset", "table2-desk", "str", "simulation preset", tuple(simlab.PRESETS)),
        Key("study", "preset", "str", "which study to run (preset: the one the preset encodes)",
            ("preset", "consistency", "interpolation", "both")),
        Key("families", ["gaussian", "bernoulli"], "strs", "interpolation families", ("gaussian", "bernoulli")),
        Key("sims", None, "ints?", "simulation indices to run (empty: all)"),
        *SIM_KEYS,
        Key("out_dir", "simstudy-out", "str", "output directory"),
    ],
    "downscale": [
        Key("preset", "desk", "str", "downscaling preset", ("desk", "application")),
        Key("grid", None, "str?", "grid CSV lon,lat,date,value (default: bundled synthetic fixture)"),
        Key("stations", None, "str?", "station CSV station_id,lon,lat,date,value (default: bundled fixture)"),
        Key("mesh", ds.SYNTH_MESH, "str", _HELP["mesh"]),
        Key("buffer_km", 200.0, "float", _HELP["buffer_km"]),
        *APP_KEYS,
        Key("modes", ["spde", "baseline"], "strs", "regressor sources to evaluate", ("spde", "baseline")),
        Key("loocv", True, "bool", "compute leave-one-station-out interval coverage"),
        Key("out_dir", "downscale-out", "str", "output directory"),
    ],
}

STUDY_OF_PRESET = {"table1-desk": "consistency", "table1-full": "consistency", "table2-desk": "interpolation",
                   "table2-full": "interpolation", "smoke": "both"}

DOWNSCALE_PRESETS = {
    # the bundled synthetic fixtures: wet threshold 0 and three spatial replicates
    "desk": {"order": 0, "land_sea": False, "wet_threshold": 0.0, "fit_dates": [40, 160, 280]},
    "application": {"mesh": "geodesic:6+refine:3@conus"},
}


def _preset_values(sub: str, name: str) -> dict:
    if sub in ("simulate", "simstudy"):
        vals = simlab.preset(name).to_dict()
        names = {k.name for k in SUBCOMMAND_KEYS[sub]}
        return {k: v for k, v in vals.items() if k in names}
    if sub == "downscale":
        return dict(DOWNSCALE_PRESETS[name])
    return {}


def _default_jobs() -> int:
    raw = os.environ.get(JOBS_ENV)
    if raw is None:
        return 1
    try:
        jobs = int(raw)
    except ValueError:
        raise UsageError(f"{JOBS_ENV} must be a positive integer, got {raw!r}") from None
    if jobs < 1:
        raise UsageError(f"{JOBS_ENV} must be a positive integer, got {raw!r}")
    return jobs


def resolve_config(sub: str, args) -> dict:
    """Merge defaults, preset, flags and the JSON config into one dict."""
    keys = SUBCOMMAND_KEYS[sub]
    names = {k.name: k for k in keys}
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        if file_cfg.pop("subcommand", sub) != sub:
            raise UsageError(f"config file is for another subcommand, not {sub!r}")
        file_cfg.pop("version", None)
        extra = sorted(set(file_cfg) - set(names))
        if extra:
            raise UsageError(f"unknown config keys for {sub}: {extra}")
    cfg = {k.name: k.default for k in keys}
    if "preset" in names:
        name = file_cfg.get("preset", getattr(args, "preset", names["preset"].default))
        cfg["preset"] = _coerce(names["preset"], name)
        cfg.update(_preset_values(sub, cfg["preset"]))
    for k in keys:
        if hasattr(args, k.name):
            cfg[k.name] = getattr(args, k.name)
    cfg.update(file_cfg)
    return {k.name: _coerce(k, cfg[k.name]) for k in keys}


def _require(cfg, *names):
    missing = [n for n in names if cfg.get(n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _write_config(path: Path, sub: str, cfg: dict) -> None:
    rec = {"subcommand": sub, "version": __version__, **cfg}
    path.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


# -- shared helpers ------------------------------------------------------------------------
def _tagged_mesh(cfg, need_tags: bool = True):
    if cfg.get("mesh_file"):
        mesh = load_mesh(cfg["mesh_file"])
    else:
        mesh = build_mesh(cfg["mesh"] if "mesh" in cfg else cfg["spec"])
    if mesh.tagged:
        return mesh
    if cfg["regions"] == "world":
        return tag_regions(mesh, RegionMap.world(cfg["buffer_km"]))
    if cfg["regions"] == "ocean" or need_tags:
        return mesh.with_uniform_region("sea")
    return mesh


def _read_table(path, required) -> dict:
    with ds._open_text(path) as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(required) <= set(reader.fieldnames):
            raise InputError(f"{path}: expected columns {list(required)}")
        rows = list(reader)
    out = {}
    for c in required:
        vals = [r[c] for r in rows]
        try:
            out[c] = np.array([float(v) if v not in ("", "nan", "NaN") else np.nan for v in vals])
        except ValueError as exc:
            raise InputError(f"{path}: non-numeric value in column {c!r}") from exc
    return out


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    path.write_text(buf.getvalue())


def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(summary: dict) -> None:
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")


# -- subcommands -------------------------------------------------------------------------------
def cmd_mesh(cfg, jobs):
    _require(cfg, "out")
    spec = cfg["spec"] if cfg["subdivisions"] is None else f"icosphere:{cfg['subdivisions']}"
    mesh = build_mesh(spec)
    if cfg["regions"] == "world":
        mesh = tag_regions(mesh, RegionMap.world(cfg["buffer_km"]))
    elif cfg["regions"] == "ocean":
        mesh = mesh.with_uniform_region("sea")
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(mesh, out)
    _write_config(out.with_suffix(".config.json"), "mesh", cfg)
    _emit({"triangles": mesh.n_triangles, "vertices": mesh.n_vertices, "edges": mesh.n_edges,
           "regions": mesh.region_counts() if mesh.tagged else None, "out": str(out)})


def _sim_config(cfg) -> simlab.SimConfig:
    fields = {f.name for f in dataclasses.fields(simlab.SimConfig)}
    base = simlab.preset(cfg["preset"]).to_dict()
    base.update({k: v for k, v in cfg.items() if k in fields})
    return simlab.SimConfig.from_dict(base)


def cmd_simulate(cfg, jobs):
    sc = _sim_config(cfg)
    if not 0 <= cfg["sim"]:
        raise UsageError("--sim must be non-negative")
    data = simlab.simulate(sc, cfg["sim"], cfg["family"], cfg["n_rep"])
    out = _out_dir(cfg)
    lon, lat = xyz_to_lonlat(data.points)
    rows = [(r, lon[i], lat[i], data.y[r, i], int(data.test[i]))
            for r in range(data.y.shape[0]) for i in range(len(lon))]
    _write_csv(out / "observations.csv", ["rep", "lon", "lat", "value", "test"], rows)
    _write_csv(out / "latent.csv", ["rep", "tri", "value"],
               [(r, t, data.x[r, t]) for r in range(data.x.shape[0]) for t in range(data.x.shape[1])])
    layout = simlab.ModelVariant.NS_LS.layout(sc.order)
    truth = {"parameters": layout.names(), "theta": data.theta.tolist(), "family": cfg["family"],
             "sigma2": sc.sigma2 if cfg["family"] == "gaussian" else None}
    (out / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    _write_config(out / "config.json", "simulate", cfg)
    _emit({"locations": int(len(lon)), "replicates": int(data.y.shape[0]), "out_dir": str(out)})


def _observations(path, mesh):
    """Long-format ``rep,lon,lat,value`` rows to a wide ObsData on ``mesh``."""
    t = _read_table(path, ("rep", "lon", "lat", "value"))
    if not len(t["rep"]):
        raise InputError(f"{path}: no observations")
    if np.any(~np.isfinite(t["rep"])) or np.any(t["rep"] < 0) or np.any(t["rep"] % 1):
        raise InputError(f"{path}: rep must be a non-negative integer")
    rep = t["rep"].astype(int)
    keys = np.stack([t["lon"], t["lat"]], axis=1)
    if not np.all(np.isfinite(keys)):
        raise InputError(f"{path}: lon/lat must be finite")
    uniq, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")  # locations in order of first appearance
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    loc = rank[inv.ravel()]
    y = np.full((rep.max() + 1, len(uniq)), np.nan)
    y[rep, loc] = t["value"]
    ll = uniq[order]
    return ObsData.from_points(mesh, lonlat_to_xyz(ll[:, 0], ll[:, 1]), y), ll


def cmd_fit(cfg, jobs):
    _require(cfg, "obs")
    mesh = _tagged_mesh(cfg)
    obs, _ = _observations(cfg["obs"], mesh)
    family = {"gaussian": MarginalFamily.gaussian(cfg["sigma2"]), "bernoulli": MarginalFamily.bernoulli(),
              "gamma": MarginalFamily.gamma(cfg["shape"])}[cfg["family"]]
    lcfg = LaplaceConfig(**{k.name: cfg[k.name] for k in LAPLACE_KEYS})
    layout = simlab.ModelVariant(cfg["variant"]).layout(cfg["order"])
    hp = laplace_fit(LaplaceModel(mesh, obs, family, layout, lcfg), keep_latent=False)
    post = latent_marginals(hp, np.arange(mesh.n_triangles), quantiles=())
    out = _out_dir(cfg)
    rec = {"family": family.kind, "family_param": family.param, "variant": cfg["variant"], **hp.to_dict()}
    (out / "posterior.json").write_text(ds.report_json(rec))
    rows = [(r, t, post.mean[r, t], post.sd[r, t]) for r in range(post.mean.shape[0])
            for t in range(mesh.n_triangles)]
    _write_csv(out / "latent.csv", ["rep", "tri", "mean", "sd"], rows)
    _write_config(out / "config.json", "fit", cfg)
    _emit({"parameters": layout.size, "grid_points": int(len(hp.points)), "out_dir": str(out)})


def cmd_krige(cfg, jobs):
    _require(cfg, "obs")
    mesh = _tagged_mesh(cfg)
    coeffs = DeformationCoeffs.load(cfg["coeffs"]) if cfg["coeffs"] else DeformationCoeffs.stationary(cfg["rho"])
    t = _read_table(cfg["obs"], ("lon", "lat", "value"))
    obs_tri = mesh.locate(lonlat_to_xyz(t["lon"], t["lat"]))
    if cfg["targets"]:
        tt = _read_table(cfg["targets"], ("lon", "lat"))
        tlon, tlat = tt["lon"], tt["lat"]
        targets = mesh.locate(lonlat_to_xyz(tlon, tlat))
    else:
        targets = np.arange(mesh.n_triangles)
        tlon, tlat = xyz_to_lonlat(mesh.centroids)
    if cfg["n_samples"] < 0:
        raise UsageError("--n-samples must be non-negative")
    res = krige(precision(mesh, coeffs), obs_tri, t["value"], cfg["noise_var"], targets,
                n_samples=cfg["n_samples"], seed=cfg["seed"])
    out = _out_dir(cfg)
    _write_csv(out / "kriging.csv", ["lon", "lat", "tri", "mean", "var"],
               zip(tlon, tlat, targets, res.mean, res.var))
    if res.samples is not None:
        _write_csv(out / "samples.csv", ["sample", "target", "value"],
                   [(s, j, res.samples[s, j]) for s in range(res.samples.shape[0]) for j in range(len(targets))])
    _write_config(out / "config.json", "krige", cfg)
    _emit({"observations": int(len(obs_tri)), "targets": int(len(targets)), "out_dir": str(out)})


def _summary_rows(result: simlab.SimResult) -> list:
    groups = {}
    for study, _sim, var, nr, met, val in result.rows:
        groups.setdefault((study, var, nr, met), []).append(val)
    out = []
    for (study, var, nr, met), vals in sorted(groups.items()):
        q25, med, q75 = np.quantile(vals, [0.25, 0.5, 0.75])
        out.append({"study": study, "variant": var, "n_r": nr, "metric": met, "median": float(med),
                    "q25": float(q25), "q75": float(q75), "n": len(vals)})
    return out


def cmd_simstudy(cfg, jobs):
    sc = _sim_config(cfg)
    study = STUDY_OF_PRESET[cfg["preset"]] if cfg["study"] == "preset" else cfg["study"]
    result = simlab.SimResult()
    if study in ("consistency", "both"):
        log.info("consistency study: %d simulations", len(cfg["sims"] or range(sc.n_s)))
        result.extend(simlab.run_consistency(sc, jobs=jobs, sims=cfg["sims"]))
    if study in ("interpolation", "both"):
        for fam in cfg["families"]:
            log.info("interpolation study (%s)", fam)
            result.extend(simlab.run_interpolation(sc, fam, jobs=jobs, sims=cfg["sims"]))
    out = _out_dir(cfg)
    (out / "results.csv").write_text(result.to_csv())
    (out / "failures.csv").write_text(result.failures_csv())
    grid = np.linspace(0.0, 1.0, sc.roc_grid)
    for (st, var, case), cur in sorted(result.curves.items()):
        if len(cur) >= 3:
            (out / f"roc_{st}_{var}_{case}.csv").write_text(simlab.envelopes_csv(result.curve_matrix((st, var, case)),
                                                                                 grid))
    paired = []
    for st, metric, lower in (("interp-gaussian", "mse_cv", True), ("interp-bernoulli", "auc_cv", False)):
        if not any(r[0] == st for r in result.rows):
            continue
        for v in sc.variants:
            if v != "NS-LS" and "NS-LS" in sc.variants:
                rate, n = simlab.paired_win_rate(result, metric, "NS-LS", v, lower)
                paired.append({"metric": metric, "better": "NS-LS", "worse": v, "win_rate": rate, "n": n})
    if any(r[0] == "interp-bernoulli" for r in result.rows) and "S" in sc.variants:
        diffs = simlab.roc_difference(result, "bernoulli", "cv", "S")
        if diffs:
            names = sorted(diffs)
            _write_csv(out / "roc_difference.csv", ["fpr", *[f"{v}-S" for v in names]],
                       [(g, *[diffs[v][i] for v in names]) for i, g in enumerate(grid)])
    summary = {"study": study, "medians": _summary_rows(result), "paired": paired,
               "n_failures": len(result.failures)}
    (out / "summary.json").write_text(ds.report_json(summary))
    _write_config(out / "config.json", "simstudy", cfg)
    _emit({"rows": len(result.rows), "failures": len(result.failures), "out_dir": str(out)})


def cmd_downscale(cfg, jobs):
    fixtures = ds.bundled_fixture_paths()
    grid = ds.read_grid_csv(cfg["grid"] or fixtures["grid"])
    stations = ds.read_station_csv(cfg["stations"] or fixtures["stations"])
    mesh = tag_regions(build_mesh(cfg["mesh"]), RegionMap.world(cfg["buffer_km"]))
    app_fields = {k.name for k in APP_KEYS}
    acfg = {k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg.items() if k in app_fields}
    app = ds.fit_application(grid, mesh, acfg["K"], ds.ApplicationConfig(**acfg))
    reports = {}
    results = {}
    for mode in cfg["modes"]:
        results[mode] = ds.downscale(app, stations, mode=mode)
        reports[mode] = ds.evaluate(results[mode], loocv=cfg["loocv"], seed=cfg["seed"])
    first = cfg["modes"][0]
    report = dict(reports[first])
    report["comparison"] = {m: {k: v for k, v in r.items() if k != "fits"} for m, r in reports.items()}
    report["hyperparameters"] = {t: m.hyper.to_dict() for t, m in app.models.items()}
    out = _out_dir(cfg)
    (out / "report.json").write_text(ds.report_json(report))
    rows = []
    for mode, res in results.items():
        for target in ds.TARGETS:
            for i, sid in enumerate(stations.ids):
                for j, d in enumerate(res.dates):
                    rows.append((mode, target, sid, str(grid.dates[d]), res.station_truth[target][i, j],
                                 res.regressor[target][i, j], res.predictions[target][i, j]))
    _write_csv(out / "predictions.csv", ["mode", "target", "station_id", "date", "observed", "regressor",
                                         "prediction"], rows)
    _write_config(out / "config.json", "downscale", cfg)
    _emit({k: report.get(k) for k in ("rmse_intensity", "rmse_probability", "coverage_intensity",
                                      "coverage_probability")} | {"out_dir": str(out)})


COMMANDS = {"mesh": cmd_mesh, "simulate": cmd_simulate, "fit": cmd_fit, "krige": cmd_krige,
            "simstudy": cmd_simstudy, "downscale": cmd_downscale}

DESCRIPTIONS = {
    "mesh": "build (and region-tag) a sphere mesh and write it in the text format",
    "simulate": "draw one simulated dataset from the nonstationary truth",
    "fit": "fit the latent Gaussian model to long-format observations",
    "krige": "condition a GMRF on point observations",
    "simstudy": "run the posterior-consistency and variant-comparison studies",
    "downscale": "fit the grid models and downscale to stations",
}


# -- parser --------------------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spherespde", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=DESCRIPTIONS[name], description=DESCRIPTIONS[name])
        p.add_argument("--config", help="JSON file whose keys override the flags")
        p.add_argument("--jobs", type=int, default=None,
                       help=f"worker processes (default: ${JOBS_ENV} or 1)")
        p.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
        _add_keys(p.add_argument_group("configuration keys"), SUBCOMMAND_KEYS[name])
    return parser


def _error_record(kind: str, message: str, code: int, sub=None) -> int:
    rec = {"error": kind, "message": message, "exit_code": code, "subcommand": sub}
    sys.stderr.write(json.dumps(rec, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    sub = None
    try:
        args = parser.parse_args(argv)
        sub = args.subcommand
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
        jobs = _default_jobs() if args.jobs is None else args.jobs
        if jobs < 1:
            raise UsageError("--jobs must be a positive integer")
        cfg = resolve_config(sub, args)
        COMMANDS[sub](cfg, jobs)
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    except UsageError as exc:
        return _error_record("usage", str(exc), 2, sub)
    except (SphereSPDEError, OSError, ValueError) as exc:
        log.debug("runtime failure", exc_info=True)
        return _error_record(type(exc).__name__, str(exc), 1, sub)
    return 0


if __name__ == "__main__":
    sys.exit(main())
