import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import mannwhitneyu

from spherespde import simlab
from spherespde.errors import InputError
from spherespde.geometry import lonlat_to_xyz, random_sphere_points
from spherespde.simlab import (ModelVariant, SimConfig, SimResult, auc, band_depth, cap_split, functional_box,
                               paired_win_rate, roc_curve, roc_on_grid)

TINY = SimConfig(n=60, mesh="geodesic:3", n_r=(2, 3), n_s=3, variants=("NS-LS", "S"), explore=False)


def brute_band_depth(c):
    n = len(c)
    out = np.zeros(n)
    for j, k in itertools.combinations(range(n), 2):
        lo, hi = np.minimum(c[j], c[k]), np.maximum(c[j], c[k])
        out += np.mean((c >= lo) & (c <= hi), axis=1)
    return out / (n * (n - 1) / 2)


@given(st.integers(0, 2**32 - 1), st.integers(2, 9), st.integers(1, 12))
def test_band_depth_matches_pairwise_enumeration(seed, n, p):
    rng = np.random.default_rng(seed)
    c = np.round(rng.normal(size=(n, p)), 1)  # rounding creates ties
    np.testing.assert_allclose(band_depth(c), brute_band_depth(c), atol=1e-12)


def test_functional_box_flags_outlier():
    grid = np.linspace(0, 1, 21)
    rng = np.random.default_rng(0)
    curves = np.array([grid**0.5 + rng.normal(0, 0.02, 21) for _ in range(15)])
    curves[3] += 0.8
    fb = functional_box(curves)
    assert fb.outliers.tolist() == [3]
    assert np.all(fb.central_lo <= fb.median) and np.all(fb.median <= fb.central_hi)
    assert np.all(fb.outer_lo <= fb.central_lo) and np.all(fb.central_hi <= fb.outer_hi)
    assert np.argmax(fb.depth) != 3
    with pytest.raises(InputError):
        functional_box(curves[:2])
    text = simlab.envelopes_csv(curves, grid)
    assert text.splitlines()[0] == "x,median,central_lo,central_hi,outer_lo,outer_hi"
    assert len(text.splitlines()) == 22


@given(st.integers(0, 2**32 - 1), st.integers(2, 60))
def test_auc_equals_mann_whitney(seed, n):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    scores = np.round(rng.normal(size=n) + labels, 1)
    u = mannwhitneyu(scores[labels == 1], scores[labels == 0]).statistic
    assert auc(scores, labels) == pytest.approx(u / (labels.sum() * (n - labels.sum())), abs=1e-12)


def test_roc_endpoints_and_grid():
    fpr, tpr = roc_curve([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0])
    np.testing.assert_allclose(fpr, [0, 0, 0.5, 0.5, 1])
    np.testing.assert_allclose(tpr, [0, 0.5, 0.5, 1, 1])
    # vertical steps take the largest true-positive rate reached at that false-positive rate
    np.testing.assert_allclose(roc_on_grid([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0], [0, 0.25, 1]), [0.5, 0.5, 1])
    with pytest.raises(InputError):
        roc_curve([0.1, 0.2], [1, 1])


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.5))
def test_cap_split_is_minimal(seed, frac):
    pts = random_sphere_points(np.random.default_rng(seed), 300)
    mask = cap_split(pts, simlab.DEFAULT_CAPS, frac)
    k = int(np.ceil(frac * 300))
    assert mask.sum() >= k
    centres = lonlat_to_xyz(*np.array(simlab.DEFAULT_CAPS).T)
    ang = np.arccos(np.clip(pts @ centres.T, -1, 1)).min(axis=1)
    assert ang[mask].max() <= ang[~mask].min()
    assert mask.sum() == np.sum(ang <= np.sort(ang)[k - 1])


def test_config_round_trip_and_validation():
    cfg = simlab.preset("table1-desk", seed=5)
    again = SimConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert cfg.split == pytest.approx((0.92, 0.08))
    with pytest.raises(InputError):
        SimConfig.from_dict({"bogus": 1})
    for bad in ({"n": 5}, {"n_r": ()}, {"test_fraction": 1.0}, {"sigma2": 0.0}):
        with pytest.raises(InputError):
            SimConfig(**bad)
    with pytest.raises(ValueError):
        SimConfig(variants=("XX",))
    with pytest.raises(InputError):
        simlab.preset("nope")


def test_variant_layouts():
    sizes = {v.value: v.layout(1).size for v in ModelVariant}
    assert sizes == {"NS-LS": 23, "NS": 11, "S-LS": 5, "S": 2}


def test_simulation_streams_are_independent():
    a = simlab.simulate(TINY, 1, "gaussian")
    b = simlab.simulate(TINY, 1, "bernoulli")
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(a.x, b.x)
    assert set(np.unique(b.y)) <= {0.0, 1.0}
    c = simlab.simulate(TINY, 2, "gaussian")
    assert not np.array_equal(a.points, c.points)
    assert a.test.sum() >= int(np.ceil(0.08 * 60))
    with pytest.raises(InputError):
        simlab.simulate(TINY, 0, "gamma")


def test_subset_reproduces_full_run_rows():
    full = simlab.run_consistency(TINY)
    part = simlab.run_consistency(TINY, sims=[2])
    assert part.rows and part.rows == [r for r in full.rows if r[1] == 2]
    metrics = {r[4] for r in full.rows}
    assert {"hyper_mse", "kld"} <= metrics
    assert np.isfinite(full.median("kld", "NS-LS", 3))
    with pytest.raises(InputError):
        simlab.run_consistency(TINY, sims=[3])


def test_interpolation_rows_and_curves():
    cfg = SimConfig(n=60, mesh="geodesic:3", n_r=(2,), n_s=2, variants=("S", "NS"), explore=False, roc_grid=11)
    res = simlab.run_interpolation(cfg, "bernoulli")
    assert not res.failures
    assert {r[4] for r in res.rows} == {"auc_all", "auc_cv"}
    assert res.curve_matrix(("interp-bernoulli", "S", "cv")).shape == (2, 11)
    diff = simlab.roc_difference(res, "bernoulli", "cv", "S")
    assert set(diff) == {"NS"} and diff["NS"].shape == (11,)
    rate, m = paired_win_rate(res, "auc_cv", "NS", "S", lower_is_better=False)
    assert m == 2 and 0.0 <= rate <= 1.0
    header, *lines = res.to_csv().splitlines()
    assert header == "study,sim,variant,n_r,metric,value" and len(lines) == 8


def test_paired_win_rate_on_common_sims():
    r = SimResult()
    for sim, (a, b) in enumerate([(1.0, 2.0), (3.0, 2.0), (0.5, 0.6)]):
        r.add("x", sim, "A", 1, "m", a)
        r.add("x", sim, "B", 1, "m", b)
    r.add("x", 9, "A", 1, "m", 0.0)
    assert paired_win_rate(r, "m", "A", "B") == (pytest.approx(2 / 3), 3)
    assert np.isnan(paired_win_rate(r, "other", "A", "B")[0])
    r.failures.append(("x", 9, "B", 1, "Boom: x"))
    assert r.failures_csv().splitlines()[1] == "x,9,B,1,Boom: x"
