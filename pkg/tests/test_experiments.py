from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from hskinetic.chaos import PhaseCell
from hskinetic.core import EstimatorResult, InitialDensity, ParameterError, SimParams, Torus, load_config, make_rng
from hskinetic.experiments import (
    ExperimentSpec,
    Report,
    agree,
    check_separation,
    direct_centered_moment,
    ensemble_counts,
    loglog_slope,
    run_chaos_scan,
    run_recollision_scan,
    separated_cells,
    spec_from_mapping,
    split_step_function,
    strictly_decreasing,
    table_moment,
    welch_gap,
    _gspec,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _er(m, s):
    return EstimatorResult(m, s, 100)


def test_trend_statistics():
    assert welch_gap(_er(-1.0, 0.3), _er(0.5, 0.4)) == pytest.approx(1.0)
    ok, gaps = strictly_decreasing([_er(1.0, 0.1), _er(0.5, 0.1), _er(0.1, 0.1)])
    assert ok and len(gaps) == 3
    ok, _ = strictly_decreasing([_er(1.0, 0.1), _er(0.9, 0.1)])
    assert not ok
    assert agree(_er(1.0, 0.1), _er(1.2, 0.1))[0]
    assert not agree(_er(1.0, 0.01), _er(1.2, 0.01))[0]


def test_loglog_slope_recovers_power_law():
    eps = [0.1, 0.05, 0.025]
    fit = loglog_slope(eps, [_er(3 * e**1.5, 1e-4 * e**1.5) for e in eps], make_rng(1), resamples=300)
    assert fit.slope == pytest.approx(1.5, abs=1e-6)
    assert fit.ci_low <= 1.5 <= fit.ci_high
    assert math.isnan(loglog_slope(eps, [_er(0.0, 1.0)] * 3, make_rng(1)).slope)


def test_separated_cells_layout():
    dom = Torus((1.9, 1.0, 1.0))
    cells = separated_cells(dom, 2, 0.631)
    assert cells[0].x_hi[0] - cells[0].x_lo[0] == pytest.approx(0.95 - 0.631)
    check_separation(cells, 0.631, dom)
    assert cells[0].spatial_gap(cells[1], dom) == pytest.approx(0.631)
    with pytest.raises(ParameterError):
        separated_cells(dom, 2, 1.0)
    with pytest.raises(ParameterError):
        separated_cells(dom, 2, 0.5, offset=0.8)
    with pytest.raises(ParameterError):
        check_separation(cells, 0.7, dom)


def test_spec_validation_and_parsing():
    dom = Torus(1.0)
    p = SimParams(epsilon=0.1, domain=dom)
    f0 = InitialDensity("uniform", {}, 1.0, dom)
    with pytest.raises(ParameterError):
        ExperimentSpec("x", p, f0, (0.05, 0.1), 0.1)
    with pytest.raises(ParameterError):
        ExperimentSpec("x", p, f0, (0.1, 0.05), 0.1, theta=0.3)
    s = ExperimentSpec("x", p, f0, (0.1, 0.05), 0.1, ensemble_sizes=(10,))
    assert s.ensemble_sizes == (10, 10) and s.delta_max == pytest.approx(0.1**0.2)
    for name in ("chaos", "recollide", "fluct", "compare"):
        cfg = load_config(str(CONFIGS / f"{name}.toml"))
        spec = spec_from_mapping(cfg[name], name, cfg["seed"])
        assert spec.seed == cfg["seed"] and spec.epsilon_grid == (0.1, 0.05, 0.025)
        json.dumps(spec.to_mapping(), default=float)


def test_report_serialization():
    rep = Report("demo")
    rep.add_row(0.1, a=_er(1.0, 0.1), b=2.0)
    assert rep.estimate("a")[0].mean == 1.0
    assert rep.to_csv().splitlines()[0] == "epsilon,a,a_stderr,a_n,b"
    assert json.loads(rep.to_json())["passed"]


def test_recollision_scan_small():
    dom = Torus(1.0)
    p = SimParams(epsilon=0.1, domain=dom)
    spec = ExperimentSpec("rec", p, InitialDensity("uniform", {}, 1.0, dom), (0.1, 0.05, 0.025), 1.0,
                          (20_000,), seed=3, options={"n_max": 3})
    rep = run_recollision_scan(spec)
    internal = rep.estimate("internal")
    assert internal[0].mean > internal[-1].mean > 0
    assert {v.rule for v in rep.verdicts} == {"recollide.internal_decreasing", "recollide.external_decreasing",
                                              "recollide.internal_slope"}


def test_fluctuation_estimators_on_correlated_counts():
    # counts sharing a common Poisson component: the covariance is known exactly
    rng = make_rng(4)
    M = 40_000
    common = rng.poisson(3.0, M)
    counts = np.stack([common + rng.poisson(2.0, M), rng.poisson(1.0, M),
                       common + rng.poisson(1.0, M), rng.poisson(4.0, M)], axis=1).astype(float)
    a = split_step_function(PhaseCell((0, 0, 0), (0.2, 1, 1)), (1.0, 0.5))
    b = split_step_function(PhaseCell((0.5, 0, 0), (0.7, 1, 1)), (1.0, 0.5))
    eps = 0.1
    exact = eps**4 * 1.0 * 1.0 * 3.0  # cov(N_a0, N_b0) = var(common)
    d = direct_centered_moment(counts, [a, b], eps)
    tm = table_moment(counts, [a, b], eps)
    assert abs(d.z_score(exact)) < 3 and abs(tm.z_score(exact)) < 3
    assert d.mean == pytest.approx(tm.mean, rel=1e-3)


def test_chaos_pipeline_and_cache(tmp_path):
    cfg = load_config(str(CONFIGS / "chaos.toml"))["chaos"]
    cfg = {**cfg, "epsilon_grid": [0.3, 0.2], "ensemble_sizes": [30, 30], "t": 0.2}
    spec = spec_from_mapping(cfg, "chaos", seed=1)
    rep = run_chaos_scan(spec, cache_dir=str(tmp_path))
    assert len(rep.rows) == 2 and len(rep.verdicts) == 1
    assert any("f2/(f1 f1)" in n for n in rep.notes)
    assert len(list(tmp_path.iterdir())) == 2
    cells = [PhaseCell((0.09, 0, 0), (0.29, 1, 1))]
    g = _gspec(spec, 0.3)
    a, _ = ensemble_counts(g, 0.2, cells, 10, 5, cache_dir=str(tmp_path))
    b, _ = ensemble_counts(g, 0.2, cells, 10, 5, cache_dir=str(tmp_path))
    c, _ = ensemble_counts(g, 0.2, cells, 10, 5, threads=2, chunk=3)
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_separated_cells_factorize_in_a_uniform_state():
    dom = Torus(2.0)
    spec = ExperimentSpec("uni", SimParams(epsilon=0.1, domain=dom), InitialDensity("uniform", {}, 1.0, dom),
                          (0.1,), 0.0, (3000,), seed=6)
    rep = run_chaos_scan(spec)
    ratio = rep.estimate("factorization_ratio")[0]
    assert abs(ratio.z_score(1.0)) < 3
