from __future__ import annotations

import math

import numpy as np
import pytest

from hskinetic.chaos import (
    DensityTooHighError,
    GrandCanonicalSpec,
    PhaseCell,
    bootstrap_error_stderr,
    cell_counts,
    estimate_initial_error,
    estimate_rcf,
    load_ensemble,
    rejection_acceptance_rate,
    sample_arrays,
    sample_ensemble,
    save_ensemble,
    tables_from_counts,
    tuple_counts,
)
from hskinetic.core import EstimatorResult, InitialDensity, ParameterError, SimParams, Torus, make_rng, min_pair_distance


def _spec(eps: float, lam: float = 1.0, exclusion: bool = True, method: str = "prs", L: float = 1.0):
    dom = Torus(L)
    return GrandCanonicalSpec(SimParams(epsilon=eps, lambda_mfp=lam, domain=dom),
                              InitialDensity("uniform", {}, 1.0, dom), exclusion, method)


def test_poisson_factorial_moments_without_exclusion():
    spec = _spec(0.5, exclusion=False)  # mean particle number 4
    rng = make_rng(1)
    n = np.array([len(sample_arrays(spec, rng)[0]) for _ in range(20_000)], dtype=float)
    for k in (1, 2, 3):
        fm = EstimatorResult.from_samples(np.prod([n - r for r in range(k)], axis=0))
        assert abs(fm.z_score(4.0**k)) < 3


def test_two_body_acceptance_matches_excluded_volume():
    spec = _spec(0.2)
    est = rejection_acceptance_rate(spec, 2, 20_000, make_rng(2))
    assert abs(est.z_score(1 - 4 / 3 * math.pi * 0.2**3)) < 3


def test_samples_respect_exclusion():
    spec = _spec(0.1, lam=2.0)
    for cfg in sample_ensemble(spec, 20, 3):
        assert cfg.n == 0 or min_pair_distance(cfg.positions, cfg.domain) > 0.1


def test_resampling_and_rejection_agree():
    # moderate density where plain rejection is still practical
    prs, rej = _spec(0.25, lam=4.0), _spec(0.25, lam=4.0, method="rejection")
    M = 4000
    a = np.array([len(sample_arrays(prs, make_rng(4, k))[0]) for k in range(M)], dtype=float)
    b = np.array([len(sample_arrays(rej, make_rng(5, k))[0]) for k in range(M)], dtype=float)
    for k in (1, 2):
        fa = EstimatorResult.from_samples(np.prod([a - r for r in range(k)], axis=0))
        fb = EstimatorResult.from_samples(np.prod([b - r for r in range(k)], axis=0))
        assert abs((fa - fb).z_score()) < 3.5
    # exclusion depletes the Poisson mean
    assert a.mean() < 4.0


def test_density_too_high_is_reported():
    with pytest.raises(DensityTooHighError):
        sample_arrays(_spec(0.3, lam=0.25, method="rejection"), make_rng(6))


def test_ensemble_persistence(tmp_path):
    spec = _spec(0.1)
    ens = sample_ensemble(spec, 3, 7)
    path = str(tmp_path / "ens.npz")
    save_ensemble(path, ens, spec, 7)
    back, header = load_ensemble(path)
    assert header["config"]["seed"] == 7
    assert all(np.array_equal(a.positions, b.positions) for a, b in zip(ens, back))


def test_cells_and_gaps():
    a = PhaseCell((0.0, 0, 0), (0.2, 1, 1))
    b = PhaseCell((0.7, 0, 0), (0.9, 1, 1))
    assert a.spatial_gap(b) == pytest.approx(0.5)
    assert a.spatial_gap(b, Torus(1.0)) == pytest.approx(0.1)
    assert a.measure == pytest.approx(0.2)
    assert PhaseCell((0, 0, 0), (1, 1, 1), (0, -math.inf, -math.inf)).measure == pytest.approx(1.0)
    assert not a.overlaps(b)
    with pytest.raises(ParameterError):
        PhaseCell((0.2, 0, 0), (0.1, 1, 1))


def test_tuple_counts_and_rcf_factorial_moments():
    spec = _spec(0.5, exclusion=False)
    ens = sample_ensemble(spec, 4000, 8)
    whole = [PhaseCell((0, 0, 0), (1, 1, 1))]
    counts = cell_counts(ens, whole)
    n = np.array([c.n for c in ens], dtype=float)
    assert np.array_equal(counts[:, 0], n)
    for j in (1, 2, 3):
        rcf = estimate_rcf(ens, j, whole * j, epsilon_scaling=False)
        assert rcf.estimate.mean == pytest.approx(np.mean(np.prod([n - r for r in range(j)], axis=0)))
    assert np.array_equal(tuple_counts(np.array([[3.0, 2.0]]), [0, 0, 1]), [12.0])


def test_poisson_errors_vanish_and_bootstrap_agrees():
    spec = _spec(0.5, exclusion=False)
    cells = [PhaseCell((0, 0, 0), (0.4, 1, 1)), PhaseCell((0.5, 0, 0), (0.9, 1, 1))]
    ens = sample_ensemble(spec, 6000, 9)
    tables = estimate_initial_error(ens, 2, cells)
    assert abs(tables.error(0b11).z_score()) < 3
    boot = bootstrap_error_stderr(tables, 200, make_rng(10))
    assert boot[3] == pytest.approx(tables.E.stderr[3], rel=0.25)
    with pytest.raises(ParameterError):
        estimate_initial_error(ens, 2, [cells[0], cells[0]])
    again = tables_from_counts(cell_counts(ens, cells), cells, 0.5)
    assert np.allclose(again.E.values, tables.E.values)
