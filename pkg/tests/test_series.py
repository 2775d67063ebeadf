from __future__ import annotations

import math
import warnings

import numpy as np
import pytest

from hskinetic.chaos import PhaseCell
from hskinetic.core import InitialDensity, ParameterError, Torus, make_rng
from hskinetic.series import (
    NonConvergenceWarning,
    SeriesQuery,
    calibrate_tbar,
    cell_average_series,
    evaluate_series,
    evaluate_tree_value,
    factorization_check,
    reference_density,
    tree_value_samples,
)
from hskinetic.trees import CollisionTree

COS = InitialDensity("cosine", {"a": 0.3}, 1.0, Torus(1.0))


def test_order_zero_is_free_transport():
    point = np.array([[0.25, 0.5, 0.5, 0.5, -0.2, 0.1]])
    est = evaluate_series(SeriesQuery("boltzmann", point, 0.3, COS, n_max=0, samples=10), make_rng(1))
    x0 = point[:, :3] - 0.3 * point[:, 3:]
    assert est.orders[0].mean == pytest.approx(float(COS(x0, point[:, 3:])[0]), rel=1e-14)
    assert est.orders[0].stderr == 0.0


@pytest.mark.filterwarnings("ignore::hskinetic.series.NonConvergenceWarning")
def test_equilibrium_first_order_vanishes():
    f0 = InitialDensity("uniform", {}, 1.0, Torus(1.0))
    point = np.array([[0.5, 0.5, 0.5, 0.7, -0.3, 0.2]])
    for target, eps in (("boltzmann", 0.0), ("enskog", 0.05)):
        est = evaluate_series(SeriesQuery(target, point, 0.2, f0, n_max=1, samples=20_000, epsilon=eps), make_rng(2))
        assert abs(est.orders[1].z_score()) < 3
        assert est.magnitudes[1].mean > 0


def test_boltzmann_factorization():
    pts = np.array([[0.2, 0.5, 0.5, 0.4, 0.0, 0.0], [0.7, 0.1, 0.3, -0.3, 0.2, 0.0]])
    rng = make_rng(3)
    for trees in ((CollisionTree(1, (0,)), CollisionTree(1, ())), (CollisionTree(1, (0,)), CollisionTree(1, (0,)))):
        joint, prod = factorization_check("boltzmann", trees, pts, 0.1, COS, rng, 20_000)
        assert abs(joint.mean - prod.mean) < 3 * math.hypot(joint.stderr, prod.stderr)


def test_tree_values_reject_bad_inputs():
    tree = CollisionTree(1, (0,))
    point = np.zeros((1, 6))
    with pytest.raises(ParameterError):
        evaluate_tree_value("ebf", tree, point, 0.1, COS, make_rng(0), 10)
    with pytest.raises(ParameterError):
        tree_value_samples("mixed", tree, point, 0.1, COS, make_rng(0), 10)
    with pytest.raises(ParameterError):
        SeriesQuery("bbgky", np.zeros((3, 6)), 0.1, COS, epsilon=0.1)
    with pytest.raises(ParameterError):
        SeriesQuery("boltzmann", point, 0.2, COS, t_bar=0.1)
    with pytest.raises(ParameterError):
        SeriesQuery("boltzmann", point, 0.1, COS, n_max=9)


@pytest.mark.filterwarnings("ignore::hskinetic.series.NonConvergenceWarning")
def test_lambda_scales_each_order():
    point = np.array([[0.3, 0.5, 0.5, 0.2, 0.1, 0.0]])
    a = evaluate_series(SeriesQuery("boltzmann", point, 0.1, COS, 2, 2000), make_rng(4))
    b = evaluate_series(SeriesQuery("boltzmann", point, 0.1, COS, 2, 2000, lambda_mfp=2.0), make_rng(4))
    for n in range(3):
        assert b.orders[n].mean == pytest.approx(a.orders[n].mean * 2.0**-n, rel=1e-12)


def test_interacting_series_close_to_enskog_at_small_diameter():
    point = np.array([[0.3, 0.5, 0.5, 0.4, 0.0, 0.0]])
    rng = make_rng(5)
    ibf = evaluate_series(SeriesQuery("bbgky", point, 0.02, COS, 2, 4000, epsilon=0.01), rng)
    ebf = evaluate_series(SeriesQuery("enskog", point, 0.02, COS, 2, 4000, epsilon=0.01), rng)
    assert abs((ibf.total - ebf.total).mean) < 3 * math.hypot(ibf.total.stderr, ebf.total.stderr)


def test_tail_ratio_and_warning():
    f0 = reference_density()
    point = np.concatenate([0.5 * f0.domain.sides, np.zeros(3)])[None]
    with pytest.warns(NonConvergenceWarning):
        est = evaluate_series(SeriesQuery("boltzmann", point, 0.1, f0, 3, 1000), make_rng(6))
    assert not est.converged and est.warnings
    with warnings.catch_warnings():
        warnings.simplefilter("error", NonConvergenceWarning)
        est = evaluate_series(SeriesQuery("boltzmann", point, 0.001, f0, 3, 2000), make_rng(7))
    assert est.converged
    assert "tail_ratio" in est.to_json() and est.to_csv().startswith("order,")


def test_tbar_calibration_is_monotone():
    best, table = calibrate_tbar([0.001, 0.002, 0.05], make_rng(8), n_max=3, samples=1000)
    assert best in (0.001, 0.002)
    assert table[-1][1] > table[0][1]


def test_reference_density_amplitude():
    assert reference_density(z=2.0, beta=1.5).amplitude == pytest.approx(2.0)


def test_cell_average_matches_point_average():
    # order zero on a cell: the draw-weighted mean equals the cell average of free transport
    cell = PhaseCell((0.1, 0, 0), (0.4, 1, 1))
    est = cell_average_series("boltzmann", cell, 0.0, COS, 0, 20_000, make_rng(9))
    x = np.linspace(0.1, 0.4, 20001)
    exact = float(np.mean(1 + 0.3 * np.cos(2 * math.pi * x)))
    assert abs(est.total.z_score(exact)) < 3
