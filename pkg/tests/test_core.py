from __future__ import annotations

import math

import numpy as np
import pytest

from hskinetic.core import (
    Accumulator,
    Configuration,
    EstimatorResult,
    FreeSpace,
    InitialDensity,
    ParameterError,
    SimParams,
    Torus,
    check_density_bound,
    distance,
    exclusion_indicator,
    load_config,
    make_rng,
    maxwellian_density,
    params_from_config,
    sample_maxwellian,
)


def test_streams_are_reproducible_and_distinct():
    a = make_rng(5, 1, 2).random(4)
    assert np.array_equal(a, make_rng(5, 1, 2).random(4))
    assert not np.array_equal(a, make_rng(5, 1, 3).random(4))


def test_gaussian_normalization_by_quadrature():
    rng = make_rng(0)
    # importance sample exp(-v^2/2) with a wider Gaussian
    s = 1.5
    v = rng.normal(scale=s, size=(200_000, 3))
    q = (2 * math.pi * s * s) ** -1.5 * np.exp(-np.sum(v * v, axis=1) / (2 * s * s))
    est = EstimatorResult.from_samples(np.exp(-0.5 * np.sum(v * v, axis=1)) / q)
    assert abs(est.z_score((2 * math.pi) ** 1.5)) < 3
    assert (2 * math.pi) ** 1.5 == pytest.approx(15.7496, abs=1e-4)


def test_maxwellian_sampler_variance():
    v = sample_maxwellian(2.0, make_rng(1), 100_000)
    assert np.var(v) == pytest.approx(0.5, rel=0.02)
    assert maxwellian_density(np.zeros(3), 1.0) == pytest.approx((2 * math.pi) ** -1.5)


def test_torus_metric_properties():
    rng = make_rng(2)
    dom = Torus((1.0, 2.0, 0.5))
    a, b, c = (rng.uniform(-3, 3, (500, 3)) for _ in range(3))
    dab, dba = distance(dom, a, b), distance(dom, b, a)
    assert np.allclose(dab, dba)
    assert np.all(dab <= np.linalg.norm(a - b, axis=1) + 1e-12)
    assert np.all(dab <= distance(dom, a, c) + distance(dom, c, b) + 1e-12)
    assert np.all(dom.wrap(a) >= 0) and np.all(dom.wrap(a) < dom.sides)


def test_configuration_rejects_overlap():
    with pytest.raises(ParameterError):
        Configuration(np.array([[0, 0, 0], [0.05, 0, 0.0]]), np.zeros((2, 3)), 0.1, FreeSpace())
    cfg = Configuration(np.array([[0, 0, 0], [0.2, 0, 0.0]]), np.zeros((2, 3)), 0.1, FreeSpace())
    assert exclusion_indicator(cfg)
    # the torus wraps: 0.02 and 0.98 are close
    with pytest.raises(ParameterError):
        Configuration(np.array([[0.02, 0, 0], [0.98, 0, 0.0]]), np.zeros((2, 3)), 0.1, Torus(1.0))


def test_configuration_round_trip():
    cfg = Configuration(np.array([[0.1, 0.2, 0.3]]), np.array([[1.0, -1.0, 0.5]]), 0.05, Torus(1.0))
    back = Configuration.from_dict(cfg.to_dict())
    assert np.array_equal(back.positions, cfg.positions) and back.domain == cfg.domain


def test_boltzmann_grad_scaling():
    p = SimParams(epsilon=0.1, lambda_mfp=2.0)
    assert p.mu_eps * p.epsilon**2 == pytest.approx(0.5)
    with pytest.raises(ParameterError):
        SimParams(epsilon=-1.0)


@pytest.mark.parametrize("kind,params", [("uniform", {}), ("cosine", {"a": 0.4}),
                                         ("box", {"lo": [0.1, 0, 0], "hi": [0.4, 1, 1]})])
def test_density_integrates_to_one(kind, params):
    f0 = InitialDensity(kind, params, 1.0, Torus(1.0))
    x = make_rng(3).random((200_000, 3))
    assert float(np.mean(f0.spatial(x))) == pytest.approx(1.0, abs=0.01)
    xs = f0.sample_positions(make_rng(4), 1000)
    assert np.all(f0.spatial(xs) > 0)


def test_bump_density_normalized():
    f0 = InitialDensity("bump", {"center": [0, 0, 0], "radius": 0.5}, 1.0, FreeSpace())
    x = make_rng(5).uniform(-0.5, 0.5, (400_000, 3))
    assert float(np.mean(f0.spatial(x))) == pytest.approx(1.0, abs=0.02)


def test_density_bound_check():
    f0 = InitialDensity("uniform", {}, 1.0, Torus(1.0))
    with pytest.raises(ParameterError):
        check_density_bound(SimParams(epsilon=0.1, z=0.01 * f0.amplitude, domain=Torus(1.0)), f0)
    check_density_bound(SimParams(epsilon=0.1, z=f0.amplitude, domain=Torus(1.0)), f0)


def test_estimator_arithmetic_and_accumulator():
    rng = make_rng(6)
    a = rng.normal(size=1000)
    acc = Accumulator()
    acc.add(a[:400])
    other = Accumulator()
    other.add(a[400:])
    r = acc.merge(other).result()
    ref = EstimatorResult.from_samples(a)
    assert r.mean == pytest.approx(ref.mean) and r.stderr == pytest.approx(ref.stderr)
    d = ref - ref.scaled(0.5)
    assert d.stderr == pytest.approx(math.hypot(ref.stderr, 0.5 * ref.stderr))


def test_config_loading(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('epsilon = 0.1\nseed = 3\n[domain]\nkind = "torus"\nL = 2.0\n[h]\nkind = "cosine"\n')
    params, f0, seed = params_from_config(load_config(str(path)))
    assert params.domain == Torus(2.0) and f0.kind == "cosine" and seed == 3
