from __future__ import annotations

import math

import numpy as np
import pytest

from hskinetic import algebra as A
from hskinetic.core import ParameterError, make_rng


@pytest.mark.parametrize("j", range(1, 7))
def test_round_trip_correlations_cumulants(j, rng):
    f = A.random_table(j, rng)
    E = A.cumulants_from_correlations(f)
    back = A.correlations_from_cumulants(E, f.singletons())
    assert np.max(np.abs(back.values - f.values)) < 1e-12


def test_singleton_errors_vanish(rng):
    f = A.random_table(4, rng)
    E = A.cumulants_from_correlations(f)
    for i in range(4):
        assert abs(E.values[1 << i]) < 1e-15


@pytest.mark.parametrize("j", range(1, 6))
def test_truncated_route_matches_cumulants(j, rng):
    f = A.random_table(j, rng)
    E1 = A.cumulants_from_correlations(f).values
    E2 = A.error_from_truncated(A.truncated_from_correlations(f)).values
    assert np.max(np.abs(E1[1:] - E2[1:])) < 1e-12


def test_product_table_has_no_errors():
    f = A.singleton_product_table([0.3, 1.7, -0.4])
    f = A.CumulantTable(3, f.values, "correlation_f")
    E = A.cumulants_from_correlations(f)
    assert np.max(np.abs(E.values[1:])) < 1e-15


@pytest.mark.parametrize("j", range(1, 6))
def test_centered_subset_identity(j, rng):
    f = A.random_table(j, rng)
    for S in range(1 << j):
        lhs, rhs = A.centered_subset_identity(f, S)
        assert abs(float(lhs) - float(rhs)) < 1e-12


def test_external_reference_function(rng):
    f = A.random_table(3, rng)
    g = rng.normal(size=3)
    E = A.cumulants_from_correlations(f, g)
    for i in range(3):
        assert E.values[1 << i] == pytest.approx(f.singletons()[i] - g[i])


def test_kind_checks(rng):
    with pytest.raises(ParameterError):
        A.correlations_from_cumulants(A.random_table(2, rng), np.ones(2))
    with pytest.raises(ParameterError):
        A.error_from_truncated(A.random_table(2, rng))


def test_graph_identity_small_sweep():
    for n in range(1, 5):
        for g in A.all_graphs(n):
            V = g.vertices
            for L in A.submasks(V):
                for L0 in A.submasks(V ^ L):
                    s = sum(A.graph_expansion_R(Q, L0, g) for Q in A.submasks(L))
                    assert s == g.chibar(L, L | L0)


def test_graph_expansion_trivial_cases():
    g = A.Graph.from_edges(3, [(0, 1)])
    assert A.graph_expansion_R(0, 0b100, g) == 1
    # vertex 2 is isolated: no ordered partition survives
    assert A.graph_expansion_R(0b100, 0b011, g) == 0
    # single vertex joined to L0: one partition with sign -1
    assert A.graph_expansion_R(0b001, 0b010, g) == -1


def test_graph_validation():
    with pytest.raises(ParameterError):
        A.Graph(2, (0b10, 0b00))
    with pytest.raises(ParameterError):
        A.Graph.from_edges(2, [(1, 1)])
    with pytest.raises(ParameterError):
        A.graph_expansion_R(0b1, 0b1, A.Graph(2))


def test_set_partitions_count():
    bell = [1, 1, 2, 5, 15, 52]
    for k, b in enumerate(bell):
        assert sum(1 for _ in A.set_partitions(range(k))) == b


def _random_tables(C: int, rng: np.random.Generator) -> dict[int, np.ndarray]:
    f1 = rng.uniform(0.5, 1.5, C)
    out = {1: f1}
    for m in (2, 3, 4):
        prod = f1
        for _ in range(m - 1):
            prod = np.multiply.outer(prod, f1)
        out[m] = prod * (1 + 0.2 * rng.normal(size=(C,) * m))
    return out


@pytest.mark.parametrize("k", [2, 3, 4])
def test_centered_moment_two_routes(k, rng):
    C = 4
    f = _random_tables(C, rng)
    phis = rng.normal(size=(k, C))
    vol = rng.uniform(0.5, 1.0, C)
    a = A.centered_moment_from_correlations(phis, f, 0.3, vol)
    b = A.centered_moment_from_cumulants(phis, f, 0.3, vol)
    assert a == pytest.approx(b, rel=1e-10, abs=1e-12)


def test_disjoint_support_moment_is_error_integral(rng):
    # two observables on disjoint cells: centered moment = |D0||D1| E_2 on the pair
    C = 2
    f = _random_tables(C, rng)
    vol = np.array([0.7, 0.4])
    phis = np.array([[1.0, 0.0], [0.0, 1.0]])
    direct = A.centered_moment_from_correlations(phis, f, 0.1, vol)
    E = A.cumulants_from_correlations(A.CumulantTable(2, np.array([1.0, f[1][0], f[1][1], f[2][0, 1]])))
    assert direct == pytest.approx(A.fluctuation_moment_identity(E, vol), rel=1e-12)


def test_delta_method_matches_bootstrap():
    rng = make_rng(3)
    X = rng.normal(loc=[1.0, 2.0], scale=[0.3, 0.5], size=(4000, 2))

    def transform(m):
        return np.array([m[0] * m[1]])

    se = float(A.delta_method_stderr(transform, X.mean(axis=0), X)[0])
    boots = [transform(X[rng.integers(0, len(X), len(X))].mean(axis=0))[0] for _ in range(200)]
    assert se == pytest.approx(float(np.std(boots, ddof=1)), rel=0.25)
    assert math.isfinite(se)
