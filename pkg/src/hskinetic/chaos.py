"""Grand-canonical hard-sphere states with only exclusion correlations, and
empirical estimation of rescaled correlation functions from ensembles.

The target law: the number of spheres is Poisson(mu_eps) and, given the number,
the states are i.i.d. with density f0, conditioned on no pair overlapping. Two exact
samplers are provided:

* ``"rejection"`` redraws the whole configuration until it is overlap-free.
* ``"prs"`` (partial rejection sampling) draws a Poisson process once and then
  repeatedly redraws the process inside the union of epsilon-balls around the
  overlapping points only. Conditioned on that region, the points outside it are
  an overlap-free Poisson process independent of the inside, so the output has the
  same law as full rejection while the work stays proportional to the overlaps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import algebra
from .core import (
    Configuration,
    EstimatorResult,
    InitialDensity,
    ParameterError,
    SimParams,
    Torus,
    check_density_bound,
    close_pairs,
    config_to_mapping,
    make_rng,
)

MIN_ACCEPTANCE = 1e-4
PROBE_ATTEMPTS = 20_000


class DensityTooHighError(RuntimeError):
    """Full-configuration rejection accepts too rarely to be usable."""


@dataclass(frozen=True)
class GrandCanonicalSpec:
    params: SimParams
    f0: InitialDensity
    exclusion: bool = True
    method: str = "prs"

    def __post_init__(self) -> None:
        if self.method not in ("prs", "rejection"):
            raise ParameterError(f"unknown sampling method {self.method!r}")
        if self.f0.domain != self.params.domain:
            raise ParameterError("initial density and parameters use different domains")
        check_density_bound(self.params, self.f0)

    @property
    def mu(self) -> float:
        return self.params.mu_eps

    def with_epsilon(self, epsilon: float) -> GrandCanonicalSpec:
        return GrandCanonicalSpec(self.params.with_epsilon(epsilon), self.f0, self.exclusion, self.method)


def _in_union_of_balls(cand: np.ndarray, centers: np.ndarray, r: float, spec: GrandCanonicalSpec) -> np.ndarray:
    domain = spec.params.domain
    if len(centers) == 0 or len(cand) == 0:
        return np.zeros(len(cand), dtype=bool)
    if isinstance(domain, Torus):
        tree = cKDTree(domain.wrap(centers), boxsize=domain.sides)
        d, _ = tree.query(domain.wrap(cand), k=1)
    else:
        tree = cKDTree(centers)
        d, _ = tree.query(cand, k=1)
    return d < r


def _sample_prs(spec: GrandCanonicalSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, int]:
    eps = spec.params.epsilon
    domain = spec.params.domain
    n = rng.poisson(spec.mu)
    x, v = spec.f0.sample(rng, n)
    rounds = 0
    while True:
        pairs = close_pairs(x, eps, domain)
        if len(pairs) == 0:
            return x, v, rounds
        rounds += 1
        bad = np.unique(pairs)
        centers = x[bad]
        keep = np.ones(len(x), dtype=bool)
        keep[bad] = False
        # fresh Poisson process restricted to the resampling region
        m = rng.poisson(spec.mu)
        cx, cv = spec.f0.sample(rng, m)
        inside = _in_union_of_balls(cx, centers, eps, spec)
        x = np.concatenate([x[keep], cx[inside]])
        v = np.concatenate([v[keep], cv[inside]])


def _sample_rejection(spec: GrandCanonicalSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, int]:
    eps = spec.params.epsilon
    domain = spec.params.domain
    attempts = 0
    while True:
        attempts += 1
        n = rng.poisson(spec.mu)
        x, v = spec.f0.sample(rng, n)
        if len(close_pairs(x, eps, domain)) == 0:
            return x, v, attempts
        if attempts >= PROBE_ATTEMPTS and 1.0 / attempts < MIN_ACCEPTANCE:
            raise DensityTooHighError(
                f"no acceptance in {attempts} full-configuration attempts at epsilon={eps}, "
                f"mean particle number {spec.mu:.1f}; acceptance rate < {MIN_ACCEPTANCE:g}. "
                "Use method='prs' (exact) or a smaller intensity."
            )


def sample_state(spec: GrandCanonicalSpec, rng: np.random.Generator) -> Configuration:
    """One configuration of the exclusion-conditioned Poisson state."""
    if not spec.exclusion:
        n = rng.poisson(spec.mu)
        x, v = spec.f0.sample(rng, n)
        return Configuration(x, v, spec.params.epsilon, spec.params.domain, check=False)
    if spec.method == "prs":
        x, v, _ = _sample_prs(spec, rng)
    else:
        x, v, _ = _sample_rejection(spec, rng)
    return Configuration(x, v, spec.params.epsilon, spec.params.domain, check=True)


def sample_arrays(spec: GrandCanonicalSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Same law as ``sample_state`` without building a validated Configuration."""
    if not spec.exclusion:
        n = rng.poisson(spec.mu)
        return spec.f0.sample(rng, n)
    if spec.method == "prs":
        x, v, _ = _sample_prs(spec, rng)
    else:
        x, v, _ = _sample_rejection(spec, rng)
    return x, v


def sample_ensemble(spec: GrandCanonicalSpec, size: int, seed: int | None) -> list[Configuration]:
    """Configuration k uses the independent stream (seed, k)."""
    return [sample_state(spec, make_rng(seed, k)) for k in range(size)]


def rejection_acceptance_rate(spec: GrandCanonicalSpec, n: int, attempts: int, rng: np.random.Generator) -> EstimatorResult:
    """Fraction of i.i.d. n-point draws from f0 that are overlap-free."""
    eps = spec.params.epsilon
    hits = np.empty(attempts)
    for k in range(attempts):
        x, _ = spec.f0.sample(rng, n)
        hits[k] = len(close_pairs(x, eps, spec.params.domain)) == 0
    return EstimatorResult.from_samples(hits)


# --------------------------------------------------------------------------- persistence


def save_ensemble(path: str, ensemble: Sequence[Configuration], spec: GrandCanonicalSpec, seed: int | None) -> None:
    """Compressed npz with a JSON header (parameters, seed, count)."""
    header = {
        "config": config_to_mapping(spec.params, spec.f0, seed),
        "exclusion": spec.exclusion,
        "method": spec.method,
        "count": len(ensemble),
    }
    counts = np.array([c.n for c in ensemble], dtype=np.int64)
    x = np.concatenate([c.positions for c in ensemble]) if ensemble else np.empty((0, 3))
    v = np.concatenate([c.velocities for c in ensemble]) if ensemble else np.empty((0, 3))
    np.savez_compressed(path, header=np.array(json.dumps(header)), counts=counts, x=x, v=v)


def load_ensemble(path: str) -> tuple[list[Configuration], dict[str, Any]]:
    from .core import params_from_config

    data = np.load(path, allow_pickle=False)
    header = json.loads(str(data["header"]))
    params, _, _ = params_from_config(header["config"])
    offsets = np.concatenate([[0], np.cumsum(data["counts"])])
    ens = [
        Configuration(data["x"][a:b], data["v"][a:b], params.epsilon, params.domain, check=False)
        for a, b in zip(offsets[:-1], offsets[1:])
    ]
    return ens, header


# --------------------------------------------------------------------------- cells and estimators


@dataclass(frozen=True)
class PhaseCell:
    """Axis-aligned box in position times box in velocity.

    Infinite velocity bounds mean the cell integrates over those velocity
    directions; its measure then counts only the finite extents.
    """

    x_lo: tuple[float, float, float]
    x_hi: tuple[float, float, float]
    v_lo: tuple[float, float, float] = (-math.inf, -math.inf, -math.inf)
    v_hi: tuple[float, float, float] = (math.inf, math.inf, math.inf)

    def __post_init__(self) -> None:
        for name in ("x_lo", "x_hi", "v_lo", "v_hi"):
            object.__setattr__(self, name, tuple(float(a) for a in np.broadcast_to(getattr(self, name), (3,))))
        if np.any(np.array(self.x_hi) <= np.array(self.x_lo)) or np.any(np.array(self.v_hi) <= np.array(self.v_lo)):
            raise ParameterError("cell bounds must satisfy lo < hi")
        if not np.all(np.isfinite(self.x_lo + self.x_hi)):
            raise ParameterError("cell positions must be bounded")

    @property
    def measure(self) -> float:
        ext = np.concatenate([np.subtract(self.x_hi, self.x_lo), np.subtract(self.v_hi, self.v_lo)])
        return float(np.prod(ext[np.isfinite(ext)]))

    def contains(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return (
            np.all((x >= self.x_lo) & (x < self.x_hi), axis=-1)
            & np.all((v >= self.v_lo) & (v < self.v_hi), axis=-1)
        )

    def overlaps(self, other: PhaseCell) -> bool:
        xo = np.all(np.maximum(self.x_lo, other.x_lo) < np.minimum(self.x_hi, other.x_hi))
        vo = np.all(np.maximum(self.v_lo, other.v_lo) < np.minimum(self.v_hi, other.v_hi))
        return bool(xo and vo)

    def spatial_gap(self, other: PhaseCell, domain: Any = None) -> float:
        """Smallest distance between the position boxes (minimum image on a torus)."""
        gaps = []
        for k in range(3):
            a0, a1, b0, b1 = self.x_lo[k], self.x_hi[k], other.x_lo[k], other.x_hi[k]
            shifts = (-domain.L[k], 0.0, domain.L[k]) if isinstance(domain, Torus) else (0.0,)
            gaps.append(min(max(b0 + s - a1, a0 - b1 - s, 0.0) for s in shifts))
        return float(np.linalg.norm(gaps))

    def to_dict(self) -> dict[str, Any]:
        return {"x_lo": self.x_lo, "x_hi": self.x_hi, "v_lo": self.v_lo, "v_hi": self.v_hi}


def _check_cells(cells: Sequence[PhaseCell]) -> list[int]:
    """Map each slot to a distinct-cell index; identical cells share an index."""
    distinct: list[PhaseCell] = []
    index = []
    for c in cells:
        for k, d in enumerate(distinct):
            if c == d:
                index.append(k)
                break
            if c.overlaps(d):
                raise ParameterError("cells must be pairwise disjoint (or identical)")
        else:
            distinct.append(c)
            index.append(len(distinct) - 1)
    return index


def cell_counts(ensemble: Iterable[Configuration], cells: Sequence[PhaseCell]) -> np.ndarray:
    """Counts N[k, c] of particles of configuration k in cell c."""
    rows = []
    for cfg in ensemble:
        x = cfg.domain.wrap(cfg.positions)
        rows.append([int(np.count_nonzero(c.contains(x, cfg.velocities))) for c in cells])
    return np.asarray(rows, dtype=float).reshape(-1, len(cells))


def tuple_counts(counts: np.ndarray, slots: Sequence[int]) -> np.ndarray:
    """Ordered tuples of distinct particles with particle m in cell slots[m], per configuration."""
    out = np.ones(len(counts))
    for c in sorted(set(slots)):
        mult = list(slots).count(c)
        for r in range(mult):
            out *= counts[:, c] - r
    return out


@dataclass
class EmpiricalCorrelation:
    order: int
    cells: list[PhaseCell]
    estimate: EstimatorResult
    epsilon_scaling: bool = True
    samples: np.ndarray | None = field(default=None, repr=False)

    def to_row(self) -> dict[str, Any]:
        return {"order": self.order, **self.estimate.to_dict(), "cells": [c.to_dict() for c in self.cells]}


def estimate_rcf(
    ensemble: Sequence[Configuration],
    j: int,
    cells: Sequence[PhaseCell],
    epsilon_scaling: bool = True,
    counts: np.ndarray | None = None,
    seed: int | None = None,
) -> EmpiricalCorrelation:
    """Cell-averaged f_j = eps^{2j} (mean ordered j-tuple count) / prod |cell|."""
    if len(ensemble) == 0 and counts is None:
        raise ParameterError("ensemble must be nonempty")
    if len(cells) != j:
        raise ParameterError("need one cell per particle slot")
    slot = _check_cells(cells)
    distinct = []
    for k, c in zip(slot, cells):
        if k == len(distinct):
            distinct.append(c)
    if counts is None:
        counts = cell_counts(ensemble, distinct)
        eps = ensemble[0].epsilon
    else:
        eps = ensemble[0].epsilon if len(ensemble) else 1.0
    scale = (eps ** (2 * j) if epsilon_scaling else 1.0) / math.prod(c.measure for c in cells)
    vals = tuple_counts(counts, slot) * scale
    return EmpiricalCorrelation(j, list(cells), EstimatorResult.from_samples(vals, seed), epsilon_scaling, vals)


@dataclass
class CorrelationTables:
    """Estimated correlation and error tables over disjoint cells with first-order errors."""

    f: algebra.CumulantTable
    E: algebra.CumulantTable
    n_samples: int
    samples: np.ndarray = field(repr=False)

    def error(self, subset: int | Sequence[int]) -> EstimatorResult:
        m = subset if isinstance(subset, int) else algebra.mask_of(subset)
        return EstimatorResult(float(self.E.values[m]), float(self.E.stderr[m]), self.n_samples)

    def correlation(self, subset: int | Sequence[int]) -> EstimatorResult:
        m = subset if isinstance(subset, int) else algebra.mask_of(subset)
        return EstimatorResult(float(self.f.values[m]), float(self.f.stderr[m]), self.n_samples)


def tables_from_counts(counts: np.ndarray, cells: Sequence[PhaseCell], epsilon: float) -> CorrelationTables:
    """Per-configuration subset statistics X_S = eps^{2|S|} prod_{m in S} N_m / |cell_m|."""
    j = len(cells)
    M = len(counts)
    density = counts * (epsilon**2) / np.array([c.measure for c in cells])
    X = np.ones((M, 1 << j))
    for S in range(1, 1 << j):
        low = S & -S
        X[:, S] = X[:, S ^ low] * density[:, low.bit_length() - 1]
    means = X.mean(axis=0)

    def to_E(mv: np.ndarray) -> np.ndarray:
        return algebra.cumulants_from_correlations(algebra.CumulantTable(j, mv)).values

    E_vals = to_E(means)
    f_err = X.std(axis=0, ddof=1) / math.sqrt(M) if M > 1 else np.zeros(1 << j)
    E_err = algebra.delta_method_stderr(to_E, means, X) if M > 1 else np.zeros(1 << j)
    f = algebra.CumulantTable(j, means, "correlation_f", f_err)
    E = algebra.CumulantTable(j, E_vals, "error_E", E_err)
    return CorrelationTables(f, E, M, X)


def estimate_initial_error(
    ensemble: Sequence[Configuration], j: int, cells: Sequence[PhaseCell], counts: np.ndarray | None = None
) -> CorrelationTables:
    """Correlation-error table of the ensemble on pairwise disjoint cells."""
    if len(cells) != j:
        raise ParameterError("need one cell per label")
    slot = _check_cells(cells)
    if len(set(slot)) != j:
        raise ParameterError("error tables need pairwise disjoint cells")
    if counts is None:
        if len(ensemble) == 0:
            raise ParameterError("ensemble must be nonempty")
        counts = cell_counts(ensemble, cells)
    eps = ensemble[0].epsilon
    return tables_from_counts(counts, cells, eps)


def bootstrap_error_stderr(tables: CorrelationTables, resamples: int, rng: np.random.Generator) -> np.ndarray:
    """Bootstrap standard deviation of the error table (validation of the delta method)."""
    X = tables.samples
    j = tables.E.j
    M = len(X)
    out = np.empty((resamples, 1 << j))
    for r in range(resamples):
        idx = rng.integers(0, M, M)
        mv = X[idx].mean(axis=0)
        out[r] = algebra.cumulants_from_correlations(algebra.CumulantTable(j, mv)).values
    return out.std(axis=0, ddof=1)
