"""Epsilon scans of correlation errors, recollision statistics, fluctuation moments and
series-versus-particle discrepancies, with trend verdicts.

Every experiment is a deterministic function of its ``ExperimentSpec`` (including the
seed): configuration k at grid point e uses the generator ``make_rng(seed, e, k)``, so
results do not depend on how the work is split across processes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import algebra
from .chaos import GrandCanonicalSpec, PhaseCell, tables_from_counts
from .core import (
    EstimatorResult,
    InitialDensity,
    ParameterError,
    SimParams,
    Torus,
    make_rng,
    sample_maxwellian,
)
from .ensembles import simulate_counts
from .series import NonConvergenceWarning, _cell_root_sampler, cell_average_series, tree_value_samples
from .trees import CollisionTree, batch_overlaps, free_flow_batch, sample_node_batch, uniform_sphere

DEFAULT_THETA = 0.2
WELCH_SIGMAS = 2.0
AGREE_SIGMAS = 3.0


# --------------------------------------------------------------------------- specs and reports


@dataclass
class ExperimentSpec:
    """Inputs of one scan. ``ensemble_sizes`` has one entry per grid point (or one for all)."""

    name: str
    params: SimParams
    f0: InitialDensity
    epsilon_grid: tuple[float, ...]
    t: float
    ensemble_sizes: tuple[int, ...] = (1000,)
    cells: list[PhaseCell] | None = None
    theta: float = DEFAULT_THETA
    theta3: float | None = None
    seed: int = 0
    options: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        grid = tuple(float(e) for e in self.epsilon_grid)
        if not grid or any(e <= 0 for e in grid) or any(a <= b for a, b in zip(grid, grid[1:])):
            raise ParameterError("epsilon_grid must be positive and strictly decreasing")
        self.epsilon_grid = grid
        if not 0 < self.theta < 0.25:
            raise ParameterError("theta must lie in (0, 1/4)")
        sizes = tuple(int(m) for m in np.atleast_1d(self.ensemble_sizes))
        if len(sizes) == 1:
            sizes = sizes * len(grid)
        if len(sizes) != len(grid) or min(sizes) < 2:
            raise ParameterError("need one ensemble size (>= 2) per grid point")
        self.ensemble_sizes = sizes
        if self.t < 0:
            raise ParameterError("horizon must be nonnegative")

    def delta(self, epsilon: float) -> float:
        return epsilon**self.theta

    @property
    def delta_max(self) -> float:
        return max(self.delta(e) for e in self.epsilon_grid)

    def to_mapping(self) -> dict[str, Any]:
        return {
            "name": self.name, **self.params.to_mapping(), "h": self.f0.to_mapping(),
            "epsilon_grid": list(self.epsilon_grid), "t": self.t, "ensemble_sizes": list(self.ensemble_sizes),
            "cells": None if self.cells is None else [c.to_dict() for c in self.cells],
            "theta": self.theta, "theta3": self.theta3, "seed": self.seed, "options": self.options,
        }


def spec_from_mapping(m: Mapping[str, Any], name: str | None = None, seed: int | None = None) -> ExperimentSpec:
    """Build a spec from a config table (see README for the keys).

    Physical parameters use the same keys as the top-level run config (beta,
    lambda_mfp, domain, h); epsilon defaults to the first grid point.
    """
    grid = tuple(m.get("epsilon_grid", (0.1, 0.05, 0.025)))
    params = SimParams.from_mapping({"epsilon": grid[0], **m})
    f0 = InitialDensity.from_mapping(m.get("h", {"kind": "uniform"}), params.beta, params.domain)
    cells = None
    if m.get("cells"):
        cells = [PhaseCell(c["x_lo"], c["x_hi"], c.get("v_lo", (-math.inf,) * 3), c.get("v_hi", (math.inf,) * 3))
                 for c in m["cells"]]
    return ExperimentSpec(
        name=name or m.get("name", "experiment"),
        params=params,
        f0=f0,
        epsilon_grid=grid,
        t=float(m.get("t", 0.1)),
        ensemble_sizes=tuple(np.atleast_1d(m.get("ensemble_sizes", 1000))),
        cells=cells,
        theta=float(m.get("theta", DEFAULT_THETA)),
        theta3=m.get("theta3"),
        seed=int(m.get("seed", 0) if seed is None else seed),
        options=dict(m.get("options", {})),
    )


@dataclass(frozen=True)
class Verdict:
    rule: str
    passed: bool
    detail: str

    def to_dict(self) -> dict[str, Any]:
        return {"rule": self.rule, "passed": bool(self.passed), "detail": self.detail}


@dataclass(frozen=True)
class SlopeFit:
    name: str
    slope: float
    ci_low: float
    ci_high: float

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "slope": self.slope, "ci_low": self.ci_low, "ci_high": self.ci_high}


@dataclass
class Report:
    """Per-epsilon rows of named estimates, slope fits and verdicts."""

    name: str
    rows: list[dict[str, Any]] = field(default_factory=list)
    slopes: list[SlopeFit] = field(default_factory=list)
    verdicts: list[Verdict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def add_row(self, epsilon: float, **estimates: EstimatorResult | float) -> None:
        row: dict[str, Any] = {"epsilon": epsilon}
        for k, e in estimates.items():
            if isinstance(e, EstimatorResult):
                row[k] = e.mean
                row[k + "_stderr"] = e.stderr
                row[k + "_n"] = e.n_samples
            else:
                row[k] = e
        self.rows.append(row)

    def estimate(self, key: str) -> list[EstimatorResult]:
        return [EstimatorResult(r[key], r[key + "_stderr"], r[key + "_n"]) for r in self.rows]

    def to_csv(self) -> str:
        keys: list[str] = []
        for r in self.rows:
            keys += [k for k in r if k not in keys]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys)
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "rows": self.rows, "slopes": [s.to_dict() for s in self.slopes],
                "verdicts": [v.to_dict() for v in self.verdicts], "notes": self.notes, "passed": self.passed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), default=float, indent=1)


# --------------------------------------------------------------------------- statistics


def welch_gap(a: EstimatorResult, b: EstimatorResult) -> float:
    """(|a| - |b|) in units of the combined standard error."""
    se = math.hypot(a.stderr, b.stderr)
    d = abs(a.mean) - abs(b.mean)
    return math.inf if se == 0 and d > 0 else (d / se if se > 0 else 0.0)


def strictly_decreasing(results: Sequence[EstimatorResult], sigmas: float = WELCH_SIGMAS) -> tuple[bool, list[float]]:
    """All pairwise magnitude gaps along a decreasing-epsilon grid exceed ``sigmas``."""
    gaps = [welch_gap(results[i], results[k]) for i in range(len(results)) for k in range(i + 1, len(results))]
    return all(g > sigmas for g in gaps), gaps


def agree(a: EstimatorResult, b: EstimatorResult, sigmas: float = AGREE_SIGMAS) -> tuple[bool, float]:
    se = math.hypot(a.stderr, b.stderr)
    z = abs(a.mean - b.mean) / se if se > 0 else (0.0 if a.mean == b.mean else math.inf)
    return z <= sigmas, z


def loglog_slope(
    epsilons: Sequence[float],
    results: Sequence[EstimatorResult],
    rng: np.random.Generator,
    resamples: int = 2000,
    name: str = "slope",
    draws: Sequence[Callable[[np.random.Generator], float]] | None = None,
) -> SlopeFit:
    """Least-squares slope of log|value| against log(epsilon), with a 95% bootstrap interval.

    The bootstrap redraws each point either from ``draws`` (resampling raw data) or
    from a normal law with the estimate's standard error.
    """
    le = np.log(np.asarray(epsilons, dtype=float))
    means = np.array([abs(r.mean) for r in results])
    if len(means) < 2 or np.any(means <= 0):
        return SlopeFit(name, math.nan, math.nan, math.nan)
    slope = float(np.polyfit(le, np.log(means), 1)[0])
    boot = []
    for _ in range(resamples):
        if draws is not None:
            y = np.array([abs(d(rng)) for d in draws])
        else:
            y = np.abs(np.array([rng.normal(r.mean, r.stderr) for r in results]))
        if np.all(y > 0):
            boot.append(np.polyfit(le, np.log(y), 1)[0])
    lo, hi = (np.percentile(boot, [2.5, 97.5]) if boot else (math.nan, math.nan))
    return SlopeFit(name, slope, float(lo), float(hi))


def binomial_draw(hits: int, n: int) -> Callable[[np.random.Generator], float]:
    p = hits / n
    return lambda rng: rng.binomial(n, p) / n


# --------------------------------------------------------------------------- cells


def separated_cells(domain: Torus, k: int, delta: float, axis: int = 0, offset: float = 0.0,
                    v_lo: Sequence[float] | None = None, v_hi: Sequence[float] | None = None) -> list[PhaseCell]:
    """k slabs on the lattice of spacing L/k along ``axis``, each as wide as the separation allows.

    Slab m covers [offset + m L/k, offset + m L/k + L/k - delta) along the axis and the
    full torus in the other directions, so neighbouring slabs (also across the periodic
    boundary) are exactly ``delta`` apart.
    """
    if not isinstance(domain, Torus):
        raise ParameterError("separated cell layouts need a torus")
    L = domain.L[axis]
    width = L / k - delta
    if width <= 0:
        raise ParameterError(f"{k} cells cannot be {delta}-separated along a side of length {L}")
    if offset < 0 or offset + (k - 1) * L / k + width > L + 1e-12:
        raise ParameterError("offset must keep every cell inside the periodic cell")
    cells = []
    for m in range(k):
        lo = np.zeros(3)
        hi = domain.sides.copy()
        lo[axis] = offset + m * L / k
        hi[axis] = lo[axis] + width
        cells.append(PhaseCell(tuple(lo), tuple(hi),
                               tuple(v_lo) if v_lo is not None else (-math.inf,) * 3,
                               tuple(v_hi) if v_hi is not None else (math.inf,) * 3))
    return cells


def check_separation(cells: Sequence[PhaseCell], delta: float, domain: Any) -> None:
    for a in range(len(cells)):
        for b in range(a + 1, len(cells)):
            g = cells[a].spatial_gap(cells[b], domain)
            if g < delta * (1 - 1e-12):
                raise ParameterError(f"cells {a} and {b} are {g:.4g} apart, less than delta={delta:.4g}")


def _scan_cells(spec: ExperimentSpec, k: int) -> list[PhaseCell]:
    """Configured cells, or the lattice layout of ``separated_cells`` at the largest delta.

    Option ``vx_windows`` (one [lo, hi] pair per cell) restricts the velocity
    component along the layout axis in each generated cell.
    """
    cells = spec.cells
    if cells is None:
        axis = int(spec.options.get("axis", 0))
        cells = separated_cells(spec.params.domain, k, spec.delta_max, axis, float(spec.options.get("offset", 0.0)))
        windows = spec.options.get("vx_windows")
        if windows is not None:
            if len(windows) != k:
                raise ParameterError("need one velocity window per cell")
            restricted = []
            for c, (lo, hi) in zip(cells, windows):
                vlo, vhi = list(c.v_lo), list(c.v_hi)
                vlo[axis], vhi[axis] = float(lo), float(hi)
                restricted.append(PhaseCell(c.x_lo, c.x_hi, tuple(vlo), tuple(vhi)))
            cells = restricted
    check_separation(cells, spec.delta_max, spec.params.domain)
    return list(cells)


# --------------------------------------------------------------------------- particle ensembles


def _source_digest() -> str:
    """Hash of the modules that determine ensemble counts (invalidates stale caches)."""
    h = hashlib.sha256()
    here = os.path.dirname(__file__)
    for name in ("core.py", "chaos.py", "dynamics.py", "_fastflow.py", "ensembles.py"):
        with open(os.path.join(here, name), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def ensemble_counts(
    gspec: GrandCanonicalSpec,
    t: float,
    cells: Sequence[PhaseCell],
    size: int,
    seed: int,
    e_index: int = 0,
    threads: int = 1,
    chunk: int = 2000,
    cache_dir: str | None = None,
) -> tuple[np.ndarray, int]:
    """Cell counts of ``size`` configurations sampled from ``gspec`` and evolved to time t.

    Returns the (size, len(cells)) count matrix and the number of configurations
    redrawn after a singular (simultaneous or grazing) event. With ``cache_dir`` the
    result is stored under a key made of every input and the source digest, so a
    rerun with identical inputs and code loads the identical counts.
    """
    path = None
    if cache_dir is not None:
        key = json.dumps({
            "params": gspec.params.to_mapping(), "f0": gspec.f0.to_mapping(), "beta": gspec.f0.beta,
            "exclusion": gspec.exclusion, "method": gspec.method, "t": t,
            "cells": [c.to_dict() for c in cells], "size": size, "seed": seed, "e": e_index,
            "src": _source_digest(),
        }, sort_keys=True, default=float)
        path = os.path.join(cache_dir, hashlib.sha256(key.encode()).hexdigest()[:24] + ".npz")
        if os.path.exists(path):
            with np.load(path) as z:
                return z["counts"], int(z["redrawn"])
    counts, redrawn = simulate_counts(gspec, t, cells, size, seed, e_index, threads, chunk)
    if path is not None:
        os.makedirs(cache_dir, exist_ok=True)
        np.savez_compressed(path, counts=counts.astype(np.int32), redrawn=redrawn)
    return counts, redrawn


def _gspec(spec: ExperimentSpec, eps: float, exclusion: bool = True) -> GrandCanonicalSpec:
    return GrandCanonicalSpec(spec.params.with_epsilon(eps), spec.f0, exclusion=exclusion,
                              method=spec.options.get("sampler", "prs"))


# --------------------------------------------------------------------------- chaos scan


def run_chaos_scan(spec: ExperimentSpec, threads: int = 1, counts: Sequence[np.ndarray] | None = None,
                   cache_dir: str | None = None) -> Report:
    """Correlation errors E_2 (and E_3 with three cells) on delta-separated cells along the grid."""
    k = int(spec.options.get("n_cells", 2))
    if not 2 <= k <= 3:
        raise ParameterError("the chaos scan uses two or three cells")
    cells = _scan_cells(spec, k)
    exclusion = bool(spec.options.get("exclusion", True))
    rep = Report(spec.name)
    rep.notes.append("cells: " + json.dumps([c.to_dict() for c in cells], default=float))
    E2, ratios = [], []
    for e, eps in enumerate(spec.epsilon_grid):
        if counts is not None:
            N, redrawn = np.asarray(counts[e], dtype=float), 0
        else:
            N, redrawn = ensemble_counts(_gspec(spec, eps, exclusion), spec.t, cells, spec.ensemble_sizes[e],
                                         spec.seed, e, threads, cache_dir=cache_dir)
        tab = tables_from_counts(N, cells, eps)
        est: dict[str, Any] = {f"f1_c{c}": tab.correlation([c]) for c in range(k)}
        est["f2"] = tab.correlation([0, 1])
        est["E2"] = tab.error([0, 1])
        if k == 3:
            est["E3"] = tab.error([0, 1, 2])
        f1a, f1b = est["f1_c0"], est["f1_c1"]
        denom = f1a.mean * f1b.mean
        # f2 / (f1 f1) = 1 + E2 / (f1 f1); uncertainty dominated by E2
        ratio = EstimatorResult(1 + est["E2"].mean / denom, est["E2"].stderr / abs(denom), len(N)) if denom else \
            EstimatorResult(math.nan, math.nan, len(N))
        est["factorization_ratio"] = ratio
        est["mean_cell_count"] = float(N.sum(axis=1).mean()) if N.size else 0.0
        rep.add_row(eps, delta=spec.delta(eps), redrawn=redrawn, **est)
        E2.append(est["E2"])
        ratios.append(ratio)
    ok, gaps = strictly_decreasing(E2)
    rep.verdicts.append(Verdict("chaos.E2_decreasing", ok,
                                "pairwise |E2| gaps (sigma): " + ", ".join(f"{g:.2f}" for g in gaps)))
    ok_f, z = agree(ratios[-1], EstimatorResult.exact(1.0))
    rep.notes.append(f"f2/(f1 f1) at smallest epsilon: {ratios[-1].mean:.6f}, z={z:.2f} from 1 "
                     f"({'within' if ok_f else 'outside'} 3 sigma)")
    rep.slopes.append(loglog_slope(spec.epsilon_grid, E2, make_rng(spec.seed, 991), name="log|E2| vs log eps"))
    return rep


# --------------------------------------------------------------------------- recollisions


def internal_overlap_fraction(eps: float, t: float, beta: float, n_max: int, samples: int,
                              rng: np.random.Generator) -> tuple[int, int]:
    """(hits, draws) of the internal indicator for random single-root trees with 1..n_max creations.

    The root starts at the origin of free space with a Maxwellian velocity; the tree
    order is uniform in 1..n_max and the tree uniform among trees of that order. Up
    to its first internal event the interacting flow coincides with the Enskog flow,
    so the indicator (an overlap at a creation or an internal recollision) equals
    the Enskog-flow internal overlap flag.
    """
    hits = 0
    per = np.bincount(rng.integers(1, n_max + 1, samples), minlength=n_max + 1)
    for n in range(1, n_max + 1):
        if per[n] == 0:
            continue
        trees = list(CollisionTree.enumerate(1, n))
        pick = rng.integers(0, len(trees), per[n])
        for idx in np.unique(pick):
            S = int(np.count_nonzero(pick == idx))
            nb = sample_node_batch(n, t, beta, rng, S, proposal_beta=beta)
            rv = sample_maxwellian(beta, rng, S)[:, None]
            fb = free_flow_batch("ebf", trees[idx], np.zeros((S, 1, 3)), rv, nb, eps, t)
            internal, _ = batch_overlaps(fb, trees[idx], eps, "ebf")
            hits += int(np.count_nonzero(internal))
    return hits, samples


def external_overlap_fraction(eps: float, t: float, beta: float, separation: tuple[float, float], n_max: int,
                              samples: int, rng: np.random.Generator) -> tuple[int, int]:
    """(hits, draws) of two-tree overlaps in the free (Enskog) flow.

    Roots are separated by a distance uniform in ``separation`` (isotropic direction)
    and carry Maxwellian velocities; the total creation count is uniform in 0..n_max.
    """
    hits = 0
    per = np.bincount(rng.integers(0, n_max + 1, samples), minlength=n_max + 1)
    for n in range(n_max + 1):
        if per[n] == 0:
            continue
        trees = list(CollisionTree.enumerate(2, n))
        pick = rng.integers(0, len(trees), per[n])
        for idx in np.unique(pick):
            S = int(np.count_nonzero(pick == idx))
            d = rng.uniform(*separation, S)[:, None] * uniform_sphere(rng, (S,))
            rx = np.stack([np.zeros((S, 3)), d], axis=1)
            rv = np.stack([sample_maxwellian(beta, rng, S), sample_maxwellian(beta, rng, S)], axis=1)
            nb = sample_node_batch(n, t, beta, rng, S, proposal_beta=beta)
            fb = free_flow_batch("ebf", trees[idx], rx, rv, nb, eps, t)
            _, external = batch_overlaps(fb, trees[idx], eps, "ebf")
            hits += int(np.count_nonzero(external))
    return hits, samples


def _fraction(hits: int, n: int) -> EstimatorResult:
    p = hits / n
    return EstimatorResult(p, math.sqrt(max(p * (1 - p), 1.0 / n**2) / n), n)


def run_recollision_scan(spec: ExperimentSpec) -> Report:
    """Internal and external overlap fractions along the grid, with log-log slopes."""
    n_max = int(spec.options.get("n_max", 3))
    if not 1 <= n_max <= 3:
        raise ParameterError("recollision scans use tree orders n <= 3")
    n_ext = int(spec.options.get("n_max_external", 1))
    beta = spec.params.beta
    sep = (spec.delta_max, 2 * spec.delta_max)
    rep = Report(spec.name)
    internal, external, raw_int, raw_ext = [], [], [], []
    for e, eps in enumerate(spec.epsilon_grid):
        M = spec.ensemble_sizes[e]
        hi, ni = internal_overlap_fraction(eps, spec.t, beta, n_max, M, make_rng(spec.seed, e, 0))
        he, ne = external_overlap_fraction(eps, spec.t, beta, sep, n_ext, M, make_rng(spec.seed, e, 1))
        fi, fe = _fraction(hi, ni), _fraction(he, ne)
        rep.add_row(eps, internal=fi, external=fe, internal_hits=hi, external_hits=he)
        internal.append(fi)
        external.append(fe)
        raw_int.append(binomial_draw(hi, ni))
        raw_ext.append(binomial_draw(he, ne))
    ok_i, gi = strictly_decreasing(internal)
    ok_e, ge = strictly_decreasing(external)
    rep.verdicts.append(Verdict("recollide.internal_decreasing", ok_i, "gaps (sigma): " + ", ".join(f"{g:.2f}" for g in gi)))
    rep.verdicts.append(Verdict("recollide.external_decreasing", ok_e, "gaps (sigma): " + ", ".join(f"{g:.2f}" for g in ge)))
    si = loglog_slope(spec.epsilon_grid, internal, make_rng(spec.seed, 992), name="internal", draws=raw_int)
    se = loglog_slope(spec.epsilon_grid, external, make_rng(spec.seed, 993), name="external", draws=raw_ext)
    rep.slopes += [si, se]
    lo, hi = spec.options.get("internal_slope_range", (0.5, 1.3))
    ok_s = lo <= si.slope <= hi and si.ci_low <= hi and si.ci_high >= lo
    rep.verdicts.append(Verdict("recollide.internal_slope", ok_s,
                                f"slope {si.slope:.3f}, 95% CI [{si.ci_low:.3f}, {si.ci_high:.3f}] vs [{lo}, {hi}]"))
    return rep


# --------------------------------------------------------------------------- fluctuations


@dataclass(frozen=True)
class StepFunction:
    """Test function equal to ``weights[m]`` on ``cells[m]`` (pairwise disjoint) and 0 elsewhere."""

    cells: tuple[PhaseCell, ...]
    weights: tuple[float, ...]

    def __call__(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = np.zeros(x.shape[:-1])
        for c, w in zip(self.cells, self.weights):
            out = out + w * c.contains(x, v)
        return out


def split_step_function(cell: PhaseCell, weights: Sequence[float], axis: int = 0) -> StepFunction:
    """Step function over equal sub-slabs of ``cell`` along ``axis``."""
    k = len(weights)
    lo, hi = np.array(cell.x_lo), np.array(cell.x_hi)
    subs = []
    for m in range(k):
        a, b = lo.copy(), hi.copy()
        a[axis] = lo[axis] + m * (hi[axis] - lo[axis]) / k
        b[axis] = lo[axis] + (m + 1) * (hi[axis] - lo[axis]) / k
        subs.append(PhaseCell(tuple(a), tuple(b), cell.v_lo, cell.v_hi))
    return StepFunction(tuple(subs), tuple(float(w) for w in weights))


def direct_centered_moment(counts: np.ndarray, phis: Sequence[StepFunction], epsilon: float) -> EstimatorResult:
    """E[prod_i (F_i - E F_i)] from observables F_i = eps^2 sum_particles phi_i (two test functions)."""
    F = _observables(counts, phis, epsilon)
    if F.shape[1] != 2:
        raise ParameterError("the direct estimator is implemented for two observables")
    M = len(F)
    c = F - F.mean(axis=0)
    prod = c[:, 0] * c[:, 1] * M / (M - 1)
    return EstimatorResult.from_samples(prod)


def _observables(counts: np.ndarray, phis: Sequence[StepFunction], epsilon: float) -> np.ndarray:
    cols = []
    pos = 0
    for phi in phis:
        k = len(phi.cells)
        cols.append(epsilon**2 * counts[:, pos:pos + k] @ np.array(phi.weights))
        pos += k
    return np.stack(cols, axis=1)


def table_moment(counts: np.ndarray, phis: Sequence[StepFunction], epsilon: float) -> EstimatorResult:
    """Integral of phi_1 phi_2 against the two-point error table E_2 estimated on the sub-cells.

    For step functions the integral is the weighted sum over sub-cell pairs of
    |a| |b| E_2(a, b); the standard error follows from the delta method on all the
    sub-cell moments jointly.
    """
    if len(phis) != 2:
        raise ParameterError("the table estimator is implemented for two test functions")
    A, B = phis
    ka = len(A.cells)
    cells = list(A.cells) + list(B.cells)
    dens = counts * epsilon**2 / np.array([c.measure for c in cells])
    pairs = [(a, ka + b) for a in range(ka) for b in range(len(B.cells))]
    coef = np.array([A.weights[a] * B.weights[b - ka] * cells[a].measure * cells[b].measure for a, b in pairs])
    X = np.concatenate([dens, np.stack([dens[:, a] * dens[:, b] for a, b in pairs], axis=1)], axis=1)
    nc = len(cells)

    def transform(m: np.ndarray) -> np.ndarray:
        vals = []
        for (a, b), w in zip(pairs, coef):
            E2 = algebra.cumulants_from_correlations(
                algebra.CumulantTable(2, np.array([1.0, m[a], m[b], m[nc + pairs.index((a, b))]]))).values[3]
            vals.append(w * E2)
        return np.array([sum(vals)])

    means = X.mean(axis=0)
    val = float(transform(means)[0])
    se = float(algebra.delta_method_stderr(transform, means, X)[0])
    return EstimatorResult(val, se, len(X))


def run_fluctuation_moments(spec: ExperimentSpec, threads: int = 1, cache_dir: str | None = None) -> Report:
    """Direct centered moments versus integrals of error tables, on independent ensembles."""
    j = int(spec.options.get("j", 2))
    if not 1 <= j <= 2:
        raise ParameterError("fluctuation moments are evaluated for j <= 2")
    weights = tuple(spec.options.get("weights", (1.0, 0.5)))
    base = _scan_cells(spec, max(j, 2))[:j]
    phis = [split_step_function(c, weights) for c in base]
    sub = [c for phi in phis for c in phi.cells]
    rep = Report(spec.name)
    direct_all, table_all = [], []
    for e, eps in enumerate(spec.epsilon_grid):
        M = spec.ensemble_sizes[e]
        g = _gspec(spec, eps)
        NA, _ = ensemble_counts(g, spec.t, sub, M, spec.seed, 2 * e, threads, cache_dir=cache_dir)
        NB, _ = ensemble_counts(g, spec.t, sub, M, spec.seed + 1, 2 * e + 1, threads, cache_dir=cache_dir)
        if j == 1:
            F = _observables(NA, phis, eps)[:, 0]
            d = EstimatorResult.exact(float(np.mean(F - F.mean())))
            tm = EstimatorResult.exact(0.0)
        else:
            d = direct_centered_moment(NA, phis, eps)
            tm = table_moment(NB, phis, eps)
        ok, z = agree(d, tm)
        rep.add_row(eps, direct=d, table=tm, z=z)
        rep.verdicts.append(Verdict("fluct.identity", ok, f"eps={eps}: |direct - table| = {z:.2f} sigma"))
        direct_all.append(d)
        table_all.append(tm)
    if j == 2:
        ok_d, gaps = strictly_decreasing(direct_all)
        rep.notes.append(f"direct moment magnitude decreasing at 2 sigma: {ok_d} (gaps {gaps})")
        rep.slopes.append(loglog_slope(spec.epsilon_grid, direct_all, make_rng(spec.seed, 994), name="moment"))
    return rep


# --------------------------------------------------------------------------- series versus particles


def enskog_boltzmann_gap(cell: PhaseCell, t: float, f0: InitialDensity, n_max: int, samples: int,
                         epsilon: float, seed: int, lambda_mfp: float = 1.0) -> EstimatorResult:
    """Cell average of g^eps - f from paired draws (same roots and node variables for both series)."""
    total = EstimatorResult.exact(0.0)
    for n in range(1, n_max + 1):
        for idx, tree in enumerate(CollisionTree.enumerate(1, n)):
            rng = make_rng(seed, n, idx)
            x, v, w = _cell_root_sampler(cell, f0.beta, rng, samples)
            nb = sample_node_batch(n, t, f0.beta, rng, samples)
            roots = (x[:, None], v[:, None])
            ge = tree_value_samples("ebf", tree, roots, t, f0, rng, samples, epsilon, lambda_mfp, nodes=nb).values
            fb = tree_value_samples("bbf", tree, roots, t, f0, rng, samples, 0.0, lambda_mfp, nodes=nb).values
            total = total + EstimatorResult.from_samples((ge - fb) * w)
    return total


def run_series_vs_particles(spec: ExperimentSpec, threads: int = 1, cache_dir: str | None = None) -> Report:
    """Particle f_1^eps(t) against the Enskog and Boltzmann series on one cell."""
    n_max = int(spec.options.get("n_max", 3))
    samples = int(spec.options.get("series_samples", 20_000))
    lam = spec.params.lambda_mfp
    cell = spec.cells[0] if spec.cells else separated_cells(spec.params.domain, 2, spec.delta_max)[0]
    rep = Report(spec.name)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NonConvergenceWarning)
        f_series = cell_average_series("boltzmann", cell, spec.t, spec.f0, n_max, samples,
                                       make_rng(spec.seed, 900), lambda_mfp=lam, common_seed=spec.seed)
    rep.notes += [str(w.message) for w in caught]
    rep.notes.append(f"Boltzmann per-order ratios: {f_series.ratios}")
    gaps, dev = [], []
    for e, eps in enumerate(spec.epsilon_grid):
        gap = enskog_boltzmann_gap(cell, spec.t, spec.f0, n_max, samples, eps, spec.seed, lam)
        N, _ = ensemble_counts(_gspec(spec, eps), spec.t, [cell], spec.ensemble_sizes[e], spec.seed, e, threads,
                               cache_dir=cache_dir)
        f1 = EstimatorResult.from_samples(N[:, 0] * eps**2 / cell.measure)
        d = f1 - f_series.total
        rep.add_row(eps, f1_particles=f1, boltzmann=f_series.total, enskog_minus_boltzmann=gap,
                    particles_minus_boltzmann=d)
        gaps.append(gap)
        dev.append(d)
    ok_g, gg = strictly_decreasing(gaps)
    sg = loglog_slope(spec.epsilon_grid, gaps, make_rng(spec.seed, 995), name="|g-f|")
    rep.slopes.append(sg)
    rep.verdicts.append(Verdict("kinetic.enskog_boltzmann_decreasing", ok_g,
                                "gaps (sigma): " + ", ".join(f"{g:.2f}" for g in gg)))
    rep.verdicts.append(Verdict("kinetic.enskog_boltzmann_slope", sg.ci_low <= 1 <= sg.ci_high,
                                f"slope {sg.slope:.3f}, 95% CI [{sg.ci_low:.3f}, {sg.ci_high:.3f}] contains 1"))
    ok_p, gp = strictly_decreasing(dev)
    rep.verdicts.append(Verdict("kinetic.particles_boltzmann_decreasing", ok_p,
                                "gaps (sigma): " + ", ".join(f"{g:.2f}" for g in gp)))
    rep.slopes.append(loglog_slope(spec.epsilon_grid, dev, make_rng(spec.seed, 996), name="|f1-f|"))
    return rep


def default_threads() -> int:
    return max(1, os.cpu_count() or 1)
