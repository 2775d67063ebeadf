"""Monte Carlo evaluation of the Boltzmann, Enskog and (small-order) BBGKY tree series.

The value of a tree is the integral over node variables (ordered creation times,
impact directions, created velocities) of the product of signed kernels times the
initial datum evaluated at the time-zero state of the backward flow. Each tree is
estimated by importance sampling (``trees.sample_node_batch``); the free flows are
fully vectorized, the interacting flow is built one draw at a time.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .chaos import PhaseCell
from .core import EstimatorResult, InitialDensity, ParameterError, Torus, make_rng
from .dynamics import SingularEventError
from .trees import (
    CollisionTree,
    NodeBatch,
    _gauss_logpdf,
    build_flow,
    free_flow_batch,
    sample_node_batch,
)

TARGETS = {"boltzmann": "bbf", "enskog": "ebf", "bbgky": "ibf"}
MAX_ORDER = 8


class NonConvergenceWarning(UserWarning):
    """The empirical per-order ratio of the series did not drop below one."""


def _roots_arrays(roots: Any, j: int) -> tuple[np.ndarray, np.ndarray]:
    """Accept (x, v) pairs, a (j, 6) array or a per-draw (S, j, 6) array."""
    if isinstance(roots, tuple) and len(roots) == 2:
        x, v = (np.asarray(a, dtype=float) for a in roots)
    else:
        r = np.asarray(roots, dtype=float)
        x, v = r[..., :3], r[..., 3:]
    if x.shape[-2:] != (j, 3) or v.shape != x.shape:
        raise ParameterError(f"roots must describe {j} particles")
    return x, v


def _datum_product(f0: InitialDensity, x0: np.ndarray, v0: np.ndarray) -> np.ndarray:
    """prod_p f0(x_p, v_p) over the particle axis (-2)."""
    return np.prod(f0(x0, v0), axis=-1)


@dataclass
class TreeSamples:
    """Per-draw integrand values of one tree, with bookkeeping of dropped draws."""

    values: np.ndarray
    invalid: int = 0
    singular: int = 0

    def result(self, seed: int | None = None) -> EstimatorResult:
        return EstimatorResult.from_samples(self.values, seed)

    def abs_result(self, seed: int | None = None) -> EstimatorResult:
        return EstimatorResult.from_samples(np.abs(self.values), seed)


def tree_value_samples(
    kind: str,
    tree: CollisionTree,
    roots: Any,
    t: float,
    f0: InitialDensity,
    rng: np.random.Generator,
    batch: int,
    epsilon: float = 0.0,
    lambda_mfp: float = 1.0,
    proposal_beta: float | None = None,
    nodes: NodeBatch | None = None,
) -> TreeSamples:
    """Draw ``batch`` weighted integrand values whose mean estimates the tree value.

    ``kind`` is a flow kind ('bbf', 'ebf' or 'ibf'). Root states may be fixed or
    given per draw. For the interacting flow the initial datum is the product of
    ``f0`` restricted to non-overlapping time-zero configurations, and draws whose
    creations are forbidden contribute zero.
    """
    if kind not in ("bbf", "ebf", "ibf"):
        raise ParameterError(f"tree values need kind 'bbf', 'ebf' or 'ibf', got {kind!r}")
    if t < 0:
        raise ParameterError("horizon must be nonnegative")
    if kind != "bbf" and not epsilon > 0:
        raise ParameterError("Enskog and BBGKY trees need a positive diameter")
    j, n = tree.j, tree.n
    rx, rv = _roots_arrays(roots, j)
    scale = lambda_mfp ** (-n)
    if n == 0 and (kind != "ibf" or j == 1):
        # free transport of the roots, no node variables
        vals = _datum_product(f0, rx - rv * t, rv).astype(float)
        return TreeSamples(np.broadcast_to(vals, (batch,)).copy() if vals.ndim == 0 else vals)
    if n > 0 and t == 0:
        return TreeSamples(np.zeros(batch))
    nb = nodes if nodes is not None else sample_node_batch(n, t, f0.beta, rng, batch, proposal_beta)
    if kind in ("bbf", "ebf"):
        fb = free_flow_batch(kind, tree, rx, rv, nb, epsilon, t)
        vals = np.exp(nb.logw) * fb.kernel * _datum_product(f0, fb.x0, fb.v0) * scale
        return TreeSamples(vals)
    vals = np.zeros(nb.size)
    invalid = singular = 0
    per_draw = rx.ndim == 3
    for s in range(nb.size):
        nv, w = nb.item(s)
        xs, vs = (rx[s], rv[s]) if per_draw else (rx, rv)
        try:
            tr = build_flow("ibf", tree, nv, xs, vs, epsilon, t, domain=f0.domain,
                            detect_overlaps=False, stop_on_invalid=True)
        except SingularEventError:
            singular += 1
            continue
        if not tr.valid:
            invalid += 1
            continue
        x0, v0 = tr.time_zero()
        if _min_pair_distance(x0, f0.domain) <= epsilon * (1 - 1e-9):
            invalid += 1
            continue
        vals[s] = w * tr.kernel_product * float(np.prod(f0(x0, v0))) * scale
    return TreeSamples(vals, invalid, singular)


def _min_pair_distance(x: np.ndarray, domain: Any) -> np.ndarray:
    d = domain.displacement(x[..., :, None, :], x[..., None, :, :])
    r = np.linalg.norm(d, axis=-1)
    k = x.shape[-2]
    r = r + np.where(np.eye(k, dtype=bool), np.inf, 0.0)
    return r.min(axis=(-1, -2))


def evaluate_tree_value(
    kind: str,
    tree: CollisionTree,
    roots: Any,
    t: float,
    f0: InitialDensity,
    rng: np.random.Generator,
    batch: int,
    epsilon: float = 0.0,
    lambda_mfp: float = 1.0,
    proposal_beta: float | None = None,
) -> EstimatorResult:
    """Signed Monte Carlo estimate of the value of ``tree`` at the root states."""
    return tree_value_samples(kind, tree, roots, t, f0, rng, batch, epsilon, lambda_mfp, proposal_beta).result()


# --------------------------------------------------------------------------- series


@dataclass(frozen=True)
class SeriesQuery:
    """Series target evaluated at root states ``points`` (shape (j, 6)) and time ``t``."""

    target: str
    points: Any
    t: float
    f0: InitialDensity
    n_max: int = 3
    samples: int = 10_000
    epsilon: float = 0.0
    lambda_mfp: float = 1.0
    t_bar: float | None = None
    proposal_beta: float | None = None

    def __post_init__(self) -> None:
        if self.target not in TARGETS:
            raise ParameterError(f"unknown series target {self.target!r}; expected one of {tuple(TARGETS)}")
        if not 0 <= self.n_max <= MAX_ORDER:
            raise ParameterError(f"n_max must lie in [0, {MAX_ORDER}]")
        if self.t < 0:
            raise ParameterError("horizon must be nonnegative")
        if self.t_bar is not None and not self.t < self.t_bar:
            raise ParameterError(f"t={self.t} is not below the configured short-time bound {self.t_bar}")
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 6:
            raise ParameterError("points must have shape (j, 6)")
        object.__setattr__(self, "points", pts)
        if self.target == "bbgky" and (self.j > 2 or self.n_max > 2):
            raise ParameterError("the BBGKY series is evaluated only for j <= 2 and n <= 2")
        if self.target != "boltzmann" and not self.epsilon > 0:
            raise ParameterError("Enskog and BBGKY series need a positive diameter")

    @property
    def j(self) -> int:
        return int(np.asarray(self.points).shape[0])

    @property
    def kind(self) -> str:
        return TARGETS[self.target]


@dataclass
class SeriesEstimate:
    """Per-order signed sums, per-order absolute magnitudes and convergence diagnostics."""

    orders: list[EstimatorResult]
    magnitudes: list[EstimatorResult]
    tree_counts: list[int]
    total: EstimatorResult
    invalid: int = 0
    singular: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def ratios(self) -> list[float]:
        """|order n+1| / |order n| of the absolute magnitudes."""
        m = [r.mean for r in self.magnitudes]
        return [m[k + 1] / m[k] if m[k] > 0 else math.inf for k in range(len(m) - 1)]

    @property
    def tail_ratio(self) -> float:
        r = self.ratios
        return r[-1] if r else 0.0

    @property
    def converged(self) -> bool:
        return self.tail_ratio < 1

    def rows(self) -> list[dict[str, Any]]:
        return [
            {"order": n, "mean": o.mean, "stderr": o.stderr, "abs_mean": m.mean, "abs_stderr": m.stderr,
             "tree_count": c}
            for n, (o, m, c) in enumerate(zip(self.orders, self.magnitudes, self.tree_counts))
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["order", "mean", "stderr", "abs_mean", "abs_stderr", "tree_count"])
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()

    def to_dict(self) -> dict[str, Any]:
        return {"orders": self.rows(), "total": self.total.to_dict(), "tail_ratio": self.tail_ratio,
                "ratios": self.ratios, "invalid": self.invalid, "singular": self.singular,
                "warnings": self.warnings}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), default=float)


def _combine(results: Sequence[EstimatorResult]) -> EstimatorResult:
    if not results:
        return EstimatorResult.exact(0.0)
    return EstimatorResult(
        float(sum(r.mean for r in results)),
        float(math.sqrt(sum(r.stderr**2 for r in results))),
        int(min(r.n_samples for r in results)),
    )


def _sum_orders(per_order: list[list[TreeSamples]], counts: list[int]) -> SeriesEstimate:
    orders = [_combine([s.result() for s in row]) for row in per_order]
    mags = [_combine([s.abs_result() for s in row]) for row in per_order]
    est = SeriesEstimate(orders, mags, counts, _combine(orders),
                         sum(s.invalid for row in per_order for s in row),
                         sum(s.singular for row in per_order for s in row))
    if len(orders) > 1 and not est.converged:
        msg = f"series tail ratio {est.tail_ratio:.3g} >= 1 at n_max={len(orders) - 1}"
        est.warnings.append(msg)
        warnings.warn(msg, NonConvergenceWarning, stacklevel=3)
    return est


def evaluate_series(query: SeriesQuery, rng: np.random.Generator) -> SeriesEstimate:
    """Sum the tree values of every tree with at most ``n_max`` creations."""
    j = query.j
    roots = (query.points[:, :3], query.points[:, 3:])
    per_order: list[list[TreeSamples]] = []
    counts = []
    for n in range(query.n_max + 1):
        row = [
            tree_value_samples(query.kind, tree, roots, query.t, query.f0, rng, query.samples,
                               query.epsilon, query.lambda_mfp, query.proposal_beta)
            for tree in CollisionTree.enumerate(j, n)
        ]
        if len(row) != CollisionTree.count(j, n):
            raise AssertionError("tree enumeration does not match the tree count")
        per_order.append(row)
        counts.append(len(row))
    return _sum_orders(per_order, counts)


def _cell_root_sampler(cell: PhaseCell, beta: float, rng: np.random.Generator, size: int
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Root states in ``cell`` with weights turning draw averages into cell averages.

    Positions are uniform on the position box; velocities are Gaussian at inverse
    temperature beta/2 restricted to the velocity box through the weight.
    """
    lo, hi = np.array(cell.x_lo), np.array(cell.x_hi)
    x = lo + rng.random((size, 3)) * (hi - lo)
    qb = beta / 2
    v = rng.normal(scale=1 / math.sqrt(qb), size=(size, 3))
    inside = np.all((v >= cell.v_lo) & (v < cell.v_hi), axis=-1)
    w = float(np.prod(hi - lo)) / cell.measure * np.exp(-_gauss_logpdf(v, qb)) * inside
    return x, v, w


def cell_average_series(
    target: str,
    cell: PhaseCell,
    t: float,
    f0: InitialDensity,
    n_max: int,
    samples: int,
    rng: np.random.Generator,
    epsilon: float = 0.0,
    lambda_mfp: float = 1.0,
    common_seed: int | None = None,
) -> SeriesEstimate:
    """One-particle series averaged over a phase cell (same normalization as ``estimate_rcf``).

    With ``common_seed`` the random numbers of each tree depend only on that seed and
    the tree, so calls with different targets or diameters share root and node draws.
    """
    if target not in TARGETS:
        raise ParameterError(f"unknown series target {target!r}")
    kind = TARGETS[target]
    per_order: list[list[TreeSamples]] = []
    counts = []
    for n in range(n_max + 1):
        row = []
        for idx, tree in enumerate(CollisionTree.enumerate(1, n)):
            r = rng if common_seed is None else make_rng(common_seed, n, idx)
            x, v, w = _cell_root_sampler(cell, f0.beta, r, samples)
            ts = tree_value_samples(kind, tree, (x[:, None], v[:, None]), t, f0, r, samples, epsilon, lambda_mfp)
            ts.values = ts.values * w
            row.append(ts)
        per_order.append(row)
        counts.append(len(row))
    return _sum_orders(per_order, counts)


def factorization_check(
    target: str,
    trees: tuple[CollisionTree, CollisionTree],
    points: Any,
    t: float,
    f0: InitialDensity,
    rng: np.random.Generator,
    samples: int,
    epsilon: float = 0.0,
) -> tuple[EstimatorResult, EstimatorResult]:
    """Joint two-root estimate summed over interleavings versus the product of one-root estimates.

    For a factorized initial datum the free-flow series factorizes: the sum of the
    values of all two-root trees whose per-root trees are ``trees`` equals the product
    of the two single-root values. Returns (joint, product).
    """
    if target not in ("boltzmann", "enskog"):
        raise ParameterError("factorization holds for the free-flow series only")
    kind = TARGETS[target]
    t1, t2 = trees
    if t1.j != 1 or t2.j != 1:
        raise ParameterError("factorization check needs two single-root trees")
    pts = np.asarray(points, dtype=float).reshape(2, 6)
    n = t1.n + t2.n
    joint = []
    for tree in CollisionTree.enumerate(2, n):
        if tree.subtree(0)[0].k == t1.k and tree.subtree(1)[0].k == t2.k:
            joint.append(tree_value_samples(kind, tree, (pts[:, :3], pts[:, 3:]), t, f0, rng, samples,
                                            epsilon).result())
    a = tree_value_samples(kind, t1, (pts[:1, :3], pts[:1, 3:]), t, f0, rng, samples, epsilon).result()
    b = tree_value_samples(kind, t2, (pts[1:, :3], pts[1:, 3:]), t, f0, rng, samples, epsilon).result()
    prod = EstimatorResult(a.mean * b.mean, math.hypot(a.mean * b.stderr, b.mean * a.stderr), min(a.n_samples, b.n_samples))
    return _combine(joint), prod


def reference_density(z: float = 1.0, beta: float = 1.0) -> InitialDensity:
    """Uniform Maxwellian on a cubic torus sized so that sup h equals z."""
    volume = 2 * (beta / (2 * math.pi)) ** 1.5 / z
    return InitialDensity("uniform", {}, beta, Torus(volume ** (1 / 3)))


def calibrate_tbar(
    candidates: Sequence[float],
    rng: np.random.Generator,
    n_max: int = 4,
    samples: int = 4000,
    z: float = 1.0,
    beta: float = 1.0,
    threshold: float = 0.5,
) -> tuple[float, list[tuple[float, float]]]:
    """Largest candidate t whose Boltzmann tail ratio stays below ``threshold``.

    Evaluated for one root at rest in the reference state (uniform Maxwellian with
    amplitude z). Returns the calibrated value and the (t, ratio) table.
    """
    f0 = reference_density(z, beta)
    point = np.concatenate([0.5 * f0.domain.sides, np.zeros(3)])[None]
    table = []
    best = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        for t in sorted(candidates):
            est = evaluate_series(SeriesQuery("boltzmann", point, t, f0, n_max, samples), rng)
            table.append((float(t), est.tail_ratio))
            if est.tail_ratio < threshold:
                best = float(t)
    return best, table


def estimate_enskog_error_E1(
    epsilon: float,
    t: float,
    f0: InitialDensity,
    particle_counts: np.ndarray,
    cell: PhaseCell,
    rng: np.random.Generator,
    n_max: int = 3,
    samples: int = 10_000,
    lambda_mfp: float = 1.0,
    series_target: str = "enskog",
) -> EstimatorResult:
    """Cell-averaged f_1^eps(t) from particle counts minus the series value.

    ``particle_counts`` holds the number of particles in ``cell`` for each
    configuration of an ensemble evolved to time t.
    """
    counts = np.asarray(particle_counts, dtype=float)
    f1 = EstimatorResult.from_samples(counts * epsilon**2 / cell.measure)
    series = cell_average_series(series_target, cell, t, f0, n_max, samples, rng, epsilon, lambda_mfp)
    return f1 - series.total
