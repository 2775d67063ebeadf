"""Finite-set algebra of correlation functions, cumulants and graph expansions.

Subsets of a label set {0, ..., j-1} are bitmasks; a table is a numpy array whose
first axis is indexed by mask (length 2**j), so values may be scalars or arrays of
point evaluations sharing trailing dimensions.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from .core import ParameterError

KINDS = ("correlation_f", "error_E", "singleton_product", "truncated")


def popcount(mask: int) -> int:
    return bin(mask).count("1")


def bits(mask: int) -> list[int]:
    return [i for i in range(mask.bit_length()) if mask >> i & 1]


def submasks(mask: int) -> Iterator[int]:
    """All submasks of ``mask`` including 0 and ``mask`` itself."""
    s = mask
    while True:
        yield s
        if s == 0:
            return
        s = (s - 1) & mask


def mask_of(labels: Sequence[int]) -> int:
    m = 0
    for i in labels:
        m |= 1 << int(i)
    return m


class IncompleteTableError(ParameterError):
    """A table lacks a value required by the requested transform."""


@dataclass
class CumulantTable:
    """Values indexed by every subset of {0..j-1}; ``values[mask]``."""

    j: int
    values: np.ndarray
    kind: str = "correlation_f"
    stderr: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ParameterError(f"unknown table kind {self.kind!r}")
        if self.j > 16:
            raise ParameterError("at most 16 labels are supported")
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[0] != 1 << self.j:
            raise IncompleteTableError(f"table needs {1 << self.j} subset values, got {self.values.shape[0]}")
        if np.any(np.isnan(self.values)):
            raise IncompleteTableError("table has missing (NaN) subset values")

    @classmethod
    def from_dict(cls, j: int, d: dict[Any, Any], kind: str = "correlation_f") -> CumulantTable:
        """Build from a mapping subset -> value (subset as mask, or iterable of labels)."""
        vals: list[Any] = [None] * (1 << j)
        for key, val in d.items():
            m = int(key) if isinstance(key, (int, np.integer, str)) else mask_of(key)
            vals[m] = val
        if kind in ("correlation_f", "singleton_product") and vals[0] is None:
            vals[0] = 1.0
        missing = [m for m, val in enumerate(vals) if val is None]
        if missing:
            raise IncompleteTableError(f"missing subset values for masks {missing}")
        return cls(j, np.asarray(vals, dtype=float), kind)

    def __getitem__(self, subset: int | Sequence[int]) -> Any:
        m = subset if isinstance(subset, (int, np.integer)) else mask_of(subset)
        return self.values[m]

    @property
    def full(self) -> int:
        return (1 << self.j) - 1

    def singletons(self) -> np.ndarray:
        return np.stack([self.values[1 << i] for i in range(self.j)])

    def to_json(self) -> str:
        out = {"j": self.j, "kind": self.kind, "values": {str(m): np.asarray(v).tolist() for m, v in enumerate(self.values)}}
        if self.stderr is not None:
            out["stderr"] = {str(m): np.asarray(v).tolist() for m, v in enumerate(self.stderr)}
        return json.dumps(out)

    @classmethod
    def from_json(cls, text: str) -> CumulantTable:
        d = json.loads(text)
        j = int(d["j"])
        vals = np.asarray([d["values"][str(m)] for m in range(1 << j)], dtype=float)
        err = None
        if "stderr" in d:
            err = np.asarray([d["stderr"][str(m)] for m in range(1 << j)], dtype=float)
        return cls(j, vals, d["kind"], err)


def _product_table(j: int, singles: np.ndarray) -> np.ndarray:
    """P[mask] = prod_{i in mask} singles[i], P[0] = 1."""
    singles = np.asarray(singles, dtype=float)
    out = np.empty((1 << j,) + singles.shape[1:])
    out[0] = 1.0
    for m in range(1, 1 << j):
        low = m & -m
        out[m] = out[m ^ low] * singles[low.bit_length() - 1]
    return out


def singleton_product_table(singles: Sequence[float] | np.ndarray) -> CumulantTable:
    singles = np.asarray(singles, dtype=float)
    return CumulantTable(len(singles), _product_table(len(singles), singles), "singleton_product")


def cumulants_from_correlations(f: CumulantTable, g: np.ndarray | None = None) -> CumulantTable:
    """E_S = sum_{K subset S} (-1)^|K| g^{(x)K} f_{S\\K}, with g = f1 unless given.

    With g = f1 the singletons vanish; passing an external one-particle function
    (Enskog or Boltzmann solution) gives the corresponding error table.
    """
    if f.kind != "correlation_f":
        raise ParameterError("expected a correlation table")
    j = f.j
    singles = f.singletons() if g is None else np.asarray(g, dtype=float)
    P = _product_table(j, singles)
    E = np.zeros_like(f.values)
    for S in range(1 << j):
        acc = np.zeros_like(f.values[0])
        for K in submasks(S):
            sign = -1.0 if popcount(K) & 1 else 1.0
            acc = acc + sign * P[K] * f.values[S ^ K]
        E[S] = acc
    return CumulantTable(j, E, "error_E")


def correlations_from_cumulants(E: CumulantTable, f1: np.ndarray) -> CumulantTable:
    """f_S = sum_{K subset S} f1^{(x)K} E_{S\\K}."""
    if E.kind != "error_E":
        raise ParameterError("expected an error table")
    j = E.j
    P = _product_table(j, np.asarray(f1, dtype=float))
    F = np.zeros_like(E.values)
    for S in range(1 << j):
        acc = np.zeros_like(E.values[0])
        for K in submasks(S):
            acc = acc + P[K] * E.values[S ^ K]
        F[S] = acc
    return CumulantTable(j, F, "correlation_f")


def truncated_from_correlations(f: CumulantTable) -> CumulantTable:
    """Connected parts: f_S = sum over set partitions of S of prod f^T_block.

    Solved recursively on the block containing the lowest label of S.
    """
    if f.kind != "correlation_f":
        raise ParameterError("expected a correlation table")
    j = f.j
    T = np.zeros_like(f.values)
    for S in range(1, 1 << j):
        low = S & -S
        rest = S ^ low
        acc = np.array(f.values[S], dtype=float)
        for B in submasks(rest):
            block = B | low
            if block == S:
                continue
            acc = acc - T[block] * f.values[S ^ block]
        T[S] = acc
    return CumulantTable(j, T, "truncated")


def error_from_truncated(fT: CumulantTable) -> CumulantTable:
    """E_S = sum over partitions of S into blocks of size >= 2 of prod f^T_block."""
    if fT.kind != "truncated":
        raise ParameterError("expected a truncated table")
    j = fT.j
    E = np.zeros_like(fT.values)
    E[0] = 1.0
    for S in range(1, 1 << j):
        low = S & -S
        rest = S ^ low
        acc = np.zeros_like(fT.values[0])
        for B in submasks(rest):
            if B == 0:
                continue
            block = B | low
            acc = acc + fT.values[block] * E[S ^ block]
        E[S] = acc
    return CumulantTable(j, E, "error_E")


def centered_subset_identity(f: CumulantTable, S: int) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of sum_{L subset S} (-1)^l f1^L f_{K\\L} = sum_{L subset K\\S} f1^L E_{K\\L}."""
    j = f.j
    K = f.full
    if S & ~K:
        raise ParameterError("S must be a subset of the label set")
    P = _product_table(j, f.singletons())
    E = cumulants_from_correlations(f).values
    lhs = sum((-1.0 if popcount(L) & 1 else 1.0) * P[L] * f.values[K ^ L] for L in submasks(S))
    rhs = sum(P[L] * E[K ^ L] for L in submasks(K ^ S))
    return np.asarray(lhs), np.asarray(rhs)


# --------------------------------------------------------------------------- graphs


@dataclass(frozen=True)
class Graph:
    """Undirected graph on vertices 0..n-1 stored as neighbour bitmasks."""

    n: int
    adjacency: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        adj = tuple(self.adjacency) if self.adjacency else (0,) * self.n
        if len(adj) != self.n:
            raise ParameterError("adjacency must list one mask per vertex")
        for i, a in enumerate(adj):
            if a >> i & 1:
                raise ParameterError("a vertex cannot be connected to itself")
            for k in bits(a):
                if k >= self.n or not adj[k] >> i & 1:
                    raise ParameterError("adjacency must be symmetric")
        object.__setattr__(self, "adjacency", adj)

    @classmethod
    def from_edges(cls, n: int, edges: Sequence[tuple[int, int]]) -> Graph:
        adj = [0] * n
        for a, b in edges:
            a, b = int(a), int(b)
            if a == b:
                raise ParameterError("a vertex cannot be connected to itself")
            adj[a] |= 1 << b
            adj[b] |= 1 << a
        return cls(n, tuple(adj))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Graph:
        m = np.asarray(m, dtype=bool)
        return cls.from_edges(len(m), [(a, b) for a in range(len(m)) for b in range(a + 1, len(m)) if m[a, b]])

    @property
    def vertices(self) -> int:
        return (1 << self.n) - 1

    def chi(self, H: int, K: int) -> int:
        """1 iff every vertex of H is joined to some vertex of K (empty H gives 1)."""
        for i in bits(H):
            if not self.adjacency[i] & K:
                return 0
        return 1

    def chibar(self, H: int, K: int) -> int:
        """prod_{i in H} (1 - chi_{i,K})."""
        for i in bits(H):
            if self.adjacency[i] & K:
                return 0
        return 1


def all_graphs(n: int) -> Iterator[Graph]:
    pairs = list(itertools.combinations(range(n), 2))
    for choice in range(1 << len(pairs)):
        yield Graph.from_edges(n, [p for k, p in enumerate(pairs) if choice >> k & 1])


def graph_expansion_R(Q: int, L0: int, graph: Graph) -> int:
    """Sum over ordered partitions (L1..Lr) of Q of (-1)^r prod_m chi_{Lm, L0 u L1 u .. u Lm}."""
    if Q & L0:
        raise ParameterError("Q and L0 must be disjoint")
    if (Q | L0) & ~graph.vertices:
        raise ParameterError("subsets must lie in the vertex set")
    return _expansion(graph.adjacency, Q, L0)


@lru_cache(maxsize=1 << 20)
def _expansion(adj: tuple[int, ...], rem: int, acc: int) -> int:
    if rem == 0:
        return 1
    total = 0
    for A in submasks(rem):
        if A == 0:
            continue
        union = acc | A
        ok = True
        for i in bits(A):
            if not adj[i] & union:
                ok = False
                break
        if ok:
            total -= _expansion(adj, rem ^ A, union)
    return total


# --------------------------------------------------------------------------- fluctuations


def fluctuation_moment_identity(
    E: CumulantTable, volumes: Sequence[float] | None = None, weights: Sequence[float] | None = None
) -> float:
    """Centered moment of observables phi_i = w_i 1_{Delta_i} with disjoint cells.

    ``E`` holds cell-averaged error values over Delta_0 x ... x Delta_{j-1}; the result
    is integral prod phi_i E_j = prod_i (w_i |Delta_i|) * E_J.
    """
    if E.kind != "error_E":
        raise ParameterError("expected an error table")
    j = E.j
    vol = np.ones(j) if volumes is None else np.asarray(volumes, dtype=float)
    w = np.ones(j) if weights is None else np.asarray(weights, dtype=float)
    if j == 1:
        return 0.0
    return float(np.prod(w * vol) * E.values[E.full])


def set_partitions(items: Sequence[int]) -> Iterator[list[list[int]]]:
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        yield [[first]] + part
        for k in range(len(part)):
            yield part[:k] + [[first] + part[k]] + part[k + 1 :]


def moment_from_correlations(
    phis: np.ndarray, f_tables: dict[int, np.ndarray], epsilon: float, cell_volumes: np.ndarray
) -> float:
    """E[prod_i F_i] for F_i = eps^2 sum_particles phi_i, on a discretized phase space.

    ``phis`` has shape (k, C): values of each observable on C cells. ``f_tables[m]``
    holds the cell-averaged m-particle correlation function, shape (C,)*m. Contracted
    labels (same particle in several F_i) are summed over set partitions of the labels.
    """
    k = phis.shape[0]
    if k > 4:
        raise ParameterError("contraction algebra is implemented for at most four observables")
    total = 0.0
    for part in set_partitions(range(k)):
        m = len(part)
        Phi = [np.prod(phis[block], axis=0) * cell_volumes for block in part]
        t = f_tables[m]
        for q in range(m):
            t = np.tensordot(Phi[q], t, axes=([0], [0]))
        total += epsilon ** (2 * k - 2 * m) * float(t)
    return total


def centered_moment_from_correlations(
    phis: np.ndarray, f_tables: dict[int, np.ndarray], epsilon: float, cell_volumes: np.ndarray
) -> float:
    """E[prod_i (F_i - E F_i)] by expanding the product over subsets."""
    k = phis.shape[0]
    means = [moment_from_correlations(phis[[i]], f_tables, epsilon, cell_volumes) for i in range(k)]
    total = 0.0
    for L in range(1 << k):
        keep = [i for i in range(k) if not L >> i & 1]
        coeff = (-1.0) ** popcount(L) * math.prod(means[i] for i in bits(L))
        rest = moment_from_correlations(phis[keep], f_tables, epsilon, cell_volumes) if keep else 1.0
        total += coeff * rest
    return total


def centered_moment_from_cumulants(
    phis: np.ndarray, f_tables: dict[int, np.ndarray], epsilon: float, cell_volumes: np.ndarray
) -> float:
    """Same centered moment regrouped through error functions.

    For each set partition of the labels (blocks contracted to one particle), the
    uncentered singleton blocks are absorbed using
    sum_{L in S} (-1)^l f1^L f_{K-L} = sum_{L in K-S} f1^L E_{K-L},
    so every term is an error function integrated against block products.
    """
    k = phis.shape[0]
    if k > 4:
        raise ParameterError("contraction algebra is implemented for at most four observables")
    f1 = f_tables[1]

    def integrate_f(Phi: list[np.ndarray]) -> float:
        if not Phi:
            return 1.0
        t = f_tables[len(Phi)]
        for ph in Phi:
            t = np.tensordot(ph, t, axes=([0], [0]))
        return float(t)

    def integrate_E(Phi: list[np.ndarray]) -> float:
        r = len(Phi)
        val = 0.0
        for K in range(1 << r):
            single = math.prod(float(Phi[q] @ f1) for q in bits(K))
            val += (-1.0) ** popcount(K) * single * integrate_f([Phi[q] for q in range(r) if not K >> q & 1])
        return val

    total = 0.0
    for part in set_partitions(range(k)):
        m = len(part)
        Phi = [np.prod(phis[block], axis=0) * cell_volumes for block in part]
        nonsingle = [q for q, b in enumerate(part) if len(b) > 1]
        acc = 0.0
        for L in range(1 << len(nonsingle)):
            chosen = {nonsingle[a] for a in bits(L)}
            single = math.prod(float(Phi[q] @ f1) for q in chosen)
            acc += single * integrate_E([Phi[q] for q in range(m) if q not in chosen])
        total += epsilon ** (2 * k - 2 * m) * acc
    return total


def random_table(j: int, rng: np.random.Generator, kind: str = "correlation_f") -> CumulantTable:
    vals = rng.normal(size=1 << j)
    if kind in ("correlation_f", "singleton_product"):
        vals[0] = 1.0
    return CumulantTable(j, vals, kind)


def delta_method_stderr(
    transform: Callable[[np.ndarray], np.ndarray], means: np.ndarray, samples: np.ndarray
) -> np.ndarray:
    """First-order error propagation through a multilinear transform.

    ``samples`` has shape (M, p) of per-configuration values whose means are ``means``;
    the transform maps a length-p vector to outputs. Central differences are exact for
    multilinear maps.
    """
    M, p = samples.shape
    base = np.asarray(transform(means), dtype=float)
    grads = np.empty((p,) + base.shape)
    scale = np.maximum(np.abs(means), 1e-300)
    for a in range(p):
        h = 1e-3 * scale[a]
        up = means.copy()
        dn = means.copy()
        up[a] += h
        dn[a] -= h
        grads[a] = (np.asarray(transform(up)) - np.asarray(transform(dn))) / (2 * h)
    centered = samples - means
    infl = np.tensordot(centered, grads, axes=([1], [0]))  # (M, ...)
    return np.sqrt(np.sum(infl**2, axis=0) / (M - 1) / M)
