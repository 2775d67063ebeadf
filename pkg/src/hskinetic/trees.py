"""Collision trees, node-variable sampling and the backward flows attached to them.

Labels are 0-based: roots are 0..j-1 and node r (r = 0..n-1) creates particle j+r at
time t_r with progenitor k_r in {0, ..., j+r-1}. Times decrease along the nodes,
t > t_0 > t_1 > ... > t_{n-1} > 0, and flows are built backwards from time t to 0.

Flow kinds
  ibf           all existing particles interact (hard-sphere dynamics)
  uncorrelated  particles interact only within their own root's tree
  mixed         trees listed in ``L0`` interact as one group; other trees are uncorrelated
  ebf           free motion, children created at distance epsilon from the progenitor
  bbf           free motion, children created at the progenitor's position
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

import numpy as np

from .algebra import Graph, mask_of
from .core import FreeSpace, ParameterError, Torus
from .dynamics import _collide, evolve_positions

KINDS = ("ibf", "uncorrelated", "mixed", "ebf", "bbf")
OVERLAP_RTOL = 1e-9


# --------------------------------------------------------------------------- trees


@dataclass(frozen=True)
class CollisionTree:
    j: int
    k: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "k", tuple(int(a) for a in self.k))
        if self.j < 1:
            raise ParameterError("a tree needs at least one root")
        for r, kr in enumerate(self.k):
            if not 0 <= kr < self.j + r:
                raise ParameterError(f"progenitor k_{r}={kr} outside 0..{self.j + r - 1}")

    @property
    def n(self) -> int:
        return len(self.k)

    @property
    def size(self) -> int:
        return self.j + self.n

    @staticmethod
    def count(j: int, n: int) -> int:
        return math.prod(j + r for r in range(n))

    @classmethod
    def enumerate(cls, j: int, n: int) -> Iterator[CollisionTree]:
        for ks in itertools.product(*[range(j + r) for r in range(n)]):
            yield cls(j, ks)

    @classmethod
    def random(cls, j: int, n: int, rng: np.random.Generator) -> CollisionTree:
        return cls(j, tuple(int(rng.integers(0, j + r)) for r in range(n)))

    def progenitor(self, p: int) -> int | None:
        return None if p < self.j else self.k[p - self.j]

    def root_of(self, p: int) -> int:
        while p >= self.j:
            p = self.k[p - self.j]
        return p

    def roots(self) -> np.ndarray:
        """Root label of every particle."""
        out = np.arange(self.size)
        for r, kr in enumerate(self.k):
            out[self.j + r] = out[kr]
        return out

    def particles_of(self, i: int) -> list[int]:
        """The set S(i) of particles belonging to the tree of root i."""
        return [p for p, r in enumerate(self.roots()) if r == i]

    def nodes_of(self, i: int) -> list[int]:
        roots = self.roots()
        return [r for r in range(self.n) if roots[self.j + r] == i]

    def subtree(self, i: int) -> tuple[CollisionTree, list[int]]:
        """Single-root tree of root i, relabeled, with the global node indices it uses."""
        nodes = self.nodes_of(i)
        local = {i: 0}
        ks = []
        for m, r in enumerate(nodes):
            ks.append(local[self.k[r]])
            local[self.j + r] = m + 1
        return CollisionTree(1, tuple(ks)), nodes

    def decompose(self) -> list[tuple[int, ...]]:
        """Per-root progenitor sequences (global labels), one per root."""
        return [tuple(self.k[r] for r in self.nodes_of(i)) for i in range(self.j)]

    def path_nodes(self, p: int) -> list[int]:
        """Nodes met walking forward in time from the time-zero end of line p to its root.

        Includes the creation nodes of the lines traversed and the nodes where a
        traversed line creates another particle later than the point of entry.
        """
        out = []
        entry = -1  # node index at which we entered the current line (-1: from time zero)
        line = p
        while True:
            # nodes on this line (line is the progenitor), later than our entry point
            for r in range(self.n):
                if self.k[r] == line and (entry < 0 or r < entry):
                    out.append(r)
            if line < self.j:
                break
            entry = line - self.j
            out.append(entry)
            line = self.k[entry]
        return sorted(set(out))

    def to_dict(self) -> dict[str, Any]:
        return {"j": self.j, "k": list(self.k)}


@dataclass(frozen=True)
class NodeVariables:
    times: np.ndarray  # (n,), strictly decreasing
    omegas: np.ndarray  # (n, 3)
    velocities: np.ndarray  # (n, 3)

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=float).reshape(-1)
        w = np.asarray(self.omegas, dtype=float).reshape(-1, 3)
        v = np.asarray(self.velocities, dtype=float).reshape(-1, 3)
        if not (len(t) == len(w) == len(v)):
            raise ParameterError("node arrays have inconsistent lengths")
        if np.any(np.diff(t) >= 0):
            raise ParameterError("node times must be strictly decreasing")
        if len(w) and np.max(np.abs(np.linalg.norm(w, axis=1) - 1.0)) > 1e-12:
            raise ParameterError("omegas must be unit vectors")
        for name, arr in (("times", t), ("omegas", w), ("velocities", v)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return len(self.times)

    def to_dict(self) -> dict[str, Any]:
        return {"times": self.times.tolist(), "omegas": self.omegas.tolist(), "velocities": self.velocities.tolist()}


def uniform_sphere(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    w = rng.normal(size=shape + (3,))
    return w / np.linalg.norm(w, axis=-1, keepdims=True)


def _gauss_logpdf(v: np.ndarray, beta: float) -> np.ndarray:
    return 1.5 * math.log(beta / (2 * math.pi)) - 0.5 * beta * np.sum(v * v, axis=-1)


@dataclass
class NodeBatch:
    """S independent draws of node variables for an n-node tree, with log importance weights.

    ``exp(logw)`` times an integrand, averaged, estimates the integral of that
    integrand against dLambda (ordered times, uniform omegas, Lebesgue velocities).
    """

    times: np.ndarray  # (S, n)
    omegas: np.ndarray  # (S, n, 3)
    velocities: np.ndarray  # (S, n, 3)
    logw: np.ndarray  # (S,)

    @property
    def size(self) -> int:
        return len(self.logw)

    def item(self, s: int) -> tuple[NodeVariables, float]:
        return NodeVariables(self.times[s], self.omegas[s], self.velocities[s]), float(np.exp(self.logw[s]))


def sample_node_batch(n: int, t: float, beta: float, rng: np.random.Generator, size: int,
                      proposal_beta: float | None = None) -> NodeBatch:
    """Times sorted uniform on the simplex, omegas uniform, velocities Gaussian.

    The velocity proposal defaults to inverse temperature beta/2 (heavier tails than
    the integrand) which bounds the importance ratios of the kernel-weighted terms.
    """
    if t <= 0:
        raise ParameterError("horizon must be positive")
    pb = beta / 2 if proposal_beta is None else proposal_beta
    times = -np.sort(-rng.uniform(0.0, t, size=(size, n)), axis=1)
    omegas = uniform_sphere(rng, (size, n))
    vel = rng.normal(scale=1.0 / math.sqrt(pb), size=(size, n, 3))
    logw = n * math.log(t) - math.lgamma(n + 1) + n * math.log(4 * math.pi)
    logw = logw - _gauss_logpdf(vel, pb).sum(axis=1) if n else np.full(size, logw)
    return NodeBatch(times, omegas, vel, np.asarray(logw, dtype=float))


def sample_node_variables(tree: CollisionTree, t: float, beta: float, rng: np.random.Generator,
                          proposal_beta: float | None = None) -> tuple[NodeVariables, float]:
    """One draw of node variables and its importance weight against dLambda."""
    return sample_node_batch(tree.n, t, beta, rng, 1, proposal_beta).item(0)


# --------------------------------------------------------------------------- flows


@dataclass(frozen=True)
class Segment:
    """Free motion on [s_lo, s_hi]: x(s) = x_hi - v (s_hi - s)."""

    s_lo: float
    s_hi: float
    x_hi: np.ndarray
    v: np.ndarray

    def position(self, s: float) -> np.ndarray:
        return self.x_hi - self.v * (self.s_hi - s)

    def to_dict(self) -> dict[str, Any]:
        return {"s_lo": self.s_lo, "s_hi": self.s_hi, "x_hi": self.x_hi.tolist(), "v": self.v.tolist()}


@dataclass(frozen=True)
class Creation:
    node: int
    time: float
    parent: int
    child: int
    omega: np.ndarray
    outgoing: bool
    kernel: float
    position: np.ndarray
    parent_velocity_after: np.ndarray  # the progenitor's velocity just after t_r (limit from the future)

    def to_dict(self) -> dict[str, Any]:
        return {"node": self.node, "time": self.time, "parent": self.parent, "child": self.child,
                "omega": self.omega.tolist(), "outgoing": self.outgoing, "kernel": self.kernel,
                "position": self.position.tolist()}


@dataclass(frozen=True)
class Interaction:
    """A recollision (interacting pair at contact) or overlap (free pair closer than epsilon)."""

    time: float
    pair: tuple[int, int]
    kind: str  # "recollision" | "overlap"
    internal: bool

    def to_dict(self) -> dict[str, Any]:
        return {"time": self.time, "pair": list(self.pair), "kind": self.kind, "internal": self.internal}


@dataclass
class FlowTrace:
    kind: str
    tree: CollisionTree
    nodes: NodeVariables
    epsilon: float
    horizon: float
    groups: list[list[int]]
    segments: list[list[Segment]]  # per particle, ordered by decreasing time
    creations: list[Creation] = field(default_factory=list)
    recollisions: list[Interaction] = field(default_factory=list)
    overlaps: list[Interaction] = field(default_factory=list)
    valid: bool = True
    naive_valid: bool = True
    L0: tuple[int, ...] = ()
    domain: Any = field(default_factory=FreeSpace)

    @property
    def indicator_mismatch(self) -> bool:
        """The kind's creation indicator disagrees with the all-particle exclusion reading."""
        return self.valid != self.naive_valid

    @property
    def kernel_product(self) -> float:
        return math.prod(c.kernel for c in self.creations)

    def creation_time(self, p: int) -> float:
        return self.horizon if p < self.tree.j else float(self.nodes.times[p - self.tree.j])

    def state(self, p: int, s: float) -> tuple[np.ndarray, np.ndarray]:
        """Position and velocity of particle p at time s (right-continuous in backward time)."""
        for seg in self.segments[p]:
            if seg.s_lo <= s <= seg.s_hi:
                return seg.position(s), seg.v
        raise ParameterError(f"particle {p} does not exist at time {s}")

    def time_zero(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.array([self.segments[p][-1].position(0.0) for p in range(self.tree.size)])
        v = np.array([self.segments[p][-1].v for p in range(self.tree.size)])
        return x, v

    def energy(self, s: float) -> float:
        return float(sum(np.dot(self.state(p, s)[1], self.state(p, s)[1])
                         for p in range(self.tree.size) if self.creation_time(p) > s or p < self.tree.j))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind, "tree": self.tree.to_dict(), "nodes": self.nodes.to_dict(),
            "epsilon": self.epsilon, "horizon": self.horizon, "groups": self.groups, "L0": list(self.L0),
            "valid": self.valid, "naive_valid": self.naive_valid,
            "segments": [[s.to_dict() for s in segs] for segs in self.segments],
            "creations": [c.to_dict() for c in self.creations],
            "recollisions": [r.to_dict() for r in self.recollisions],
            "overlaps": [o.to_dict() for o in self.overlaps],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _group_map(kind: str, tree: CollisionTree, L0: Sequence[int]) -> np.ndarray:
    """Interaction group id of every particle (equal id: they interact)."""
    roots = tree.roots()
    if kind == "ibf":
        return np.zeros(tree.size, dtype=int)
    if kind == "uncorrelated":
        return roots.copy()
    if kind == "mixed":
        L0s = set(L0)
        return np.array([-1 if r in L0s else r for r in roots])
    return np.arange(tree.size)  # free flows: nobody interacts


def _creation_allowed(kind: str, child_root: int, roots: np.ndarray, alive: list[int], parent: int,
                      dists: np.ndarray, eps: float, L0: set[int]) -> bool:
    """Creation indicator of the given kind; ``dists`` are distances child->alive."""
    close = [p for p, d in zip(alive, dists) if p != parent and d <= eps * (1 - OVERLAP_RTOL)]
    if kind == "ibf":
        return not close
    if kind == "uncorrelated":
        return not any(roots[p] == child_root for p in close)
    if kind == "mixed":
        if child_root in L0:
            return not any(roots[p] in L0 for p in close)
        return not any(roots[p] == child_root for p in close)
    return True


def _displacement(domain: Any, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return domain.displacement(a, b)


def build_flow(
    kind: str,
    tree: CollisionTree,
    nodes: NodeVariables,
    roots_x: np.ndarray,
    roots_v: np.ndarray,
    epsilon: float,
    t: float,
    L0: Sequence[int] = (),
    domain: Any = None,
    detect_overlaps: bool = True,
    stop_on_invalid: bool = False,
) -> FlowTrace:
    """Construct the backward flow of the given kind for one set of node variables."""
    if kind not in KINDS:
        raise ParameterError(f"unknown flow kind {kind!r}")
    if nodes.n != tree.n:
        raise ParameterError("node variables do not match the tree")
    if nodes.n and not (t > nodes.times[0] and nodes.times[-1] > 0):
        raise ParameterError("node times must lie in (0, t)")
    domain = FreeSpace() if domain is None else domain
    j, n = tree.j, tree.n
    roots_x = np.asarray(roots_x, dtype=float).reshape(j, 3)
    roots_v = np.asarray(roots_v, dtype=float).reshape(j, 3)
    L0s = set(int(a) for a in L0)
    if kind == "mixed" and not L0s <= set(range(j)):
        raise ParameterError("L0 must be a subset of the roots")
    gid = _group_map(kind, tree, L0s)
    roots = tree.roots()
    P = tree.size

    # live state: position at s_last, true velocity on the current segment
    x = np.zeros((P, 3))
    v = np.zeros((P, 3))
    s_last = np.full(P, t)
    x[:j] = roots_x
    v[:j] = roots_v
    alive = list(range(j))
    segs: list[list[Segment]] = [[] for _ in range(P)]
    recs: list[Interaction] = []
    creations: list[Creation] = []
    valid = naive_valid = True

    def close_segment(p: int, s: float, new_v: np.ndarray) -> None:
        xs = x[p] - v[p] * (s_last[p] - s)
        if s_last[p] > s:
            segs[p].append(Segment(s, float(s_last[p]), x[p].copy(), v[p].copy()))
        x[p] = xs
        v[p] = new_v
        s_last[p] = s

    def advance(s_from: float, s_to: float) -> None:
        dt = s_from - s_to
        if dt <= 0:
            return
        if kind in ("ebf", "bbf"):
            return
        for g in set(gid[alive]):
            members = [p for p in alive if gid[p] == g]
            if len(members) < 2:
                continue
            xm = np.array([x[p] - v[p] * (s_last[p] - s_from) for p in members])
            vm = v[members]
            _, _, events = evolve_positions(xm, vm, epsilon, -dt, domain)
            for ev in events:
                a, b = members[ev.pair[0]], members[ev.pair[1]]
                s_ev = s_from + ev.time
                close_segment(a, s_ev, np.asarray(ev.post_velocities[0]))
                close_segment(b, s_ev, np.asarray(ev.post_velocities[1]))
                recs.append(Interaction(s_ev, (min(a, b), max(a, b)), "recollision", bool(roots[a] == roots[b])))

    s_cur = t
    for r in range(n):
        tr = float(nodes.times[r])
        advance(s_cur, tr)
        s_cur = tr
        kp = tree.k[r]
        child = j + r
        w = nodes.omegas[r]
        vc = nodes.velocities[r]
        xk = x[kp] - v[kp] * (s_last[kp] - tr)
        eta = v[kp].copy()
        xc = xk.copy() if kind == "bbf" else xk + epsilon * w
        if domain is not None and isinstance(domain, Torus):
            xc = domain.wrap(xc[None])[0]
        if alive:
            pos_alive = np.array([x[p] - v[p] * (s_last[p] - tr) for p in alive])
            dists = np.linalg.norm(_displacement(domain, xc[None], pos_alive), axis=1)
        else:
            dists = np.zeros(0)
        ok = _creation_allowed(kind, roots[child], roots, alive, kp, dists, epsilon, L0s)
        naive = _creation_allowed("ibf", roots[child], roots, alive, kp, dists, epsilon, L0s) if kind != "bbf" else True
        valid &= ok
        naive_valid &= naive
        B = float(np.dot(w, vc - eta))
        outgoing = B >= 0.0
        if outgoing:
            nk, nc = _collide(eta[None], vc[None], w[None])
            new_k, new_c = nk[0], nc[0]
        else:
            new_k, new_c = eta, vc
        close_segment(kp, tr, new_k)
        x[child] = xc
        v[child] = new_c
        s_last[child] = tr
        alive.append(child)
        creations.append(Creation(r, tr, kp, child, w.copy(), bool(outgoing), B, xc.copy(), eta))
        if stop_on_invalid and not valid:
            break
    else:
        advance(s_cur, 0.0)
        s_cur = 0.0
    for p in alive:
        close_segment(p, s_cur, v[p])
    trace = FlowTrace(kind, tree, nodes, epsilon, t, _groups_list(gid, alive), segs, creations, recs,
                      [], valid, naive_valid, tuple(sorted(L0s)), domain)
    if detect_overlaps and s_cur == 0.0:
        trace.overlaps = detect_trace_overlaps(trace, gid)
    return trace


def _groups_list(gid: np.ndarray, alive: list[int]) -> list[list[int]]:
    out: dict[int, list[int]] = {}
    for p in alive:
        out.setdefault(int(gid[p]), []).append(p)
    return list(out.values())


def first_overlap(d_hi: np.ndarray, w: np.ndarray, length: float, eps: float) -> float | None:
    """Smallest tau in [0, length] with |d_hi - w tau| < eps (backward from the segment top)."""
    e2 = (eps * (1 - OVERLAP_RTOL)) ** 2
    c = float(np.dot(d_hi, d_hi)) - e2
    if c < 0:
        return 0.0
    a = float(np.dot(w, w))
    b = -float(np.dot(d_hi, w))
    if a == 0.0 or b >= 0:
        return None
    disc = b * b - a * c
    if disc <= 0:
        return None
    tau = c / (-b + math.sqrt(disc))
    return tau if tau <= length else None


def detect_trace_overlaps(trace: FlowTrace, gid: np.ndarray | None = None) -> list[Interaction]:
    """Overlaps between pairs that do not interact in this flow, by exact closest approach."""
    tree = trace.tree
    if gid is None:
        gid = _group_map(trace.kind, tree, trace.L0)
    roots = tree.roots()
    eps = trace.epsilon
    domain = trace.domain
    periodic = isinstance(domain, Torus)
    out = []
    for p in range(tree.size):
        for q in range(p + 1, tree.size):
            if gid[p] == gid[q]:
                continue
            # BBF creations start at distance zero from the progenitor; that contact is not an overlap
            skip_at = None
            if trace.kind == "bbf" and tree.progenitor(q) == p:
                skip_at = trace.creation_time(q)
            hit = _pair_first_overlap(trace.segments[p], trace.segments[q], eps, domain, periodic, skip_at)
            if hit is not None:
                out.append(Interaction(hit, (p, q), "overlap", bool(roots[p] == roots[q])))
    out.sort(key=lambda e: -e.time)
    return out


def _pair_first_overlap(sp: list[Segment], sq: list[Segment], eps: float, domain: Any, periodic: bool,
                        skip_at: float | None) -> float | None:
    bounds = sorted({s.s_lo for s in sp} | {s.s_hi for s in sp} | {s.s_lo for s in sq} | {s.s_hi for s in sq},
                    reverse=True)
    top = min(sp[0].s_hi, sq[0].s_hi)
    skipping = skip_at is not None
    for hi, lo in zip(bounds[:-1], bounds[1:]):
        if hi > top or lo < 0:
            continue
        a = next(s for s in sp if s.s_lo <= lo and hi <= s.s_hi)
        b = next(s for s in sq if s.s_lo <= lo and hi <= s.s_hi)
        w = a.v - b.v
        chunks = [(hi, lo)]
        if periodic:
            span = float(np.linalg.norm(w)) * (hi - lo)
            limit = 0.25 * (float(np.min(domain.sides)) - 2 * eps)
            m = max(1, int(math.ceil(span / limit))) if limit > 0 else 1
            edges = np.linspace(hi, lo, m + 1)
            chunks = list(zip(edges[:-1], edges[1:]))
        for ch, cl in chunks:
            d = a.position(ch) - b.position(ch)
            if periodic:
                d = domain.displacement(a.position(ch), b.position(ch))
            if skipping:
                # leave the zero-distance start behind: find where the pair separates past eps
                if float(np.dot(d, d)) < eps * eps:
                    ww = float(np.dot(w, w))
                    if ww == 0:
                        return None
                    # backward motion: d(tau) = d - w tau; exit time of the ball
                    bb = -float(np.dot(d, w))
                    cc = float(np.dot(d, d)) - eps * eps
                    tau_exit = (-bb + math.sqrt(max(bb * bb - ww * cc, 0.0))) / ww
                    if tau_exit >= ch - cl:
                        continue
                    d = d - w * tau_exit
                    ch = ch - tau_exit
                skipping = False
            tau = first_overlap(d, w, ch - cl, eps)
            if tau is not None:
                return float(ch - tau)
    return None


# --------------------------------------------------------------------------- classification


@dataclass
class RecollisionReport:
    internal: list[tuple[int, int]]
    external: list[tuple[int, int]]
    rec_graph: Graph  # over roots: trees that recollide
    ov_graph: Graph  # over roots: trees that overlap
    internal_overlaps: list[tuple[int, int]]

    def chi_rec(self, K: Sequence[int]) -> int:
        m = mask_of(K)
        return self.rec_graph.chi(m, m) if m else 1

    def chi_ov(self, Q: Sequence[int], K: Sequence[int]) -> int:
        return self.ov_graph.chi(mask_of(Q), mask_of(K))

    @property
    def has_internal(self) -> bool:
        return bool(self.internal) or bool(self.internal_overlaps)


def classify_recollisions(trace: FlowTrace, grouping: Sequence[Sequence[int]] | None = None) -> RecollisionReport:
    """Label every recollision and overlap internal/external and build the tree-level graphs.

    ``grouping`` defaults to the per-root particle sets S(i) of the tree.
    """
    tree = trace.tree
    if grouping is None:
        owner = tree.roots()
    else:
        owner = np.full(tree.size, -1)
        for i, grp in enumerate(grouping):
            owner[list(grp)] = i
    internal, external, int_ov = [], [], []
    rec_edges, ov_edges = set(), set()
    for e in trace.recollisions:
        a, b = owner[e.pair[0]], owner[e.pair[1]]
        if a == b:
            internal.append(e.pair)
        else:
            external.append(e.pair)
            rec_edges.add((min(a, b), max(a, b)))
    for e in trace.overlaps:
        a, b = owner[e.pair[0]], owner[e.pair[1]]
        if a == b:
            int_ov.append(e.pair)
        else:
            ov_edges.add((min(a, b), max(a, b)))
    ng = int(owner.max()) + 1
    return RecollisionReport(internal, external, Graph.from_edges(ng, sorted(rec_edges)),
                             Graph.from_edges(ng, sorted(ov_edges)), int_ov)


def internal_indicator(trace: FlowTrace) -> bool:
    """An overlap at a creation time or an internal recollision occurred."""
    return (not trace.valid) or any(e.internal for e in trace.recollisions)


# --------------------------------------------------------------------------- virtual trajectories


@dataclass(frozen=True)
class VirtualPiece:
    s_lo: float
    s_hi: float
    particle: int


@dataclass
class VirtualTrajectory:
    pieces: list[VirtualPiece]  # ordered from time 0 upwards
    jumps: list[tuple[float, float]]  # (time, jump size)
    trace: FlowTrace

    def position(self, s: float) -> np.ndarray:
        for pc in self.pieces:
            if pc.s_lo <= s < pc.s_hi or (s == pc.s_hi == self.trace.horizon):
                return self.trace.state(pc.particle, s)[0]
        raise ParameterError("time outside [0, t]")


def virtual_trajectory(trace: FlowTrace, i: int) -> VirtualTrajectory:
    """Particle i's path, extended through its chain of progenitors up to time t."""
    tree = trace.tree
    if not 0 <= i < tree.size:
        raise ParameterError("particle index out of range")
    pieces, jumps = [], []
    p, lo = i, 0.0
    while True:
        hi = trace.creation_time(p)
        pieces.append(VirtualPiece(lo, hi, p))
        if p < tree.j:
            break
        parent = tree.k[p - tree.j]
        xc = trace.state(p, hi)[0]
        xp = trace.state(parent, hi)[0]
        jumps.append((hi, float(np.linalg.norm(trace.domain.displacement(xc[None], xp[None])[0]))))
        p, lo = parent, hi
    return VirtualTrajectory(pieces, jumps, trace)


# --------------------------------------------------------------------------- recollision tables


class TableConstraintError(ParameterError):
    """The flow does not satisfy the recollision/overlap constraint of the requested table."""


@dataclass(frozen=True)
class RecollisionTable:
    pairs: tuple[tuple[int, int], ...]  # (bullet alpha, target beta)

    @property
    def length(self) -> int:
        return len(self.pairs)

    def is_valid(self, L0: Sequence[int], Q: Sequence[int]) -> bool:
        need = set(L0) | set(Q)
        seen: set[int] = set()
        for a, b in self.pairs:
            if a not in need or a in seen:
                return False
            seen |= {a, b}
        return need <= seen


def extract_recollision_table(trace: FlowTrace, L0: Sequence[int], Q: Sequence[int],
                              report: RecollisionReport | None = None) -> RecollisionTable:
    """Bullet/target table from the backward-ordered external recollisions and overlaps."""
    L0, Q = [int(a) for a in L0], [int(a) for a in Q]
    if set(L0) & set(Q):
        raise ParameterError("L0 and Q must be disjoint")
    report = classify_recollisions(trace) if report is None else report
    K = list(range(trace.tree.j))
    if not (report.chi_rec(L0) and report.chi_ov(Q, K)):
        raise TableConstraintError("recollision/overlap constraint does not hold on this flow")
    roots = trace.tree.roots()
    events = sorted(
        [e for e in trace.recollisions + trace.overlaps if roots[e.pair[0]] != roots[e.pair[1]]],
        key=lambda e: -e.time,
    )
    need = set(L0) | set(Q)
    named: set[int] = set()
    pairs = []
    for e in events:
        if need <= named:
            break
        a, b = sorted((int(roots[e.pair[0]]), int(roots[e.pair[1]])))
        fresh = [c for c in (a, b) if c not in named]
        if not fresh:
            continue
        if len(fresh) == 1:
            alpha = fresh[0]
            beta = b if alpha == a else a
            if alpha not in need:
                continue
        else:
            if a in need and b in need:
                alpha, beta = b, a  # lower index is the target
            elif a in need:
                alpha, beta = a, b
            elif b in need:
                alpha, beta = b, a
            else:
                continue
        pairs.append((alpha, beta))
        named |= {alpha, beta}
    if not need <= named:
        raise TableConstraintError("events do not name every tree of L0 and Q")
    return RecollisionTable(tuple(pairs))


# --------------------------------------------------------------------------- batched free flows


@dataclass
class FreeFlowBatch:
    """EBF/BBF flows for S node-variable draws on the per-draw time grid g = (t, t_0, ..., t_{n-1}, 0).

    ``X[s, p, m]`` is the position of particle p at grid time g_m (NaN before it
    exists) and ``V[s, p, m]`` its velocity on (g_{m+1}, g_m).
    """

    grid: np.ndarray  # (S, n+2)
    X: np.ndarray  # (S, P, n+2, 3)
    V: np.ndarray  # (S, P, n+1, 3)
    kernel: np.ndarray  # (S,) product of signed kernels
    outgoing: np.ndarray  # (S, n) bool

    @property
    def x0(self) -> np.ndarray:
        return self.X[:, :, -1]

    @property
    def v0(self) -> np.ndarray:
        return self.V[:, :, -1]


def free_flow_batch(kind: str, tree: CollisionTree, roots_x: np.ndarray, roots_v: np.ndarray,
                    batch: NodeBatch, epsilon: float, t: float) -> FreeFlowBatch:
    """Vectorized EBF/BBF construction (free motion between creations).

    ``roots_x``/``roots_v`` have shape (j, 3) or (S, j, 3).
    """
    if kind not in ("ebf", "bbf"):
        raise ParameterError("batched flows support only the free kinds 'ebf' and 'bbf'")
    j, n, S = tree.j, tree.n, batch.size
    P = tree.size
    grid = np.concatenate([np.full((S, 1), float(t)), batch.times, np.zeros((S, 1))], axis=1)
    X = np.full((S, P, n + 2, 3), np.nan)
    V = np.full((S, P, n + 1, 3), np.nan)
    x = np.zeros((S, P, 3))
    v = np.zeros((S, P, 3))
    x[:, :j] = np.broadcast_to(np.asarray(roots_x, dtype=float).reshape(-1, j, 3), (S, j, 3))
    v[:, :j] = np.broadcast_to(np.asarray(roots_v, dtype=float).reshape(-1, j, 3), (S, j, 3))
    X[:, :j, 0] = x[:, :j]
    kern = np.ones(S)
    outg = np.zeros((S, n), dtype=bool)
    for m in range(n + 1):
        live = j + m
        dt = (grid[:, m] - grid[:, m + 1])[:, None]
        V[:, :live, m] = v[:, :live]
        x[:, :live] -= v[:, :live] * dt[:, None]
        X[:, :live, m + 1] = x[:, :live]
        if m == n:
            break
        kp = tree.k[m]
        eta = v[:, kp]
        w = batch.omegas[:, m]
        vc = batch.velocities[:, m]
        B = np.einsum("si,si->s", w, vc - eta)
        kern = kern * B
        out = B >= 0
        outg[:, m] = out
        nk, nc = _collide(eta, vc, w)
        v[:, kp] = np.where(out[:, None], nk, eta)
        x[:, j + m] = x[:, kp] if kind == "bbf" else x[:, kp] + epsilon * w
        v[:, j + m] = np.where(out[:, None], nc, vc)
        X[:, j + m, m + 1] = x[:, j + m]
    return FreeFlowBatch(grid, X, V, kern, outg)


def batch_overlaps(fb: FreeFlowBatch, tree: CollisionTree, epsilon: float, kind: str,
                   domain: Any = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-draw flags (internal overlap, external overlap) of a batched free flow.

    A pair overlaps when its exact distance drops below epsilon on some common free
    interval. In BBF the progenitor-child pair starts at distance zero on the interval
    just below the creation; that interval is skipped for that pair.
    """
    domain = FreeSpace() if domain is None else domain
    S, P = fb.X.shape[0], fb.X.shape[1]
    roots = tree.roots()
    e2 = (epsilon * (1 - OVERLAP_RTOL)) ** 2
    internal = np.zeros(S, dtype=bool)
    external = np.zeros(S, dtype=bool)
    n = tree.n
    for p in range(P):
        for q in range(p + 1, P):
            hit = np.zeros(S, dtype=bool)
            start = max(0, p - tree.j + 1, q - tree.j + 1)  # first interval where both exist
            # BBF progenitor-child pairs start in contact; ignore them until they first separate
            in_contact = np.full(S, kind == "bbf" and q >= tree.j and tree.k[q - tree.j] == p)
            for m in range(start, n + 1):
                d = domain.displacement(fb.X[:, p, m], fb.X[:, q, m])
                w = fb.V[:, p, m] - fb.V[:, q, m]
                L = fb.grid[:, m] - fb.grid[:, m + 1]
                c = np.einsum("si,si->s", d, d) - e2
                a = np.einsum("si,si->s", w, w)
                b = -np.einsum("si,si->s", d, w)
                disc = b * b - a * c
                with np.errstate(invalid="ignore", divide="ignore"):
                    tau = c / (-b + np.sqrt(np.maximum(disc, 0.0)))
                    now = (c < 0) | ((b < 0) & (disc > 0) & (tau <= L))
                    # still inside at the bottom of the interval?
                    d_lo = d - w * L[:, None]
                    inside_lo = np.einsum("si,si->s", d_lo, d_lo) < e2
                hit |= now & ~in_contact
                in_contact &= inside_lo
            if roots[p] == roots[q]:
                internal |= hit
            else:
                external |= hit
    return internal, external
