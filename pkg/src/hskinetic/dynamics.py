"""Event-driven hard-sphere dynamics with the elastic reflection rule.

Forward evolution uses a global priority queue of predicted pair contacts,
invalidated through per-particle counters. Backward evolution is the forward flow
conjugated by velocity reversal. At an event time the reported state is the limit
from later times (right continuity).
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .core import CONTACT_RTOL, Configuration, FreeSpace, ParameterError, Particle, Torus

GRAZING_TOL = 1e-12
SIMULTANEITY_TOL = 1e-12


class SingularEventError(RuntimeError):
    """A particle takes part in two contacts at (numerically) the same instant."""


@dataclass(frozen=True)
class CollisionEvent:
    time: float
    pair: tuple[int, int]
    omega: np.ndarray
    pre_velocities: tuple[np.ndarray, np.ndarray]
    post_velocities: tuple[np.ndarray, np.ndarray]

    def to_dict(self) -> dict[str, Any]:
        return {
            "time": self.time,
            "pair": list(self.pair),
            "omega": self.omega.tolist(),
            "pre_velocities": [v.tolist() for v in self.pre_velocities],
            "post_velocities": [v.tolist() for v in self.post_velocities],
        }


def collide(v: np.ndarray, v1: np.ndarray, omega: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exchange the normal components: (v - w[w.(v-v1)], v1 + w[w.(v-v1)])."""
    v = np.asarray(v, dtype=float)
    v1 = np.asarray(v1, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if abs(float(np.linalg.norm(omega, axis=-1).max()) - 1) > 1e-9 or abs(
        float(np.linalg.norm(omega, axis=-1).min()) - 1
    ) > 1e-9:
        raise ParameterError("omega must be a unit vector")
    return _collide(v, v1, omega)


def _collide(v: np.ndarray, v1: np.ndarray, omega: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = np.sum(omega * (v - v1), axis=-1, keepdims=True)
    return v - omega * s, v1 + omega * s


def contact_times(dx: np.ndarray, dv: np.ndarray, epsilon: float) -> np.ndarray:
    """First approaching contact time for relative positions/velocities (rows); inf if none.

    Uses t = c / (-b + sqrt(b^2 - |dv|^2 c)) with c = |dx|^2 - eps^2, b = dx.dv, which
    avoids cancellation on the approaching branch. Slightly overlapping approaching
    pairs (numerical drift) get t = 0.
    """
    dx = np.atleast_2d(dx)
    dv = np.atleast_2d(dv)
    b = np.sum(dx * dv, axis=1)
    vv = np.sum(dv * dv, axis=1)
    rr = np.sum(dx * dx, axis=1)
    c = rr - epsilon * epsilon
    disc = b * b - vv * c
    approaching = b < -GRAZING_TOL * np.sqrt(rr * vv)
    ok = approaching & (disc > 0)
    t = np.full(len(b), np.inf)
    if np.any(ok):
        t[ok] = np.maximum(c[ok], 0.0) / (-b[ok] + np.sqrt(disc[ok]))
    return t


def time_to_contact(p: Particle, q: Particle, epsilon: float, domain: FreeSpace | Torus | None = None) -> float | None:
    """Smallest t > 0 with |x_p - x_q + (v_p - v_q) t| = eps on the approaching branch."""
    domain = domain if domain is not None else FreeSpace()
    dx = domain.displacement(p.x, q.x)
    if float(np.linalg.norm(dx)) < epsilon * (1 - CONTACT_RTOL):
        raise ParameterError("time_to_contact needs non-overlapping particles")
    t = float(contact_times(dx, np.asarray(p.v) - np.asarray(q.v), epsilon)[0])
    return None if math.isinf(t) else t


@dataclass
class Trajectory:
    """A realized flow on [0, horizon] (or [horizon, 0] when horizon < 0).

    ``events`` are sorted by increasing time; for each event the pre/post velocities
    are the states just before/after the event time in the direction of increasing time.
    """

    initial: Configuration
    events: list[CollisionEvent]
    horizon: float
    final: Configuration
    rechecks: int = 0

    def configuration_at(self, s: float) -> Configuration:
        """State at time s (right-continuous) by replaying the event log."""
        t = self.horizon
        lo, hi = min(0.0, t), max(0.0, t)
        if not lo - 1e-14 <= s <= hi + 1e-14:
            raise ParameterError(f"time {s} outside trajectory range [{lo}, {hi}]")
        x = np.array(self.initial.positions)
        v = np.array(self.initial.velocities)
        now = 0.0
        if t >= 0:
            applied = [e for e in self.events if e.time <= s]
            for e in applied:
                x += v * (e.time - now)
                now = e.time
                i, j = e.pair
                v[i], v[j] = e.post_velocities
        else:
            applied = [e for e in reversed(self.events) if e.time > s]
            for e in applied:
                x += v * (e.time - now)
                now = e.time
                i, j = e.pair
                v[i], v[j] = e.pre_velocities
        x += v * (s - now)
        return self.initial.replace(self.initial.domain.wrap(x), v)

    def to_json(self) -> str:
        return json.dumps(
            {
                "horizon": self.horizon,
                "initial": self.initial.to_dict(),
                "final": self.final.to_dict(),
                "events": [e.to_dict() for e in self.events],
            },
            indent=1,
        )

    def write_snapshots_csv(self, path: str, times: Sequence[float]) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "particle", "x", "y", "z", "vx", "vy", "vz"])
            for s in times:
                cfg = self.configuration_at(float(s))
                for k, (x, v) in enumerate(zip(cfg.positions, cfg.velocities)):
                    w.writerow([repr(float(s)), k, *map(repr, x.tolist()), *map(repr, v.tolist())])


@dataclass
class _Engine:
    """Forward event-driven integrator with lazily advanced particle positions."""

    x: np.ndarray
    v: np.ndarray
    epsilon: float
    domain: FreeSpace | Torus
    tref: np.ndarray = field(init=False)
    counter: np.ndarray = field(init=False)
    heap: list = field(init=False, default_factory=list)
    skin: float = field(init=False, default=math.inf)
    rechecks: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        n = len(self.x)
        self.tref = np.zeros(n)
        self.counter = np.zeros(n, dtype=np.int64)
        # within a skin window only the minimum image can reach contact
        self.skin = _skin(self.epsilon, self.domain)

    def positions_at(self, s: float, idx: np.ndarray | slice = slice(None)) -> np.ndarray:
        return self.x[idx] + self.v[idx] * (s - self.tref[idx])[..., None]

    def _predict(self, i: int, now: float, exclude: int = -1) -> None:
        xi = self.x[i] + self.v[i] * (now - self.tref[i])
        xs = self.positions_at(now)
        dx = self.domain.displacement(xi, xs)
        dv = self.v[i] - self.v
        t = contact_times(dx, dv, self.epsilon)
        t[i] = np.inf
        if exclude >= 0:
            t[exclude] = np.inf
        if math.isfinite(self.skin):
            # pairs further apart than eps + 2*skin are revisited at a recheck
            far = np.sum(dx * dx, axis=1) > (self.epsilon + 2 * self.skin) ** 2
            t[far] = np.inf
        for j in np.flatnonzero(np.isfinite(t)):
            a, b = (i, int(j)) if i < j else (int(j), i)
            heapq.heappush(self.heap, (now + t[j], a, b, self.counter[a], self.counter[b]))
        if math.isfinite(self.skin):
            speed = float(np.linalg.norm(self.v[i]))
            if speed > 0:
                heapq.heappush(self.heap, (now + self.skin / speed, i, -1, self.counter[i], 0))

    def _advance(self, i: int, now: float) -> None:
        self.x[i] = self.x[i] + self.v[i] * (now - self.tref[i])
        self.tref[i] = now

    def _valid(self, entry: tuple) -> bool:
        _, a, b, ca, cb = entry
        if b < 0:
            return self.counter[a] == ca
        return self.counter[a] == ca and self.counter[b] == cb

    def run(self, horizon: float) -> list[CollisionEvent]:
        n = len(self.x)
        events: list[CollisionEvent] = []
        if horizon <= 0 or n == 0:
            return events
        self._initial_predictions()
        while self.heap and self.heap[0][0] <= horizon:
            entry = heapq.heappop(self.heap)
            if not self._valid(entry):
                continue
            now, a, b, _, _ = entry
            if b < 0:
                self._advance(a, now)
                self.counter[a] += 1
                self.rechecks += 1
                self._predict(a, now)
                continue
            self._check_simultaneous(now, a, b)
            self._advance(a, now)
            self._advance(b, now)
            dx = self.domain.displacement(self.x[a], self.x[b])
            omega = dx / np.linalg.norm(dx)
            dv = self.v[a] - self.v[b]
            s = float(omega @ dv)
            self.counter[a] += 1
            self.counter[b] += 1
            if abs(s) >= GRAZING_TOL * float(np.linalg.norm(dv)) and s < 0:
                pre = (self.v[a].copy(), self.v[b].copy())
                self.v[a], self.v[b] = _collide(self.v[a], self.v[b], omega)
                events.append(CollisionEvent(now, (a, b), omega, pre, (self.v[a].copy(), self.v[b].copy())))
            self._predict(a, now, exclude=b)
            self._predict(b, now, exclude=a)
        # bring everyone to the horizon
        self.x = self.positions_at(horizon)
        self.tref[:] = horizon
        return events

    def _initial_predictions(self) -> None:
        n = len(self.x)
        if n > 64 and math.isfinite(self.skin):
            from .core import close_pairs

            pairs = close_pairs(self.x, self.epsilon + 2 * self.skin, self.domain)
        else:
            i, j = np.triu_indices(n, 1)
            pairs = np.stack([i, j], axis=1)
        if len(pairs):
            a, b = pairs[:, 0], pairs[:, 1]
            t = contact_times(self.domain.displacement(self.x[a], self.x[b]), self.v[a] - self.v[b], self.epsilon)
            for k in np.flatnonzero(np.isfinite(t)):
                heapq.heappush(self.heap, (float(t[k]), int(a[k]), int(b[k]), 0, 0))
        if math.isfinite(self.skin):
            speed = np.linalg.norm(self.v, axis=1)
            for i in np.flatnonzero(speed > 0):
                heapq.heappush(self.heap, (self.skin / float(speed[i]), int(i), -1, 0, 0))

    def _check_simultaneous(self, now: float, a: int, b: int) -> None:
        held = []
        while self.heap and self.heap[0][0] <= now + SIMULTANEITY_TOL:
            held.append(heapq.heappop(self.heap))
        for entry in held:
            _, c, d, _, _ = entry
            if d >= 0 and self._valid(entry) and ({c, d} & {a, b}) and {c, d} != {a, b}:
                raise SingularEventError(f"simultaneous contacts of pairs {(a, b)} and {(c, d)} at t={now:.15g}")
        for entry in held:
            heapq.heappush(self.heap, entry)


def _skin(epsilon: float, domain: FreeSpace | Torus) -> float:
    if not isinstance(domain, Torus):
        return math.inf
    skin = 0.49 * (0.5 * min(domain.L) - epsilon)
    if skin <= 0:
        raise ParameterError("torus too small for the sphere diameter")
    return skin


def _forward(
    x: np.ndarray, v: np.ndarray, epsilon: float, horizon: float, domain: FreeSpace | Torus, engine: str
) -> tuple[np.ndarray, np.ndarray, list[CollisionEvent], int]:
    """Forward flow of raw arrays; positions are not wrapped."""
    if engine == "reference":
        eng = _Engine(np.array(x, dtype=float), np.array(v, dtype=float), epsilon, domain)
        events = eng.run(horizon)
        return eng.x, eng.v, events, eng.rechecks
    if engine != "fast":
        raise ParameterError(f"unknown engine {engine!r}")
    from ._fastflow import run_kernel

    periodic = isinstance(domain, Torus)
    L = domain.sides if periodic else np.ones(3)
    skin = _skin(epsilon, domain) if periodic else 1.0
    cap = max(64, 4 * len(x))
    while True:
        xw = np.array(x, dtype=float)
        vw = np.array(v, dtype=float)
        status, m, ev_t, ev_ij, ev_w, ev_pre, ev_post, rechecks = run_kernel(
            xw, vw, float(epsilon), float(horizon), L, periodic, skin, cap, GRAZING_TOL, SIMULTANEITY_TOL
        )
        if status == 1:
            cap *= 4
            continue
        if status == 2:
            raise SingularEventError("simultaneous contacts sharing a particle")
        break
    events = [
        CollisionEvent(
            float(ev_t[k]),
            (int(ev_ij[k, 0]), int(ev_ij[k, 1])),
            ev_w[k].copy(),
            (ev_pre[k, 0].copy(), ev_pre[k, 1].copy()),
            (ev_post[k, 0].copy(), ev_post[k, 1].copy()),
        )
        for k in range(m)
    ]
    return xw, vw, events, int(rechecks)


def evolve(cfg: Configuration, t: float, engine: str = "fast") -> Trajectory:
    """Hard-sphere flow over time t; negative t evolves backward.

    ``engine`` selects the compiled kernel ("fast") or the pure numpy
    implementation ("reference"); both follow the same event rules.
    """
    if not math.isfinite(t):
        raise ParameterError("evolution time must be finite")
    if t >= 0:
        x, v, events, rechecks = _forward(cfg.positions, cfg.velocities, cfg.epsilon, t, cfg.domain, engine)
        return Trajectory(cfg, events, t, cfg.replace(cfg.domain.wrap(x), v), rechecks)
    x, v, rev, rechecks = _forward(cfg.positions, -cfg.velocities, cfg.epsilon, -t, cfg.domain, engine)
    events = [
        CollisionEvent(-e.time, e.pair, e.omega, (-e.post_velocities[0], -e.post_velocities[1]),
                       (-e.pre_velocities[0], -e.pre_velocities[1]))
        for e in reversed(rev)
    ]
    return Trajectory(cfg, events, t, cfg.replace(cfg.domain.wrap(x), -v), rechecks)


def evolve_positions(
    positions: np.ndarray,
    velocities: np.ndarray,
    epsilon: float,
    t: float,
    domain: FreeSpace | Torus,
    engine: str = "fast",
) -> tuple[np.ndarray, np.ndarray, list[CollisionEvent]]:
    """Array-level evolution for inner loops: no validation, no wrapping of positions.

    Events carry times measured from the start with the sign of t, in processing
    order; their velocity pairs are (before, after) in the direction of travel,
    expressed in the true (unreversed) velocities.
    """
    if t >= 0:
        x, v, events, _ = _forward(positions, velocities, epsilon, t, domain, engine)
        return x, v, events
    x, v, rev, _ = _forward(positions, -np.asarray(velocities, dtype=float), epsilon, -t, domain, engine)
    events = [
        CollisionEvent(-e.time, e.pair, e.omega, (-e.pre_velocities[0], -e.pre_velocities[1]),
                       (-e.post_velocities[0], -e.post_velocities[1]))
        for e in rev
    ]
    return x, -v, events
