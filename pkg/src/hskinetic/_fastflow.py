"""Compiled event-driven kernel used for large ensembles.

Each particle keeps its own earliest predicted event (partner and the partner's
collision counter at prediction time); the global next event is the argmin over
particles. Stale predictions are detected through the counters and recomputed
lazily. On a torus every particle is revisited after travelling ``skin``, which
keeps minimum-image predictions exact (see ``dynamics._Engine``).
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

INF = math.inf


@njit(cache=True)
def _pair_time(dx, dy, dz, dvx, dvy, dvz, eps2, graze):
    b = dx * dvx + dy * dvy + dz * dvz
    if b >= 0.0:
        return INF
    vv = dvx * dvx + dvy * dvy + dvz * dvz
    rr = dx * dx + dy * dy + dz * dz
    if b >= -graze * math.sqrt(rr * vv):
        return INF
    c = rr - eps2
    disc = b * b - vv * c
    if disc <= 0.0:
        return INF
    if c < 0.0:
        c = 0.0
    return c / (-b + math.sqrt(disc))


@njit(cache=True)
def _wrap(d, L):
    if abs(d) <= 0.5 * L:
        return d
    return d - L * np.rint(d / L)


@njit(cache=True)
def _initial(x, v, L, periodic, eps, skin, next_t, next_j, graze):
    # one sweep over unordered pairs, keeping the earliest partner of each particle
    n = x.shape[0]
    eps2 = eps * eps
    rc = eps + 2.0 * skin
    rc2 = rc * rc
    for i in range(n):
        for j in range(i + 1, n):
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            dz = x[i, 2] - x[j, 2]
            if periodic:
                dx = _wrap(dx, L[0])
                if abs(dx) > rc:
                    continue
                dy = _wrap(dy, L[1])
                if abs(dy) > rc:
                    continue
                dz = _wrap(dz, L[2])
                if dx * dx + dy * dy + dz * dz > rc2:
                    continue
            t = _pair_time(dx, dy, dz, v[i, 0] - v[j, 0], v[i, 1] - v[j, 1], v[i, 2] - v[j, 2], eps2, graze)
            if t < next_t[i]:
                next_t[i] = t
                next_j[i] = j
            if t < next_t[j]:
                next_t[j] = t
                next_j[j] = i
    if periodic:
        for i in range(n):
            speed = math.sqrt(v[i, 0] ** 2 + v[i, 1] ** 2 + v[i, 2] ** 2)
            if speed > 0.0 and skin / speed < next_t[i]:
                next_t[i] = skin / speed
                next_j[i] = -1


@njit(cache=True)
def _predict(i, now, x, v, tref, L, periodic, eps, skin, next_t, next_j, next_c, counter, exclude, graze):
    n = x.shape[0]
    dt_i = now - tref[i]
    xi0 = x[i, 0] + v[i, 0] * dt_i
    xi1 = x[i, 1] + v[i, 1] * dt_i
    xi2 = x[i, 2] + v[i, 2] * dt_i
    eps2 = eps * eps
    rc = eps + 2.0 * skin
    rc2 = rc * rc
    best = INF
    bj = -1
    for j in range(n):
        if j == i or j == exclude:
            continue
        dt_j = now - tref[j]
        dx = xi0 - (x[j, 0] + v[j, 0] * dt_j)
        dy = xi1 - (x[j, 1] + v[j, 1] * dt_j)
        dz = xi2 - (x[j, 2] + v[j, 2] * dt_j)
        if periodic:
            dx = _wrap(dx, L[0])
            if abs(dx) > rc:
                continue
            dy = _wrap(dy, L[1])
            if abs(dy) > rc:
                continue
            dz = _wrap(dz, L[2])
            if dx * dx + dy * dy + dz * dz > rc2:
                continue
        t = _pair_time(dx, dy, dz, v[i, 0] - v[j, 0], v[i, 1] - v[j, 1], v[i, 2] - v[j, 2], eps2, graze)
        if t < best:
            best = t
            bj = j
    if periodic:
        speed = math.sqrt(v[i, 0] ** 2 + v[i, 1] ** 2 + v[i, 2] ** 2)
        if speed > 0.0 and skin / speed < best:
            best = skin / speed
            bj = -1
    next_t[i] = now + best
    next_j[i] = bj
    next_c[i] = counter[bj] if bj >= 0 else 0


@njit(cache=True)
def run_kernel(x, v, eps, horizon, L, periodic, skin, cap, graze, simul):
    """Evolve in place to ``horizon``; returns (status, n_events, event arrays, rechecks).

    status: 0 ok, 1 event buffer overflow, 2 simultaneous contacts sharing a particle.
    """
    n = x.shape[0]
    tref = np.zeros(n)
    counter = np.zeros(n, dtype=np.int64)
    next_t = np.full(n, INF)
    next_j = np.full(n, -1, dtype=np.int64)
    next_c = np.zeros(n, dtype=np.int64)
    ev_t = np.empty(cap)
    ev_ij = np.empty((cap, 2), dtype=np.int64)
    ev_w = np.empty((cap, 3))
    ev_pre = np.empty((cap, 2, 3))
    ev_post = np.empty((cap, 2, 3))
    m = 0
    rechecks = 0
    status = 0
    _initial(x, v, L, periodic, eps, skin, next_t, next_j, graze)
    while n > 1:
        i = int(np.argmin(next_t))
        now = next_t[i]
        if now > horizon:
            break
        j = next_j[i]
        if j < 0:
            # skin revisit
            for k in range(3):
                x[i, k] += v[i, k] * (now - tref[i])
            tref[i] = now
            rechecks += 1
            _predict(i, now, x, v, tref, L, periodic, eps, skin, next_t, next_j, next_c, counter, -1, graze)
            continue
        if counter[j] != next_c[i]:
            _predict(i, now, x, v, tref, L, periodic, eps, skin, next_t, next_j, next_c, counter, -1, graze)
            continue
        # another live contact involving i or j at the same instant
        for k in range(n):
            if k != i and k != j and next_t[k] <= now + simul:
                kj = next_j[k]
                if (kj == i or kj == j) and counter[kj] == next_c[k]:
                    status = 2
            if status == 2:
                break
        if status == 2:
            break
        for k in range(3):
            x[i, k] += v[i, k] * (now - tref[i])
            x[j, k] += v[j, k] * (now - tref[j])
        tref[i] = now
        tref[j] = now
        dx = x[i, 0] - x[j, 0]
        dy = x[i, 1] - x[j, 1]
        dz = x[i, 2] - x[j, 2]
        if periodic:
            dx = _wrap(dx, L[0])
            dy = _wrap(dy, L[1])
            dz = _wrap(dz, L[2])
        r = math.sqrt(dx * dx + dy * dy + dz * dz)
        w0 = dx / r
        w1 = dy / r
        w2 = dz / r
        dv0 = v[i, 0] - v[j, 0]
        dv1 = v[i, 1] - v[j, 1]
        dv2 = v[i, 2] - v[j, 2]
        s = w0 * dv0 + w1 * dv1 + w2 * dv2
        counter[i] += 1
        counter[j] += 1
        if s < 0.0 and abs(s) >= graze * math.sqrt(dv0 * dv0 + dv1 * dv1 + dv2 * dv2):
            if m >= cap:
                status = 1
                break
            ev_t[m] = now
            ev_ij[m, 0] = i
            ev_ij[m, 1] = j
            ev_w[m, 0] = w0
            ev_w[m, 1] = w1
            ev_w[m, 2] = w2
            for k in range(3):
                ev_pre[m, 0, k] = v[i, k]
                ev_pre[m, 1, k] = v[j, k]
            v[i, 0] -= w0 * s
            v[i, 1] -= w1 * s
            v[i, 2] -= w2 * s
            v[j, 0] += w0 * s
            v[j, 1] += w1 * s
            v[j, 2] += w2 * s
            for k in range(3):
                ev_post[m, 0, k] = v[i, k]
                ev_post[m, 1, k] = v[j, k]
            m += 1
        _predict(i, now, x, v, tref, L, periodic, eps, skin, next_t, next_j, next_c, counter, j, graze)
        _predict(j, now, x, v, tref, L, periodic, eps, skin, next_t, next_j, next_c, counter, i, graze)
    for i in range(n):
        for k in range(3):
            x[i, k] += v[i, k] * (horizon - tref[i])
    return status, m, ev_t, ev_ij, ev_w, ev_pre, ev_post, rechecks
