from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import brentq

from hskinetic.core import Configuration, FreeSpace, ParameterError, Particle, make_rng
from hskinetic.dynamics import collide, contact_times, evolve, evolve_positions, time_to_contact

from .conftest import random_gas


def test_collision_conserves_momentum_energy():
    rng = make_rng(1)
    for _ in range(200):
        v, v1 = rng.normal(size=3), rng.normal(size=3)
        w = rng.normal(size=3)
        w /= np.linalg.norm(w)
        a, b = collide(v, v1, w)
        scale = np.dot(v, v) + np.dot(v1, v1)
        assert np.allclose(a + b, v + v1, atol=1e-12 * np.sqrt(scale))
        assert abs(np.dot(a, a) + np.dot(b, b) - scale) <= 1e-12 * scale
        # the rule is an involution
        c, d = collide(a, b, w)
        assert np.allclose(c, v) and np.allclose(d, v1)


def test_collide_rejects_non_unit_omega():
    with pytest.raises(ParameterError):
        collide(np.zeros(3), np.ones(3), np.array([1.0, 1.0, 0.0]))


def test_head_on_contact_time():
    p = Particle(np.zeros(3), np.array([1.0, 0, 0]))
    q = Particle(np.array([1.0, 0, 0]), np.array([-1.0, 0, 0]))
    assert time_to_contact(p, q, 0.2) == pytest.approx(0.4)
    assert time_to_contact(q, Particle(np.array([3.0, 0, 0]), np.zeros(3)), 0.2) is None
    assert np.isinf(contact_times(np.array([1.0, 0, 0]), np.array([1.0, 0, 0]), 0.1)[0])


def test_two_body_exchange():
    cfg = Configuration(np.array([[0, 0, 0], [1.0, 0, 0]]), np.array([[1.0, 0, 0], [0, 0, 0]]), 0.2, FreeSpace())
    tr = evolve(cfg, 2.0)
    assert len(tr.events) == 1 and tr.events[0].time == pytest.approx(0.8)
    assert np.allclose(tr.final.velocities, [[0, 0, 0], [1, 0, 0]])


@pytest.mark.parametrize("torus", [False, True])
def test_event_conservation(torus):
    rng = make_rng(2)
    for _ in range(5):
        cfg = random_gas(20, 0.12, rng, torus=torus)
        tr = evolve(cfg, 0.5)
        for e in tr.events:
            pre, post = np.array(e.pre_velocities), np.array(e.post_velocities)
            scale = float(np.sum(pre * pre))
            assert np.allclose(pre.sum(axis=0), post.sum(axis=0), atol=1e-12 * np.sqrt(scale))
            assert abs(float(np.sum(post * post)) - scale) <= 1e-12 * scale


@pytest.mark.parametrize("torus", [False, True])
def test_forward_backward_reversibility(torus):
    rng = make_rng(3)
    for n in (5, 12, 20):
        cfg = random_gas(n, 0.15, rng, torus=torus)
        fwd = evolve(cfg, 0.6)
        assert len(fwd.events) <= 100
        back = evolve(fwd.final.replace(velocities=-fwd.final.velocities), 0.6)
        dx = cfg.domain.displacement(back.final.positions, cfg.positions)
        assert np.max(np.abs(dx)) < 1e-8
        assert np.max(np.abs(-back.final.velocities - cfg.velocities)) < 1e-8
        # negative horizons run the same flow backward
        neg = evolve(fwd.final, -0.6)
        assert np.max(np.abs(cfg.domain.displacement(neg.final.positions, cfg.positions))) < 1e-8


def time_stepping_oracle(x: np.ndarray, v: np.ndarray, eps: float, t: float, dt: float = 1e-3):
    """Fixed time steps; within a step, contacts are located by root bracketing."""
    x, v = x.copy(), v.copy()
    n = len(x)
    now = 0.0
    while now < t:
        h = min(dt, t - now)
        first, pair = h, None
        for i in range(n):
            for k in range(i + 1, n):
                dx, dv = x[i] - x[k], v[i] - v[k]
                g = lambda s: np.linalg.norm(dx + dv * s) - eps
                vv = float(dv @ dv)
                if vv == 0 or dx @ dv >= 0:
                    continue
                s_min = min(h, -float(dx @ dv) / vv)
                if g(s_min) < 0 and g(0.0) > 0:
                    s = brentq(g, 0.0, s_min, xtol=1e-15)
                    if s < first:
                        first, pair = s, (i, k)
        x += v * first
        now += first
        if pair is not None:
            i, k = pair
            w = (x[i] - x[k]) / np.linalg.norm(x[i] - x[k])
            v[i], v[k] = collide(v[i], v[k], w)
    return x, v


def test_agreement_with_time_stepping_oracle():
    rng = make_rng(4)
    for _ in range(3):
        cfg = random_gas(10, 0.15, rng, box=0.8)
        tr = evolve(cfg, 0.3)
        xo, vo = time_stepping_oracle(np.array(cfg.positions), np.array(cfg.velocities), 0.15, 0.3)
        assert np.max(np.abs(tr.final.positions - xo)) < 1e-6
        assert np.max(np.abs(tr.final.velocities - vo)) < 1e-6


def test_reference_engine_matches_fast_engine():
    rng = make_rng(5)
    cfg = random_gas(15, 0.12, rng, torus=True)
    a = evolve(cfg, 0.5, engine="fast")
    b = evolve(cfg, 0.5, engine="reference")
    assert len(a.events) == len(b.events)
    assert np.max(np.abs(a.final.positions - b.final.positions)) < 1e-10


def test_replay_and_array_level_evolution():
    rng = make_rng(6)
    cfg = random_gas(12, 0.15, rng, torus=True)
    tr = evolve(cfg, 0.5)
    mid = tr.configuration_at(0.5)
    assert np.max(np.abs(cfg.domain.displacement(mid.positions, tr.final.positions))) < 1e-10
    x, v, ev = evolve_positions(np.array(cfg.positions), np.array(cfg.velocities), 0.15, 0.5, cfg.domain)
    assert len(ev) == len(tr.events)
    assert np.max(np.abs(cfg.domain.displacement(x, tr.final.positions))) < 1e-10
    # snapshots stay outside contact
    for s in np.linspace(0, 0.5, 6):
        Configuration(tr.configuration_at(s).positions, cfg.velocities, 0.15 * (1 - 1e-6), cfg.domain)


def test_trajectory_serialization(tmp_path):
    cfg = random_gas(4, 0.1, make_rng(7))
    tr = evolve(cfg, 0.2)
    assert '"events"' in tr.to_json()
    path = tmp_path / "snap.csv"
    tr.write_snapshots_csv(str(path), [0.0, 0.1, 0.2])
    assert len(path.read_text().splitlines()) == 1 + 3 * 4


def test_nonfinite_horizon_rejected():
    cfg = random_gas(2, 0.1, make_rng(8))
    with pytest.raises(ParameterError):
        evolve(cfg, float("inf"))
    assert evolve(cfg, 0.0).final is not None
