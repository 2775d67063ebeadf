"""Shared domain types, scaling parameters, initial densities and sampling primitives."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

# relative slack used when a distance is meant to be exactly epsilon (contacts, creations)
CONTACT_RTOL = 1e-9


class ParameterError(ValueError):
    """Raised when an input violates a documented precondition."""


# --------------------------------------------------------------------------- randomness


def make_rng(seed: int | None, *keys: int) -> np.random.Generator:
    """Independent generator for the stream identified by ``(seed, *keys)``.

    Streams with different key tuples are statistically independent, so work can be
    split per configuration or per worker without sharing state.
    """
    seq = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(seq))


def sample_maxwellian(beta: float, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Velocities with density proportional to exp(-beta |v|^2 / 2)."""
    if not beta > 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    shape = (3,) if size is None else (size, 3)
    return rng.normal(0.0, 1.0 / math.sqrt(beta), size=shape)


def maxwellian_density(v: np.ndarray, beta: float) -> np.ndarray:
    """Normalized Maxwellian M_beta(v) evaluated on the last axis."""
    v = np.asarray(v, dtype=float)
    return (beta / (2 * math.pi)) ** 1.5 * np.exp(-0.5 * beta * np.sum(v * v, axis=-1))


# --------------------------------------------------------------------------- domains


@dataclass(frozen=True)
class FreeSpace:
    """All of R^3; the initial spatial density must have compact support."""

    kind: str = field(default="free", init=False)

    def displacement(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.asarray(a, dtype=float) - np.asarray(b, dtype=float)

    def wrap(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float)

    @property
    def volume(self) -> float:
        return math.inf


@dataclass(frozen=True)
class Torus:
    """Periodic box [0, L1) x [0, L2) x [0, L3) with the minimum-image metric."""

    L: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = field(default="torus", init=False)

    def __post_init__(self) -> None:
        L = tuple(float(s) for s in np.broadcast_to(np.asarray(self.L, dtype=float), (3,)))
        if min(L) <= 0:
            raise ParameterError(f"torus side lengths must be positive, got {L}")
        object.__setattr__(self, "L", L)

    @property
    def sides(self) -> np.ndarray:
        return np.array(self.L)

    def displacement(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        L = self.sides
        return d - L * np.rint(d / L)

    def wrap(self, x: np.ndarray) -> np.ndarray:
        L = self.sides
        y = np.mod(np.asarray(x, dtype=float), L)
        # np.mod can return exactly L for tiny negative inputs
        return np.where(y >= L, 0.0, y)

    @property
    def volume(self) -> float:
        return float(np.prod(self.L))


Domain = FreeSpace | Torus


def distance(domain: Domain, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(domain.displacement(a, b), axis=-1)


def domain_from_mapping(m: Mapping[str, Any]) -> Domain:
    kind = m.get("kind", "torus")
    if kind == "torus":
        return Torus(tuple(np.broadcast_to(np.asarray(m.get("L", 1.0), dtype=float), (3,))))
    if kind == "free":
        return FreeSpace()
    raise ParameterError(f"unknown domain kind {kind!r}")


def domain_to_mapping(domain: Domain) -> dict[str, Any]:
    if isinstance(domain, Torus):
        return {"kind": "torus", "L": list(domain.L)}
    return {"kind": "free"}


# --------------------------------------------------------------------------- particles


@dataclass(frozen=True)
class Particle:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        x = np.array(self.x, dtype=float).reshape(3)
        v = np.array(self.v, dtype=float).reshape(3)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise ParameterError("particle state must be finite")
        x.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)


def close_pairs(positions: np.ndarray, r: float, domain: Domain) -> np.ndarray:
    """All index pairs (i < j) at distance strictly below ``r``; shape (m, 2)."""
    x = np.asarray(positions, dtype=float)
    n = len(x)
    if n < 2:
        return np.empty((0, 2), dtype=int)
    if n <= 64:
        i, j = np.triu_indices(n, 1)
        d = distance(domain, x[i], x[j])
        keep = d < r
        return np.stack([i[keep], j[keep]], axis=1)
    if isinstance(domain, Torus):
        tree = cKDTree(domain.wrap(x), boxsize=domain.sides)
    else:
        tree = cKDTree(x)
    pairs = tree.query_pairs(r, output_type="ndarray")
    if len(pairs) == 0:
        return np.empty((0, 2), dtype=int)
    d = distance(domain, x[pairs[:, 0]], x[pairs[:, 1]])
    return pairs[d < r]


def min_pair_distance(positions: np.ndarray, domain: Domain) -> float:
    x = np.asarray(positions, dtype=float)
    if len(x) < 2:
        return math.inf
    if len(x) <= 256:
        i, j = np.triu_indices(len(x), 1)
        return float(distance(domain, x[i], x[j]).min())
    if isinstance(domain, Torus):
        tree = cKDTree(domain.wrap(x), boxsize=domain.sides)
        d, _ = tree.query(domain.wrap(x), k=2)
    else:
        tree = cKDTree(x)
        d, _ = tree.query(x, k=2)
    return float(d[:, 1].min())


@dataclass(frozen=True)
class Configuration:
    """Hard spheres of diameter ``epsilon``: positions and velocities, shape (n, 3).

    Construction checks membership in the non-overlapping phase space; pairs at
    distance epsilon up to a relative ``CONTACT_RTOL`` are accepted as touching.
    Pass ``check=False`` to hold an arbitrary (possibly overlapping) candidate.
    """

    positions: np.ndarray
    velocities: np.ndarray
    epsilon: float
    domain: Domain = field(default_factory=Torus)
    check: bool = True

    def __post_init__(self) -> None:
        x = np.array(self.positions, dtype=float).reshape(-1, 3)
        v = np.array(self.velocities, dtype=float).reshape(-1, 3)
        if x.shape != v.shape:
            raise ParameterError("positions and velocities must have the same shape")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise ParameterError("configuration must be finite")
        x.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "velocities", v)
        if self.check:
            dmin = min_pair_distance(x, self.domain)
            if dmin < self.epsilon * (1 - CONTACT_RTOL):
                raise ParameterError(
                    f"overlapping spheres: minimum distance {dmin:.6g} < epsilon {self.epsilon:.6g}"
                )

    @classmethod
    def from_particles(
        cls, particles: Sequence[Particle], epsilon: float, domain: Domain | None = None
    ) -> Configuration:
        x = np.array([p.x for p in particles]).reshape(-1, 3)
        v = np.array([p.v for p in particles]).reshape(-1, 3)
        return cls(x, v, epsilon, domain if domain is not None else FreeSpace())

    @property
    def n(self) -> int:
        return len(self.positions)

    def __len__(self) -> int:
        return self.n

    @property
    def particles(self) -> list[Particle]:
        return [Particle(x, v) for x, v in zip(self.positions, self.velocities)]

    def replace(
        self, positions: np.ndarray | None = None, velocities: np.ndarray | None = None, check: bool = False
    ) -> Configuration:
        return Configuration(
            self.positions if positions is None else positions,
            self.velocities if velocities is None else velocities,
            self.epsilon,
            self.domain,
            check=check,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "epsilon": self.epsilon,
            "domain": domain_to_mapping(self.domain),
            "positions": self.positions.tolist(),
            "velocities": self.velocities.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Configuration:
        return cls(
            np.asarray(d["positions"], dtype=float).reshape(-1, 3),
            np.asarray(d["velocities"], dtype=float).reshape(-1, 3),
            float(d["epsilon"]),
            domain_from_mapping(d["domain"]),
        )


def exclusion_indicator(
    cfg: Configuration | np.ndarray, epsilon: float | None = None, domain: Domain | None = None
) -> bool:
    """True iff every pair is at distance strictly greater than epsilon."""
    if isinstance(cfg, Configuration):
        x, epsilon, domain = cfg.positions, cfg.epsilon, cfg.domain
    else:
        x = np.asarray(cfg, dtype=float).reshape(-1, 3)
        if epsilon is None:
            raise ParameterError("epsilon is required for raw positions")
        domain = domain if domain is not None else FreeSpace()
    return min_pair_distance(x, domain) > epsilon


# --------------------------------------------------------------------------- parameters


@dataclass(frozen=True)
class SimParams:
    """Boltzmann-Grad scaling: mu_eps * epsilon**2 = 1 / lambda_mfp."""

    epsilon: float
    beta: float = 1.0
    z: float | None = None
    domain: Domain = field(default_factory=Torus)
    lambda_mfp: float = 1.0

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")
        if not self.beta > 0:
            raise ParameterError(f"beta must be positive, got {self.beta}")
        if not self.lambda_mfp > 0:
            raise ParameterError(f"lambda_mfp must be positive, got {self.lambda_mfp}")

    @property
    def mu_eps(self) -> float:
        return 1.0 / (self.lambda_mfp * self.epsilon**2)

    def with_epsilon(self, epsilon: float) -> SimParams:
        return SimParams(epsilon, self.beta, self.z, self.domain, self.lambda_mfp)

    def to_mapping(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "epsilon": self.epsilon,
            "beta": self.beta,
            "lambda_mfp": self.lambda_mfp,
            "domain": domain_to_mapping(self.domain),
        }
        if self.z is not None:
            out["z"] = self.z
        return out

    @classmethod
    def from_mapping(cls, m: Mapping[str, Any]) -> SimParams:
        return cls(
            epsilon=float(m["epsilon"]),
            beta=float(m.get("beta", 1.0)),
            z=None if m.get("z") is None else float(m["z"]),
            domain=domain_from_mapping(m.get("domain", {"kind": "torus", "L": 1.0})),
            lambda_mfp=float(m.get("lambda_mfp", 1.0)),
        )


# --------------------------------------------------------------------------- initial densities

_H_KINDS = ("uniform", "cosine", "box", "bump")


@dataclass(frozen=True)
class InitialDensity:
    """f0(x, v) = rho(x) M_beta(v) with rho a probability density in space.

    Spatial kinds (``params`` in brackets):

    * ``uniform`` - constant on a torus.
    * ``cosine`` - ``(1 + a cos(2 pi m x_axis / L_axis)) / V`` on a torus [a, m, axis].
    * ``box`` - uniform on an axis-aligned box [lo, hi].
    * ``bump`` - ``(1 - |x - c|^2 / R^2)^2`` on a ball, normalized [center, radius].

    Writing ``f0 = (h / 2) exp(-beta v^2 / 2)`` defines the weight ``h``; its supremum is
    the density amplitude ``z`` of the exclusion bound.
    """

    kind: str = "uniform"
    params: Mapping[str, Any] = field(default_factory=dict)
    beta: float = 1.0
    domain: Domain = field(default_factory=Torus)

    def __post_init__(self) -> None:
        if self.kind not in _H_KINDS:
            raise ParameterError(f"unknown spatial density kind {self.kind!r}; expected one of {_H_KINDS}")
        if not self.beta > 0:
            raise ParameterError(f"beta must be positive, got {self.beta}")
        object.__setattr__(self, "params", dict(self.params))
        if self.kind in ("uniform", "cosine") and not isinstance(self.domain, Torus):
            raise ParameterError(f"spatial density {self.kind!r} needs a torus")
        if self.kind == "cosine" and not abs(float(self.params.get("a", 0.5))) < 1:
            raise ParameterError("cosine modulation needs |a| < 1")
        if self.kind == "box":
            lo, hi = self._box()
            if np.any(hi <= lo):
                raise ParameterError("box needs lo < hi componentwise")
            if isinstance(self.domain, Torus) and (np.any(lo < 0) or np.any(hi > self.domain.sides)):
                raise ParameterError("box must lie inside the torus cell")
        if self.kind == "bump" and not float(self.params.get("radius", 0.5)) > 0:
            raise ParameterError("bump radius must be positive")

    # -- helpers
    def _box(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.broadcast_to(np.asarray(self.params.get("lo", 0.0), dtype=float), (3,))
        hi = np.broadcast_to(np.asarray(self.params.get("hi", 1.0), dtype=float), (3,))
        return lo, hi

    @property
    def _bump_norm(self) -> float:
        # integral of (1 - r^2/R^2)^2 over the ball = 32 pi R^3 / 105
        R = float(self.params.get("radius", 0.5))
        return 32 * math.pi * R**3 / 105

    @property
    def spatial_sup(self) -> float:
        if self.kind == "uniform":
            return 1.0 / self.domain.volume
        if self.kind == "cosine":
            return (1 + abs(float(self.params.get("a", 0.5)))) / self.domain.volume
        if self.kind == "box":
            lo, hi = self._box()
            return 1.0 / float(np.prod(hi - lo))
        return 1.0 / self._bump_norm

    @property
    def amplitude(self) -> float:
        """sup of h where f0 = (h/2) exp(-beta v^2/2)."""
        return 2 * self.spatial_sup * (self.beta / (2 * math.pi)) ** 1.5

    # -- evaluation
    def spatial(self, x: np.ndarray) -> np.ndarray:
        x = self.domain.wrap(np.asarray(x, dtype=float))
        if self.kind == "uniform":
            return np.full(x.shape[:-1], 1.0 / self.domain.volume)
        if self.kind == "cosine":
            a = float(self.params.get("a", 0.5))
            m = int(self.params.get("m", 1))
            ax = int(self.params.get("axis", 0))
            L = self.domain.sides[ax]
            return (1 + a * np.cos(2 * math.pi * m * x[..., ax] / L)) / self.domain.volume
        if self.kind == "box":
            lo, hi = self._box()
            inside = np.all((x >= lo) & (x <= hi), axis=-1)
            return np.where(inside, self.spatial_sup, 0.0)
        c = np.broadcast_to(np.asarray(self.params.get("center", 0.0), dtype=float), (3,))
        R = float(self.params.get("radius", 0.5))
        r2 = np.sum(self.domain.displacement(x, c) ** 2, axis=-1) / R**2
        return np.where(r2 < 1, (1 - r2) ** 2, 0.0) / self._bump_norm

    def __call__(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.spatial(x) * maxwellian_density(v, self.beta)

    def h(self, x: np.ndarray) -> np.ndarray:
        return 2 * self.spatial(x) * (self.beta / (2 * math.pi)) ** 1.5

    # -- sampling
    def sample_positions(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.random((size, 3)) * self.domain.sides
        if self.kind == "box":
            lo, hi = self._box()
            return lo + rng.random((size, 3)) * (hi - lo)
        out = np.empty((0, 3))
        while len(out) < size:
            need = size - len(out)
            batch = max(16, int(need * 1.5) + 8)
            if self.kind == "cosine":
                cand = rng.random((batch, 3)) * self.domain.sides
            else:
                c = np.broadcast_to(np.asarray(self.params.get("center", 0.0), dtype=float), (3,))
                R = float(self.params.get("radius", 0.5))
                cand = c + (2 * rng.random((batch, 3)) - 1) * R
            keep = rng.random(batch) * self.spatial_sup < self.spatial(cand)
            out = np.concatenate([out, cand[keep]])
        return self.domain.wrap(out[:size])

    def sample(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        return self.sample_positions(rng, size), sample_maxwellian(self.beta, rng, size)

    def support_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box containing the spatial support."""
        if isinstance(self.domain, Torus) and self.kind in ("uniform", "cosine"):
            return np.zeros(3), self.domain.sides
        if self.kind == "box":
            return self._box()
        c = np.broadcast_to(np.asarray(self.params.get("center", 0.0), dtype=float), (3,))
        R = float(self.params.get("radius", 0.5))
        return c - R, c + R

    def to_mapping(self) -> dict[str, Any]:
        return {"kind": self.kind, "params": _jsonable(self.params)}

    @classmethod
    def from_mapping(cls, m: Mapping[str, Any], beta: float, domain: Domain) -> InitialDensity:
        return cls(m.get("kind", "uniform"), dict(m.get("params", {})), beta, domain)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def check_density_bound(params: SimParams, f0: InitialDensity) -> None:
    """Raise if f0 exceeds (z/2) exp(-beta v^2/2) for the configured amplitude z."""
    if params.z is not None and f0.amplitude > params.z * (1 + 1e-12):
        raise ParameterError(
            f"initial density amplitude {f0.amplitude:.6g} exceeds configured z={params.z:.6g}"
        )


# --------------------------------------------------------------------------- estimators


@dataclass(frozen=True)
class EstimatorResult:
    """Monte Carlo mean with standard error (sample sd / sqrt(n))."""

    mean: float
    stderr: float
    n_samples: int
    seed: int | None = None

    @classmethod
    def from_samples(cls, values: Iterable[float] | np.ndarray, seed: int | None = None) -> EstimatorResult:
        a = np.asarray(values, dtype=float).ravel()
        n = a.size
        if n == 0:
            return cls(math.nan, math.nan, 0, seed)
        sd = float(a.std(ddof=1)) if n > 1 else 0.0
        return cls(float(a.mean()), sd / math.sqrt(n), n, seed)

    @classmethod
    def exact(cls, value: float, seed: int | None = None) -> EstimatorResult:
        return cls(float(value), 0.0, 1, seed)

    def __add__(self, other: EstimatorResult) -> EstimatorResult:
        # independent estimates: errors add in quadrature
        return EstimatorResult(
            self.mean + other.mean,
            math.hypot(self.stderr, other.stderr),
            self.n_samples + other.n_samples,
            self.seed,
        )

    def __sub__(self, other: EstimatorResult) -> EstimatorResult:
        return EstimatorResult(
            self.mean - other.mean,
            math.hypot(self.stderr, other.stderr),
            self.n_samples + other.n_samples,
            self.seed,
        )

    def scaled(self, c: float) -> EstimatorResult:
        return EstimatorResult(self.mean * c, self.stderr * abs(c), self.n_samples, self.seed)

    def z_score(self, target: float = 0.0) -> float:
        if self.stderr == 0:
            return 0.0 if self.mean == target else math.inf
        return (self.mean - target) / self.stderr

    def to_dict(self) -> dict[str, Any]:
        return {"mean": self.mean, "stderr": self.stderr, "n_samples": self.n_samples, "seed": self.seed}


@dataclass
class Accumulator:
    """Streaming count / sum / sum-of-squares; merging is associative and commutative."""

    count: int = 0
    total: float = 0.0
    total_sq: float = 0.0

    def add(self, values: Iterable[float] | np.ndarray) -> None:
        a = np.asarray(values, dtype=float).ravel()
        self.count += a.size
        self.total += float(a.sum())
        self.total_sq += float((a * a).sum())

    def merge(self, other: Accumulator) -> Accumulator:
        return Accumulator(self.count + other.count, self.total + other.total, self.total_sq + other.total_sq)

    def result(self, seed: int | None = None) -> EstimatorResult:
        if self.count == 0:
            return EstimatorResult(math.nan, math.nan, 0, seed)
        mean = self.total / self.count
        if self.count < 2:
            return EstimatorResult(mean, 0.0, self.count, seed)
        var = max(self.total_sq - self.count * mean * mean, 0.0) / (self.count - 1)
        return EstimatorResult(mean, math.sqrt(var / self.count), self.count, seed)


# --------------------------------------------------------------------------- config files


def load_config(path: str) -> dict[str, Any]:
    """Read a TOML (or JSON, by extension) config into a plain mapping."""
    if str(path).endswith(".json"):
        import json

        with open(path) as fh:
            return json.load(fh)
    try:
        import tomllib  # type: ignore[import-not-found]
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def params_from_config(cfg: Mapping[str, Any]) -> tuple[SimParams, InitialDensity, int | None]:
    """Build (SimParams, InitialDensity, seed) from keys epsilon, z, beta, domain.*, h.*, seed."""
    params = SimParams.from_mapping(cfg)
    f0 = InitialDensity.from_mapping(cfg.get("h", {"kind": "uniform"}), params.beta, params.domain)
    check_density_bound(params, f0)
    seed = cfg.get("seed")
    return params, f0, None if seed is None else int(seed)


def config_to_mapping(params: SimParams, f0: InitialDensity, seed: int | None) -> dict[str, Any]:
    out = params.to_mapping()
    out["h"] = f0.to_mapping()
    if seed is not None:
        out["seed"] = seed
    return out
