"""Particle ensembles reduced to per-configuration cell counts (the raw data of the scans)."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Sequence

import numpy as np

from .chaos import GrandCanonicalSpec, PhaseCell, sample_arrays
from .core import make_rng
from .dynamics import SingularEventError, evolve_positions


def count_chunk(args: tuple) -> tuple[np.ndarray, int]:
    """Counts for configurations start..stop-1; configuration k uses make_rng(seed, e, k, attempt)."""
    gspec, t, cells, seed, e_index, start, stop = args
    counts = np.zeros((stop - start, len(cells)))
    resampled = 0
    dom = gspec.params.domain
    eps = gspec.params.epsilon
    for row, k in enumerate(range(start, stop)):
        attempt = 0
        while True:
            rng = make_rng(seed, e_index, k, attempt)
            x, v = sample_arrays(gspec, rng)
            try:
                if t > 0 and len(x) > 1:
                    x, v, _ = evolve_positions(x, v, eps, t, dom)
                break
            except SingularEventError:
                attempt += 1
                resampled += 1
        x = dom.wrap(x)
        counts[row] = [np.count_nonzero(c.contains(x, v)) for c in cells]
    return counts, resampled


def simulate_counts(gspec: GrandCanonicalSpec, t: float, cells: Sequence[PhaseCell], size: int, seed: int,
                    e_index: int, threads: int = 1, chunk: int = 2000) -> tuple[np.ndarray, int]:
    """(size, len(cells)) counts and the number of redraws after singular events."""
    jobs = [(gspec, t, list(cells), seed, e_index, a, min(a + chunk, size)) for a in range(0, size, chunk)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(count_chunk, jobs))
    else:
        parts = [count_chunk(j) for j in jobs]
    return np.concatenate([p[0] for p in parts]), sum(p[1] for p in parts)
