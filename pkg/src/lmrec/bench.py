"""Per-query search timing: centroid index against an exhaustive full-database scan."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from .clustering import CentroidSet
from .data import make_rng
from .index import CentroidIndex


@dataclass
class SearchTiming:
    name: str
    stored_elements: int
    scanned_per_query: float
    seconds_per_query: Tuple[float, float, float]  # min, median, max over repetitions

    @property
    def median(self) -> float:
        return self.seconds_per_query[1]


@dataclass
class BenchReport:
    centroid: SearchTiming
    baseline: SearchTiming

    @property
    def speedup(self) -> float:
        return self.baseline.median / self.centroid.median

    @property
    def element_ratio(self) -> float:
        return self.baseline.stored_elements / self.centroid.stored_elements

    def as_dict(self) -> Dict[str, float]:
        out: Dict[str, float] = {}
        for t in (self.centroid, self.baseline):
            out[f"{t.name}.stored_elements"] = t.stored_elements
            out[f"{t.name}.scanned_per_query"] = t.scanned_per_query
            lo, med, hi = t.seconds_per_query
            out[f"{t.name}.seconds_per_query.min"] = lo
            out[f"{t.name}.seconds_per_query.median"] = med
            out[f"{t.name}.seconds_per_query.max"] = hi
        out["speedup"] = self.speedup
        out["element_ratio"] = self.element_ratio
        return out


def _time_index(name: str, index: CentroidIndex, queries: np.ndarray, repetitions: int, k: int) -> SearchTiming:
    scanned = float(np.mean([len(index.candidates(q)) for q in queries]))
    for q in queries[: min(len(queries), 10)]:  # warm-up, not timed
        index.search(q, k)
    per_query: List[float] = []
    for _ in range(repetitions):
        start = time.perf_counter()
        for q in queries:
            index.search(q, k)
        per_query.append((time.perf_counter() - start) / len(queries))
    return SearchTiming(name, len(index), scanned, (min(per_query), float(np.median(per_query)), max(per_query)))


def benchmark_search(queries, centroid_index: CentroidIndex, full_index: CentroidIndex,
                     repetitions: int = 5, k: int = 1) -> BenchReport:
    """Median single-threaded wall time per query for both indexes, one query at a time."""
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if Q.shape[0] == 0:
        raise ValueError("empty query set")
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    if centroid_index.dim != full_index.dim:
        raise ValueError("indexes have different dimensions")
    with threadpool_limits(limits=1):
        cen = _time_index("centroids", centroid_index, Q, repetitions, k)
        base = _time_index("full_database", full_index, Q, repetitions, k)
    return BenchReport(cen, base)


def synthetic_database(n_landmarks: int = 1000, per_landmark: int = 200, dim: int = 32,
                       noise: float = 0.3, seed: int = 0):
    """Grouped embedding database plus its per-landmark mean centroids.

    Returns ``(database vectors, database labels, CentroidSet)``.
    """
    rng = make_rng(seed)
    centers = rng.normal(0.0, 1.0, (n_landmarks, dim))
    labels = np.repeat(np.arange(1, n_landmarks + 1), per_landmark)
    db = centers[labels - 1] + rng.normal(0.0, noise, (labels.size, dim))
    sums = np.zeros((n_landmarks, dim))
    np.add.at(sums, labels - 1, db)
    cset = CentroidSet(sums / per_landmark, np.arange(1, n_landmarks + 1), np.full(n_landmarks, per_landmark))
    return db, labels, cset


def synthetic_queries(db: np.ndarray, n_queries: int, noise: float = 0.3, seed: int = 1) -> np.ndarray:
    rng = make_rng(seed)
    picks = rng.integers(0, len(db), n_queries)
    return db[picks] + rng.normal(0.0, noise, (n_queries, db.shape[1]))
