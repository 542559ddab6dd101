"""Top-k dot-product search over centroids, exact or through coarse cells, plus geo boxes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .clustering import CentroidSet
from .data import METERS_PER_DEGREE, LandmarkMetadata, make_rng

KMEANS_ITERATIONS = 10

Hit = Tuple[float, int, int]  # (similarity, landmark id, centroid row)


class EmptyScopeError(ValueError):
    pass


@dataclass
class CellTable:
    centers: np.ndarray  # (n_cells, d)
    assignment: np.ndarray  # cell of each centroid row
    n_probe: int

    def __post_init__(self):
        order = np.argsort(self.assignment, kind="stable")
        bounds = np.searchsorted(self.assignment[order], np.arange(len(self.centers) + 1))
        self.members = [order[bounds[c]:bounds[c + 1]] for c in range(len(self.centers))]


class CentroidIndex:
    """Immutable flat matrix of centroid vectors with optional coarse cells.

    Similarity is the raw dot product. Results are ordered by descending
    similarity, ties by lower landmark id and then lower row.
    """

    def __init__(self, vectors, landmark_ids, cluster_sizes=None, cells: Optional[CellTable] = None):
        V = np.asarray(vectors, dtype=np.float64)
        if V.ndim != 2 or V.shape[0] == 0:
            raise ValueError("index needs at least one centroid vector")
        self.vectors = V
        self.vectors.setflags(write=False)
        self.landmark_ids = np.asarray(landmark_ids, dtype=np.int64)
        self.landmark_ids.setflags(write=False)
        if self.landmark_ids.shape != (V.shape[0],):
            raise ValueError("one landmark id per centroid required")
        sizes = np.ones(V.shape[0], np.int64) if cluster_sizes is None else np.asarray(cluster_sizes, np.int64)
        self.cluster_sizes = sizes
        # position of each centroid among its landmark's centroids
        self.local_ids = np.zeros(V.shape[0], dtype=np.int64)
        seen: dict = {}
        for row, lid in enumerate(self.landmark_ids.tolist()):
            self.local_ids[row] = seen.get(lid, 0)
            seen[lid] = self.local_ids[row] + 1
        self.max_per_landmark = int(max(seen.values()))
        self.cells = cells

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def is_exact(self) -> bool:
        return self.cells is None

    def rows_for_landmarks(self, landmark_ids: Iterable[int]) -> np.ndarray:
        return np.flatnonzero(np.isin(self.landmark_ids, np.fromiter(landmark_ids, dtype=np.int64)))

    def candidates(self, query: np.ndarray, scope: Optional[np.ndarray] = None) -> np.ndarray:
        """Rows that a search for ``query`` would score."""
        if self.cells is None:
            rows = np.arange(len(self)) if scope is None else np.asarray(scope, dtype=np.int64)
        else:
            C = self.cells.centers
            d2 = np.einsum("ij,ij->i", C, C) - 2.0 * C @ query
            probe = self.cells.n_probe
            top = np.argpartition(d2, probe - 1)[:probe] if probe < len(d2) else np.arange(len(d2))
            rows = np.sort(np.concatenate([self.cells.members[c] for c in top]))
            if scope is not None:
                rows = np.intersect1d(rows, scope, assume_unique=False)
        return rows

    def search(self, query, k: int = 1, scope: Optional[Sequence[int]] = None) -> List[Hit]:
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise ValueError(f"query has dim {q.shape[0]}, index has {self.dim}")
        if k < 1:
            raise ValueError("k must be >= 1")
        if scope is not None:
            scope = np.unique(np.asarray(scope, dtype=np.int64))
            if scope.size == 0:
                raise EmptyScopeError("empty search scope")
        rows = self.candidates(q, scope)
        if rows.size == 0:
            return []
        sims = self.vectors[rows] @ q
        return _top_k(sims, rows, self.landmark_ids, k)

    def search_batch(self, queries, k: int = 1) -> List[List[Hit]]:
        # one matvec per query so scores are bit-identical to search()
        return [self.search(q, k) for q in np.atleast_2d(np.asarray(queries, dtype=np.float64))]


def _top_k(sims: np.ndarray, rows: np.ndarray, landmark_ids: np.ndarray, k: int) -> List[Hit]:
    if k < sims.size:
        kth = np.partition(sims, sims.size - k)[sims.size - k]
        keep = sims >= kth  # keeps every tie at the boundary
        sims, rows = sims[keep], rows[keep]
    order = np.lexsort((rows, landmark_ids[rows], -sims))[:k]
    return [(float(sims[i]), int(landmark_ids[rows[i]]), int(rows[i])) for i in order]


def search_topk(index: CentroidIndex, query, k: int = 1, scope=None) -> List[Hit]:
    return index.search(query, k, scope)


def build_exact_index(cset: CentroidSet) -> CentroidIndex:
    return CentroidIndex(cset.vectors, cset.landmark_ids, cset.cluster_sizes)


def kmeans_cells(vectors: np.ndarray, n_cells: int, seed: int = 0,
                 iterations: int = KMEANS_ITERATIONS) -> Tuple[np.ndarray, np.ndarray]:
    """Plain Lloyd iterations from ``n_cells`` distinct seeded rows; empty cells keep their centre."""
    V = np.asarray(vectors, dtype=np.float64)
    rng = make_rng(seed)
    centers = V[rng.choice(len(V), size=n_cells, replace=False)].copy()
    sq = np.einsum("ij,ij->i", V, V)

    def assign(C):
        d2 = sq[:, None] - 2.0 * V @ C.T + np.einsum("ij,ij->i", C, C)[None, :]
        return d2.argmin(axis=1)

    for _ in range(iterations):
        a = assign(centers)
        counts = np.bincount(a, minlength=n_cells)
        sums = np.zeros_like(centers)
        np.add.at(sums, a, V)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
    return centers, assign(centers)


def build_cell_index(cset: CentroidSet, n_cells: int, n_probe: int, seed: int = 0) -> CentroidIndex:
    """Inverted-cell index: centroids bucketed by nearest k-means cell, queries probe the top cells.

    Cells are probed in order of Euclidean distance from the query to the cell centre.
    """
    N = len(cset)
    if not 1 <= n_cells <= N:
        raise ValueError(f"n_cells must be in [1, {N}], got {n_cells}")
    if not 1 <= n_probe <= n_cells:
        raise ValueError(f"n_probe must be in [1, n_cells], got {n_probe}")
    centers, assignment = kmeans_cells(cset.vectors, n_cells, seed)
    return CentroidIndex(cset.vectors, cset.landmark_ids, cset.cluster_sizes,
                         CellTable(centers, assignment, n_probe))


# ---------------------------------------------------------------------------
# geography


def box_offsets_m(lat0: float, lon0: float, lat, lon) -> Tuple[np.ndarray, np.ndarray]:
    """Equirectangular (east, north) offsets in metres from ``(lat0, lon0)``."""
    dlon = (np.asarray(lon, dtype=np.float64) - lon0 + 180.0) % 360.0 - 180.0
    east = dlon * METERS_PER_DEGREE * np.cos(np.radians(lat0))
    north = (np.asarray(lat, dtype=np.float64) - lat0) * METERS_PER_DEGREE
    return east, north


def landmarks_in_box(metadata: Sequence[LandmarkMetadata], lat: float, lon: float,
                     edge_m: float = 1000.0) -> List[int]:
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        raise ValueError(f"invalid query location ({lat}, {lon})")
    if edge_m <= 0:
        raise ValueError("box edge must be > 0")
    if not metadata:
        return []
    east, north = box_offsets_m(lat, lon, [m.latitude for m in metadata], [m.longitude for m in metadata])
    half = edge_m / 2.0
    inside = (np.abs(east) <= half) & (np.abs(north) <= half)
    return [m.landmark_id for m, ok in zip(metadata, inside) if ok]


def geo_scope(index: CentroidIndex, metadata: Sequence[LandmarkMetadata], lat: float, lon: float,
              edge_m: float = 1000.0) -> np.ndarray:
    """Centroid rows whose landmark lies inside the square of side ``edge_m`` centred on the query."""
    return index.rows_for_landmarks(landmarks_in_box(metadata, lat, lon, edge_m))
