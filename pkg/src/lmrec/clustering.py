"""Threshold-cut agglomerative clustering and per-class centroid sets."""

from __future__ import annotations

import heapq
import os
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import pdist, squareform
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array

from .data import CodecError

LINKAGES = ("single", "complete", "average")
CENTROID_MAGIC = b"LMCT"
CELL_MAGIC = b"CELL"


@dataclass
class ClusteringConfig:
    linkage: str = "complete"
    distance_threshold: float = 10.0
    min_cluster_size: int = 50

    def __post_init__(self):
        if self.linkage not in LINKAGES:
            raise ValueError(f"linkage must be one of {LINKAGES}, got {self.linkage!r}")
        if not self.distance_threshold > 0:
            raise ValueError("distance_threshold must be > 0")
        if self.min_cluster_size < 1:
            raise ValueError("min_cluster_size must be >= 1")


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # per point, clusters numbered by their lowest member index
    merges: List[Tuple[int, int, float]]  # (cluster a, cluster b, height); merged id = n_points + step

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_clusters)

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)


def pairwise_distances(points) -> np.ndarray:
    """Euclidean distance matrix, zero diagonal, symmetric by construction."""
    P = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if P.shape[0] == 1:
        return np.zeros((1, 1))
    return squareform(pdist(P, "euclidean"))


def _relabel(parent_of_point: np.ndarray) -> np.ndarray:
    _, first, inverse = np.unique(parent_of_point, return_index=True, return_inverse=True)
    # order clusters by lowest member index
    rank = np.empty_like(first)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return rank[inverse]


def agglomerate(points, config: ClusteringConfig) -> ClusterAssignment:
    """Merge the closest pair of clusters until the closest pair is farther than the threshold.

    Lance-Williams updates on a distance matrix plus a lazy-deletion heap,
    O(n^2 log n). Equal distances merge the pair with the smallest
    ``(min id, max id)``; new clusters get ids ``n, n + 1, ...``.
    """
    P = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = P.shape[0]
    if n == 0:
        raise ValueError("agglomerate needs at least one point")
    D = pairwise_distances(P)
    slot_id = np.arange(n)  # cluster id currently held by each matrix slot
    slot_size = np.ones(n)
    alive = np.ones(n, dtype=bool)
    id_slot = {i: i for i in range(n)}
    iu = np.triu_indices(n, 1)
    heap = list(zip(D[iu].tolist(), iu[0].tolist(), iu[1].tolist()))
    heapq.heapify(heap)
    point_slot = np.arange(n)
    merges: List[Tuple[int, int, float]] = []
    next_id = n
    t = config.distance_threshold

    while heap:
        dist, a, b = heap[0]
        if dist > t:
            break
        heapq.heappop(heap)
        if a not in id_slot or b not in id_slot:
            continue
        sa, sb = id_slot.pop(a), id_slot.pop(b)
        merges.append((a, b, dist))
        na, nb = slot_size[sa], slot_size[sb]
        if config.linkage == "single":
            row = np.minimum(D[sa], D[sb])
        elif config.linkage == "complete":
            row = np.maximum(D[sa], D[sb])
        else:
            row = (na * D[sa] + nb * D[sb]) / (na + nb)
        alive[sb] = False
        D[sa] = row
        D[:, sa] = row
        D[sa, sa] = 0.0
        slot_size[sa] = na + nb
        slot_id[sa] = next_id
        id_slot[next_id] = sa
        point_slot[point_slot == sb] = sa
        others = np.flatnonzero(alive)
        others = others[others != sa]
        for s, d in zip(others.tolist(), row[others].tolist()):
            heapq.heappush(heap, (d, int(slot_id[s]), next_id))
        next_id += 1

    return ClusterAssignment(_relabel(point_slot), merges)


def select_valid_clusters(assignment: ClusterAssignment, min_cluster_size: int) -> List[int]:
    """Clusters strictly larger than ``min_cluster_size``, else the single largest (lowest id on ties)."""
    sizes = assignment.sizes()
    if sizes.size == 0:
        raise ValueError("empty assignment")
    valid = np.flatnonzero(sizes > min_cluster_size)
    if valid.size:
        return valid.tolist()
    return [int(np.argmax(sizes))]


def compute_class_centroids(clusters: Sequence[np.ndarray], embeddings) -> np.ndarray:
    """Arithmetic mean of each cluster's member embeddings."""
    E = np.asarray(embeddings, dtype=np.float64)
    out = []
    for members in clusters:
        members = np.asarray(members)
        if members.size == 0:
            raise ValueError("cannot take the centroid of an empty cluster")
        out.append(E[members].mean(axis=0))
    return np.asarray(out).reshape(len(out), E.shape[1])


@dataclass
class CentroidSet:
    vectors: np.ndarray  # (N, d)
    landmark_ids: np.ndarray  # (N,)
    cluster_sizes: np.ndarray  # (N,)

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        self.landmark_ids = np.asarray(self.landmark_ids, dtype=np.int64)
        self.cluster_sizes = np.asarray(self.cluster_sizes, dtype=np.int64)
        if not (len(self.vectors) == len(self.landmark_ids) == len(self.cluster_sizes)):
            raise ValueError("centroid arrays have different lengths")

    def __len__(self) -> int:
        return len(self.landmark_ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def centroids_per_landmark(self) -> dict:
        ids, counts = np.unique(self.landmark_ids, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))

    def multi_centroid_fraction(self) -> float:
        counts = np.array(list(self.centroids_per_landmark().values()))
        return float(np.mean(counts > 1)) if counts.size else 0.0


def build_centroid_set(embeddings, labels, n: int, config: ClusteringConfig) -> CentroidSet:
    """Cluster each landmark class separately and keep the centroids of its valid clusters.

    ``labels`` above ``n`` (the non-landmark class) are ignored.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    vecs, ids, sizes = [], [], []
    for label in range(1, n + 1):
        idx = np.flatnonzero(labels == label)
        if idx.size == 0:
            raise ValueError(f"landmark class {label} has no embeddings")
        assignment = agglomerate(E[idx], config)
        chosen = select_valid_clusters(assignment, config.min_cluster_size)
        members = [assignment.members(c) for c in chosen]
        vecs.append(compute_class_centroids(members, E[idx]))
        ids += [label] * len(chosen)
        sizes += [m.size for m in members]
    return CentroidSet(np.concatenate(vecs), ids, sizes)


def mean_centroid_set(embeddings, labels, n: int) -> CentroidSet:
    """One centroid per landmark over all of its embeddings (no clustering)."""
    E = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    vecs, sizes = [], []
    for label in range(1, n + 1):
        idx = np.flatnonzero(labels == label)
        if idx.size == 0:
            raise ValueError(f"landmark class {label} has no embeddings")
        vecs.append(E[idx].mean(axis=0))
        sizes.append(idx.size)
    return CentroidSet(np.asarray(vecs), np.arange(1, n + 1), sizes)


class ThresholdAgglomerativeClustering(ClusterMixin, BaseEstimator):
    """Agglomerative clustering cut at a fixed linkage distance.

    After ``fit``: ``labels_``, ``n_clusters_`` and ``merges_`` (the
    dendrogram up to the cut, as ``(a, b, height)``).
    """

    def __init__(self, linkage="complete", distance_threshold=10.0):
        self.linkage = linkage
        self.distance_threshold = distance_threshold

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        cfg = ClusteringConfig(self.linkage, self.distance_threshold, 1)
        assignment = agglomerate(X, cfg)
        self.labels_ = assignment.labels
        self.n_clusters_ = assignment.n_clusters
        self.merges_ = assignment.merges
        self.n_features_in_ = X.shape[1]
        return self


# ---------------------------------------------------------------------------
# centroid file: "LMCT", u32 dim, u64 N, N x (u32 landmark_id, u32 cluster_size, dim x f32)
# optional trailer: "CELL", u32 n_cells, u32 n_probe, n_cells x dim f32 centers, N x u32 cell

_CT_HEADER = struct.Struct("<4sIQ")


def write_centroids(path: str | os.PathLike, cset: CentroidSet,
                    cells: Optional[Tuple[np.ndarray, np.ndarray, int]] = None) -> None:
    """Write a centroid file; ``cells`` is ``(cell_centers, cell_of_centroid, n_probe)``."""
    N, dim = len(cset), cset.dim
    rec = np.dtype([("id", "<u4"), ("size", "<u4"), ("vec", "<f4", (dim,))])
    arr = np.zeros(N, dtype=rec)
    arr["id"], arr["size"], arr["vec"] = cset.landmark_ids, cset.cluster_sizes, cset.vectors
    parts = [_CT_HEADER.pack(CENTROID_MAGIC, dim, N), arr.tobytes()]
    if cells is not None:
        centers, assign, n_probe = cells
        centers = np.asarray(centers)
        parts.append(CELL_MAGIC + struct.pack("<II", centers.shape[0], n_probe))
        parts.append(np.ascontiguousarray(centers, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(assign, dtype="<u4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_centroids(path: str | os.PathLike):
    """Return ``(CentroidSet, cells or None)``; vectors come back as float64 of the stored float32."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _CT_HEADER.size:
        raise CodecError("truncated header")
    magic, dim, N = _CT_HEADER.unpack_from(buf)
    if magic != CENTROID_MAGIC:
        raise CodecError(f"bad magic {magic!r}")
    rec = np.dtype([("id", "<u4"), ("size", "<u4"), ("vec", "<f4", (dim,))])
    off = _CT_HEADER.size
    end = off + rec.itemsize * N
    if len(buf) < end:
        raise CodecError("truncated payload")
    arr = np.frombuffer(buf, dtype=rec, count=N, offset=off)
    cset = CentroidSet(arr["vec"].astype(np.float64).reshape(N, dim), arr["id"], arr["size"])
    if len(buf) == end:
        return cset, None
    if buf[end:end + 4] != CELL_MAGIC or len(buf) < end + 12:
        raise CodecError("dim/count mismatch: unexpected bytes after centroid records")
    n_cells, n_probe = struct.unpack_from("<II", buf, end + 4)
    off = end + 12
    need = off + 4 * n_cells * dim + 4 * N
    if len(buf) != need:
        raise CodecError("truncated cell table" if len(buf) < need else "trailing bytes after cell table")
    centers = np.frombuffer(buf, dtype="<f4", count=n_cells * dim, offset=off).reshape(n_cells, dim)
    assign = np.frombuffer(buf, dtype="<u4", count=N, offset=off + 4 * n_cells * dim)
    return cset, (centers.astype(np.float64), assign.astype(np.int64), n_probe)
