"""Threshold-gated centroid inference and reference-based database cleaning."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .clustering import ClusteringConfig, build_centroid_set, mean_centroid_set
from .data import LandmarkMetadata
from .index import CentroidIndex, build_cell_index, build_exact_index, geo_scope

log = logging.getLogger(__name__)

VERIFY_MODES = ("no_geo", "always", "never")


@dataclass
class InferenceConfig:
    eta: float = 0.0
    eta_geo: Optional[float] = None  # threshold inside a geo box; defaults to eta
    omega: float = 0.0
    k: int = 1
    geo_box_edge: float = 1000.0
    verify: str = "no_geo"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.verify not in VERIFY_MODES:
            raise ValueError(f"verify must be one of {VERIFY_MODES}")
        if self.geo_box_edge <= 0:
            raise ValueError("geo_box_edge must be > 0")
        for name in ("eta", "omega"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.eta_geo is not None and not np.isfinite(self.eta_geo):
            raise ValueError("eta_geo must be finite")


@dataclass(frozen=True)
class Recognition:
    landmark_id: int
    name: str
    city: str
    similarity: float


@dataclass(frozen=True)
class RecognitionResult:
    """Empty ``hits`` means the query was judged a non-landmark."""

    hits: Tuple[Recognition, ...] = ()

    @property
    def is_landmark(self) -> bool:
        return bool(self.hits)

    @property
    def top(self) -> Optional[int]:
        return self.hits[0].landmark_id if self.hits else None

    def landmark_ids(self) -> List[int]:
        return [h.landmark_id for h in self.hits]


NON_LANDMARK = RecognitionResult()


def references_centroid(reference_embeddings) -> np.ndarray:
    R = np.atleast_2d(np.asarray(reference_embeddings, dtype=np.float64))
    if R.shape[0] == 0:
        raise ValueError("need at least one reference embedding")
    return R.mean(axis=0)


def verify_references(reference_embeddings, query, omega: float) -> bool:
    """True iff the mean dot product of ``query`` with the references exceeds ``omega``."""
    R = np.atleast_2d(np.asarray(reference_embeddings, dtype=np.float64))
    if R.shape[0] == 0:
        raise ValueError("need at least one reference embedding")
    return float(np.mean(R @ np.asarray(query, dtype=np.float64))) > omega


def clean_dataset(embeddings, reference_embeddings, gamma: float) -> np.ndarray:
    """Per-element accept flags: reject iff dot(references centroid, embedding) < gamma."""
    c = references_centroid(reference_embeddings)
    sims = np.atleast_2d(np.asarray(embeddings, dtype=np.float64)) @ c
    return sims >= gamma


def _metadata_lookup(metadata) -> Dict[int, LandmarkMetadata]:
    if metadata is None:
        return {}
    if isinstance(metadata, Mapping):
        return dict(metadata)
    return {m.landmark_id: m for m in metadata}


def infer(
    query,
    index: CentroidIndex,
    references: Mapping[int, np.ndarray],
    metadata: Mapping[int, LandmarkMetadata],
    config: InferenceConfig,
    location: Optional[Tuple[float, float]] = None,
) -> RecognitionResult:
    """Recognise landmarks for one query embedding.

    With a ``(lat, lon)`` location the search is restricted to centroids of
    landmarks inside the geo box and ``eta_geo`` gates; otherwise the whole
    index is searched with ``eta``. Candidates are the top ``k`` landmarks
    (best centroid per landmark) at or above the gate, all forced into the
    city of the best one. Reference verification runs on the no-geo path
    unless ``config.verify`` says otherwise.
    """
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    scope = None
    eta = config.eta
    if location is not None:
        if not metadata:
            raise ValueError("geo-scoped inference needs landmark metadata")
        scope = geo_scope(index, list(metadata.values()), location[0], location[1], config.geo_box_edge)
        if scope.size == 0:
            return NON_LANDMARK
        if config.eta_geo is not None:
            eta = config.eta_geo
    # the k-th best landmark's best centroid ranks within the top (k - 1) * v + 1 rows
    hits = index.search(q, (config.k - 1) * index.max_per_landmark + 1, scope)

    best: Dict[int, float] = {}
    for sim, lid, _ in hits:
        if lid not in best:
            best[lid] = sim
    if not best or next(iter(best.values())) < eta:
        return NON_LANDMARK
    candidates = [(lid, sim) for lid, sim in best.items() if sim >= eta][: config.k]

    def city_of(lid: int) -> str:
        m = metadata.get(lid)
        return m.city if m is not None else ""

    city = city_of(candidates[0][0])
    verify = config.verify == "always" or (config.verify == "no_geo" and location is None)
    out = []
    for lid, sim in candidates:
        if verify:
            refs = references.get(lid)
            if refs is None or len(refs) == 0:
                log.warning("landmark %d has no references; verification fails", lid)
                continue
            if not verify_references(refs, q, config.omega):
                continue
        if city_of(lid) != city:
            continue
        m = metadata.get(lid)
        out.append(Recognition(lid, m.name if m else str(lid), city, sim))
    return RecognitionResult(tuple(out))


def max_similarity(index: CentroidIndex, queries) -> np.ndarray:
    """Ungated best similarity per query, the score thresholds are calibrated on."""
    return np.array([hits[0][0] for hits in index.search_batch(queries, 1)])


def format_result(query_id, result: RecognitionResult) -> str:
    if not result.is_landmark:
        return f"{query_id}\tNONLANDMARK"
    parts = [str(query_id)]
    for h in result.hits:
        parts += [str(h.landmark_id), h.name, h.city, repr(h.similarity)]
    return "\t".join(parts)


def parse_result(line: str) -> Tuple[str, RecognitionResult]:
    cols = line.rstrip("\n").split("\t")
    qid = cols[0]
    if cols[1:] == ["NONLANDMARK"]:
        return qid, NON_LANDMARK
    rest = cols[1:]
    if not rest or len(rest) % 4:
        raise ValueError(f"malformed result line: {line!r}")
    hits = tuple(
        Recognition(int(rest[i]), rest[i + 1], rest[i + 2], float(rest[i + 3])) for i in range(0, len(rest), 4)
    )
    return qid, RecognitionResult(hits)


def group_references(embeddings, labels) -> Dict[int, np.ndarray]:
    E = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    return {int(lid): E[labels == lid] for lid in np.unique(labels)}


class LandmarkRecognizer(ClassifierMixin, BaseEstimator):
    """Nearest-centroid landmark recogniser over embeddings.

    ``fit`` clusters each landmark's embeddings and indexes the centroids of
    the valid clusters (or one mean centroid per landmark with
    ``single_centroid=True``). ``predict`` returns the top landmark id, or
    ``n + 1`` for non-landmark verdicts.
    """

    def __init__(
        self,
        linkage="complete",
        distance_threshold=10.0,
        min_cluster_size=50,
        single_centroid=False,
        eta=0.0,
        eta_geo=None,
        omega=0.0,
        k=1,
        geo_box_edge=1000.0,
        verify="no_geo",
        index="exact",
        n_cells=100,
        n_probe=10,
        seed=0,
    ):
        self.linkage = linkage
        self.distance_threshold = distance_threshold
        self.min_cluster_size = min_cluster_size
        self.single_centroid = single_centroid
        self.eta = eta
        self.eta_geo = eta_geo
        self.omega = omega
        self.k = k
        self.geo_box_edge = geo_box_edge
        self.verify = verify
        self.index = index
        self.n_cells = n_cells
        self.n_probe = n_probe
        self.seed = seed

    def inference_config(self) -> InferenceConfig:
        return InferenceConfig(self.eta, self.eta_geo, self.omega, self.k, self.geo_box_edge, self.verify)

    def fit(self, X, y, n_landmarks: Optional[int] = None,
            metadata: Optional[Sequence[LandmarkMetadata]] = None,
            references: Optional[Mapping[int, np.ndarray]] = None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        n = int(n_landmarks) if n_landmarks is not None else int(y.max())
        if self.single_centroid:
            cset = mean_centroid_set(X, y, n)
        else:
            cfg = ClusteringConfig(self.linkage, self.distance_threshold, self.min_cluster_size)
            cset = build_centroid_set(X, y, n, cfg)
        if self.index == "exact":
            self.index_ = build_exact_index(cset)
        elif self.index == "cells":
            self.index_ = build_cell_index(cset, min(self.n_cells, len(cset)),
                                           min(self.n_probe, self.n_cells, len(cset)), self.seed)
        else:
            raise ValueError(f"index must be 'exact' or 'cells', got {self.index!r}")
        self.centroids_ = cset
        self.metadata_ = _metadata_lookup(metadata)
        self.references_ = dict(references or {})
        self.n_landmarks_ = n
        self.classes_ = np.arange(1, n + 2)
        self.n_features_in_ = X.shape[1]
        return self

    def recognize(self, X, locations=None) -> List[RecognitionResult]:
        check_is_fitted(self, "index_")
        X = check_array(X, dtype=np.float64)
        cfg = self.inference_config()
        locs = [None] * len(X) if locations is None else locations
        return [
            infer(x, self.index_, self.references_, self.metadata_, cfg,
                  None if loc is None or np.any(np.isnan(loc)) else tuple(loc))
            for x, loc in zip(X, locs)
        ]

    def predict(self, X, locations=None):
        non_landmark = self.n_landmarks_ + 1 if hasattr(self, "n_landmarks_") else None
        return np.array([r.top if r.is_landmark else non_landmark for r in self.recognize(X, locations)])

    def decision_function(self, X):
        """Best raw similarity per row, before any gating."""
        check_is_fitted(self, "index_")
        return max_similarity(self.index_, check_array(X, dtype=np.float64))


class ReferenceCleaner(BaseEstimator):
    """Accept/reject embeddings of one landmark by similarity to its references' mean."""

    def __init__(self, gamma=0.0):
        self.gamma = gamma

    def fit(self, references, y=None):
        self.centroid_ = references_centroid(check_array(references, dtype=np.float64))
        self.n_features_in_ = self.centroid_.shape[0]
        return self

    def score_samples(self, X):
        check_is_fitted(self, "centroid_")
        return check_array(X, dtype=np.float64) @ self.centroid_

    def predict(self, X):
        """Boolean accept flags."""
        return self.score_samples(X) >= self.gamma
