"""Core data types, binary/text codecs, synthetic corpora, region partitioning."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

EMBEDDING_MAGIC = b"LMEB"
EMBEDDING_VERSION = 1
_EMB_HEADER = struct.Struct("<4sIIQ")

N_REGION_PARTS = 4
# mean Earth radius based, used by the equirectangular approximation
METERS_PER_DEGREE = 6371008.8 * np.pi / 180.0

# rough lat/lon boxes for the four curriculum regions
_REGION_BOXES = {
    1: ((40.0, 60.0), (-10.0, 40.0)),  # Europe incl. Russia
    2: ((30.0, 50.0), (-120.0, -70.0)),  # North America, Oceania
    3: ((20.0, 35.0), (30.0, 55.0)),  # Middle East, North Africa
    4: ((20.0, 45.0), (100.0, 140.0)),  # Far East
}


class CodecError(ValueError):
    """Malformed embedding, centroid or checkpoint file."""


class MetadataError(ValueError):
    """Malformed or inconsistent landmark metadata."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded Philox (64-bit counter-based) generator used throughout the package."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class Dataset:
    """Feature or embedding vectors with 1-based labels.

    Labels ``1..n`` are landmark classes and ``n + 1`` is the non-landmark class.
    """

    X: np.ndarray
    y: np.ndarray
    n: int

    def __post_init__(self):
        self.X = np.asarray(self.X)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError("X and y have different lengths")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.y.size and (self.y.min() < 1 or self.y.max() > self.n + 1):
            raise ValueError(f"labels must lie in [1, {self.n + 1}]")

    @property
    def d_in(self) -> int:
        return self.X.shape[1]

    @property
    def non_landmark_label(self) -> int:
        return self.n + 1

    @property
    def landmark_mask(self) -> np.ndarray:
        return self.y <= self.n

    @property
    def landmark_classes(self) -> np.ndarray:
        return np.unique(self.y[self.landmark_mask])

    def __len__(self) -> int:
        return self.y.size

    def subset(self, mask_or_index) -> "Dataset":
        return Dataset(self.X[mask_or_index], self.y[mask_or_index], self.n)

    def check_complete(self) -> None:
        """Every landmark class 1..n must own at least one sample."""
        missing = np.setdiff1d(np.arange(1, self.n + 1), self.landmark_classes)
        if missing.size:
            raise ValueError(f"landmark classes without samples: {missing[:10].tolist()}")


@dataclass(frozen=True)
class LandmarkMetadata:
    landmark_id: int
    name: str
    city: str
    country: str
    latitude: float
    longitude: float
    region_part: int


# ---------------------------------------------------------------------------
# embedding file


def write_embeddings(path: str | os.PathLike, X, y) -> None:
    """Write vectors and labels as an ``LMEB`` file (float32 / uint32, little-endian)."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise CodecError(f"embeddings must be 2-D, got shape {X.shape}")
    y = np.asarray(y)
    if y.shape != (X.shape[0],):
        raise CodecError("label count does not match embedding count")
    if y.size and (y.min() < 0 or y.max() > np.iinfo(np.uint32).max):
        raise CodecError("labels must fit in u32")
    if not np.all(np.isfinite(X)):
        raise CodecError("embeddings must be finite")
    count, dim = X.shape
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, dim, count))
        fh.write(np.ascontiguousarray(X, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(y, dtype="<u4").tobytes())


def read_embeddings(path: str | os.PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """Read an ``LMEB`` file, returning ``(float32 vectors, int64 labels)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_embeddings(buf)


def decode_embeddings(buf: bytes) -> Tuple[np.ndarray, np.ndarray]:
    if len(buf) < _EMB_HEADER.size:
        raise CodecError("truncated header")
    magic, version, dim, count = _EMB_HEADER.unpack_from(buf)
    if magic != EMBEDDING_MAGIC:
        raise CodecError(f"bad magic {magic!r}")
    if version != EMBEDDING_VERSION:
        raise CodecError(f"unsupported version {version}")
    if dim == 0 and count > 0:
        raise CodecError("dim must be >= 1")
    n_vec = 4 * dim * count
    expected = _EMB_HEADER.size + n_vec + 4 * count
    if len(buf) < expected:
        raise CodecError("truncated payload")
    if len(buf) > expected:
        raise CodecError(f"dim/count mismatch: {len(buf) - expected} trailing bytes")
    off = _EMB_HEADER.size
    X = np.frombuffer(buf, dtype="<f4", count=dim * count, offset=off).reshape(count, dim)
    y = np.frombuffer(buf, dtype="<u4", count=count, offset=off + n_vec)
    return X.astype(np.float32), y.astype(np.int64)


# ---------------------------------------------------------------------------
# metadata file


def parse_metadata(text: str) -> List[LandmarkMetadata]:
    records: List[LandmarkMetadata] = []
    seen = set()
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        cols = line.rstrip("\r").split("\t")
        if len(cols) != 7:
            raise MetadataError(f"line {lineno}: expected 7 tab-separated columns, got {len(cols)}")
        raw_id, name, city, country, raw_lat, raw_lon, raw_part = cols
        try:
            landmark_id = int(raw_id)
        except ValueError:
            raise MetadataError(f"line {lineno}: non-integer landmark_id {raw_id!r}") from None
        try:
            lat, lon = float(raw_lat), float(raw_lon)
        except ValueError:
            raise MetadataError(f"line {lineno}: non-numeric coordinate") from None
        try:
            part = int(raw_part)
        except ValueError:
            raise MetadataError(f"line {lineno}: non-integer region_part {raw_part!r}") from None
        if not -90.0 <= lat <= 90.0:
            raise MetadataError(f"line {lineno}: latitude out of range ({lat})")
        if not -180.0 <= lon <= 180.0:
            raise MetadataError(f"line {lineno}: longitude out of range ({lon})")
        if not 1 <= part <= N_REGION_PARTS:
            raise MetadataError(f"line {lineno}: region_part must be in [1, {N_REGION_PARTS}]")
        if landmark_id < 1:
            raise MetadataError(f"line {lineno}: landmark_id must be >= 1")
        if landmark_id in seen:
            raise MetadataError(f"line {lineno}: duplicate landmark_id {landmark_id}")
        seen.add(landmark_id)
        records.append(LandmarkMetadata(landmark_id, name, city, country, lat, lon, part))
    return records


def read_metadata(path: str | os.PathLike) -> List[LandmarkMetadata]:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_metadata(fh.read())


def write_metadata(path: str | os.PathLike, records: Sequence[LandmarkMetadata]) -> None:
    lines = []
    for r in records:
        for text in (r.name, r.city, r.country):
            if "\t" in text or "\n" in text:
                raise MetadataError(f"landmark {r.landmark_id}: text fields may not contain tabs/newlines")
        lines.append(
            f"{r.landmark_id}\t{r.name}\t{r.city}\t{r.country}\t"
            f"{float(r.latitude)!r}\t{float(r.longitude)!r}\t{int(r.region_part)}\n"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(lines))


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticSpec:
    n_classes: int = 50
    modes_per_class_range: Tuple[int, int] = (2, 3)
    samples_per_class_range: Tuple[int, int] = (100, 150)
    non_landmark_count: int = 2000
    d_in: int = 64
    mode_spread: float = 1.0
    within_mode_noise: float = 0.25
    outlier_fraction: float = 0.0
    n_cities: int = 12
    seed: int = 0

    def __post_init__(self):
        self.modes_per_class_range = tuple(int(v) for v in self.modes_per_class_range)
        self.samples_per_class_range = tuple(int(v) for v in self.samples_per_class_range)
        for name in ("n_classes", "non_landmark_count", "d_in", "n_cities"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("modes_per_class_range", "samples_per_class_range"):
            lo_hi = getattr(self, name)
            if len(lo_hi) != 2 or lo_hi[0] < 1 or lo_hi[0] > lo_hi[1]:
                raise ValueError(f"{name} must be (lo, hi) with 1 <= lo <= hi")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must be in [0, 1)")
        if self.mode_spread <= 0 or self.within_mode_noise < 0:
            raise ValueError("mode_spread must be > 0 and within_mode_noise >= 0")


@dataclass
class GroundTruth:
    """Generator-side truth: which mode produced each sample, planted outliers."""

    mode_centers: np.ndarray  # (n_modes, d_in)
    mode_class: np.ndarray  # landmark label owning each mode
    sample_mode: np.ndarray  # per sample, -1 for non-landmark and outliers
    is_outlier: np.ndarray  # per sample

    def class_modes(self, label: int) -> List[int]:
        return np.flatnonzero(self.mode_class == label).tolist()


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    dataset: Dataset
    metadata: List[LandmarkMetadata]
    truth: GroundTruth


def _background(rng: np.random.Generator, spec: SyntheticSpec, size: int) -> np.ndarray:
    return rng.normal(0.0, spec.mode_spread, size=(size, spec.d_in))


def generate_synthetic(spec: SyntheticSpec) -> SyntheticCorpus:
    """Draw a multi-mode landmark corpus plus a broad non-landmark background.

    Each landmark class is a Gaussian mixture over 2+ well separated mode
    centres. A fraction of each class is replaced by planted outliers drawn
    away from every mode of that class.
    """
    rng = make_rng(spec.seed)
    n = spec.n_classes
    lo_m, hi_m = spec.modes_per_class_range
    lo_s, hi_s = spec.samples_per_class_range

    n_modes = rng.integers(lo_m, hi_m + 1, size=n)
    mode_class = np.repeat(np.arange(1, n + 1), n_modes)
    mode_centers = rng.normal(0.0, spec.mode_spread, size=(mode_class.size, spec.d_in))
    # keep outliers further from their class modes than any inlier could be
    min_outlier_dist = 4.0 * spec.within_mode_noise * np.sqrt(spec.d_in)

    X_parts, y_parts, mode_parts, out_parts = [], [], [], []
    for label in range(1, n + 1):
        modes = np.flatnonzero(mode_class == label)
        count = int(rng.integers(lo_s, hi_s + 1))
        n_out = int(np.floor(spec.outlier_fraction * count))
        n_in = count - n_out
        # every mode gets at least one sample when possible
        picks = rng.integers(0, modes.size, size=n_in)
        picks[: min(modes.size, n_in)] = np.arange(min(modes.size, n_in))
        which = modes[picks]
        Xi = mode_centers[which] + rng.normal(0.0, spec.within_mode_noise, size=(n_in, spec.d_in))
        outs = []
        while len(outs) < n_out:
            cand = _background(rng, spec, 1)[0]
            if np.min(np.linalg.norm(mode_centers[modes] - cand, axis=1)) > min_outlier_dist:
                outs.append(cand)
        Xo = np.asarray(outs).reshape(n_out, spec.d_in)
        X_parts += [Xi, Xo]
        y_parts.append(np.full(count, label))
        mode_parts += [which, np.full(n_out, -1)]
        out_parts += [np.zeros(n_in, bool), np.ones(n_out, bool)]

    X_parts.append(_background(rng, spec, spec.non_landmark_count))
    y_parts.append(np.full(spec.non_landmark_count, n + 1))
    mode_parts.append(np.full(spec.non_landmark_count, -1))
    out_parts.append(np.zeros(spec.non_landmark_count, bool))

    dataset = Dataset(np.concatenate(X_parts), np.concatenate(y_parts), n)
    truth = GroundTruth(
        mode_centers=mode_centers,
        mode_class=mode_class,
        sample_mode=np.concatenate(mode_parts).astype(np.int64),
        is_outlier=np.concatenate(out_parts),
    )
    return SyntheticCorpus(spec, dataset, _synthetic_metadata(rng, spec), truth)


def _synthetic_metadata(rng: np.random.Generator, spec: SyntheticSpec) -> List[LandmarkMetadata]:
    cities = []
    for c in range(spec.n_cities):
        part = c % N_REGION_PARTS + 1
        (lat_lo, lat_hi), (lon_lo, lon_hi) = _REGION_BOXES[part]
        lat = float(rng.uniform(lat_lo, lat_hi))
        lon = float(rng.uniform(lon_lo, lon_hi))
        cities.append((f"City {c + 1:02d}", f"Country {part}", lat, lon, part))
    records = []
    for label in range(1, spec.n_classes + 1):
        city, country, lat, lon, part = cities[(label - 1) % spec.n_cities]
        # scatter landmarks within about +-3 km of the city centre
        dlat = float(rng.uniform(-3000, 3000)) / METERS_PER_DEGREE
        dlon = float(rng.uniform(-3000, 3000)) / (METERS_PER_DEGREE * np.cos(np.radians(lat)))
        records.append(
            LandmarkMetadata(label, f"Landmark {label:04d}", city, country,
                             float(round(lat + dlat, 6)), float(round(lon + dlon, 6)), part)
        )
    return records


def draw_queries(corpus: SyntheticCorpus, per_class: int, n_clean: int, seed: int) -> Dataset:
    """Fresh held-out queries from the corpus's modes and background."""
    rng = make_rng(seed)
    spec, truth = corpus.spec, corpus.truth
    X, y = [], []
    for label in range(1, spec.n_classes + 1):
        modes = np.flatnonzero(truth.mode_class == label)
        which = modes[rng.integers(0, modes.size, size=per_class)]
        X.append(truth.mode_centers[which] + rng.normal(0.0, spec.within_mode_noise, (per_class, spec.d_in)))
        y.append(np.full(per_class, label))
    X.append(_background(rng, spec, n_clean))
    y.append(np.full(n_clean, spec.n_classes + 1))
    return Dataset(np.concatenate(X), np.concatenate(y), spec.n_classes)


def write_truth(path: str | os.PathLike, truth: GroundTruth) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("index\tmode\toutlier\n")
        for i, (m, o) in enumerate(zip(truth.sample_mode, truth.is_outlier)):
            fh.write(f"{i}\t{m}\t{int(o)}\n")


# ---------------------------------------------------------------------------
# curriculum partition


def partition_by_region(dataset: Dataset, metadata: Sequence[LandmarkMetadata]) -> List[Dataset]:
    """Split landmark samples into the four region parts.

    Each part holds the samples of the classes whose metadata names that
    part, plus every non-landmark sample (shared by all parts).
    """
    part_of: Dict[int, int] = {m.landmark_id: m.region_part for m in metadata}
    classes = dataset.landmark_classes
    missing = [int(c) for c in classes if int(c) not in part_of]
    if missing:
        raise MetadataError(f"classes without metadata: {missing[:10]}")
    lookup = np.zeros(dataset.n + 2, dtype=np.int64)
    for c in classes:
        lookup[c] = part_of[int(c)]
    sample_part = lookup[dataset.y]  # 0 for non-landmark
    non_landmark = ~dataset.landmark_mask
    return [dataset.subset((sample_part == k) | non_landmark) for k in range(1, N_REGION_PARTS + 1)]

