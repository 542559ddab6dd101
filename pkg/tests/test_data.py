import struct

import numpy as np
import pytest

from lmrec.data import (CodecError, Dataset, LandmarkMetadata, MetadataError, SyntheticSpec, decode_embeddings,
                        draw_queries, generate_synthetic, make_rng, parse_metadata, partition_by_region,
                        read_embeddings, read_metadata, write_embeddings, write_metadata)


def test_roundtrip_three_samples(tmp_path):
    X = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
    y = np.array([1, 2, 5])
    path = tmp_path / "e.lmeb"
    write_embeddings(path, X, y)
    X2, y2 = read_embeddings(path)
    assert X2.dtype == np.float32 and np.array_equal(X2, X)
    assert np.array_equal(y2, y)


def test_header_layout_is_frozen(tmp_path):
    path = tmp_path / "e.lmeb"
    write_embeddings(path, np.array([[1.0, -2.0]]), np.array([7]))
    raw = path.read_bytes()
    assert raw == (b"LMEB" + struct.pack("<IIQ", 1, 2, 1) + struct.pack("<2f", 1.0, -2.0) + struct.pack("<I", 7))


def test_empty_file_roundtrip(tmp_path):
    path = tmp_path / "e.lmeb"
    write_embeddings(path, np.zeros((0, 3)), np.zeros(0, dtype=int))
    X, y = read_embeddings(path)
    assert X.shape == (0, 3) and y.shape == (0,)


def test_truncated_payload(tmp_path):
    path = tmp_path / "e.lmeb"
    write_embeddings(path, np.ones((1, 2)), [1])
    raw = bytearray(path.read_bytes())
    raw[12:20] = struct.pack("<Q", 2)  # header claims two samples
    with pytest.raises(CodecError, match="truncated payload"):
        decode_embeddings(bytes(raw))


@pytest.mark.parametrize("buf,msg", [(b"LME", "truncated header"),
                                     (b"XXXX" + struct.pack("<IIQ", 1, 1, 0), "bad magic")])
def test_codec_errors(buf, msg):
    with pytest.raises(CodecError, match=msg):
        decode_embeddings(buf)


def test_trailing_bytes_rejected():
    buf = b"LMEB" + struct.pack("<IIQ", 1, 1, 0) + b"\0\0\0\0"
    with pytest.raises(CodecError, match="dim/count mismatch"):
        decode_embeddings(buf)


def test_metadata_parse_line():
    (rec,) = parse_metadata("1\tZwinger\tDresden\tGermany\t51.053\t13.732\t1\n")
    assert rec == LandmarkMetadata(1, "Zwinger", "Dresden", "Germany", 51.053, 13.732, 1)


@pytest.mark.parametrize("text,msg", [
    ("1\ta\tb\tc\t91.0\t0\t1", "latitude out of range"),
    ("1\ta\tb\tc\t0\t181\t1", "longitude out of range"),
    ("7\ta\tb\tc\t0\t0\t1\n7\ta\tb\tc\t0\t0\t2", "duplicate landmark_id"),
    ("1\ta\tb\tc\t0\t0\t5", "region_part"),
    ("1\ta\tb\tc\t0\t0", "7 tab-separated"),
])
def test_metadata_errors(text, msg):
    with pytest.raises(MetadataError, match=msg):
        parse_metadata(text)


def test_metadata_roundtrip(tmp_path):
    recs = [LandmarkMetadata(1, "A", "X", "C", 51.0, 13.5, 1),
            LandmarkMetadata(2, "B", "Y", "C", np.float64(-33.25), np.float64(151.125), 4)]
    path = tmp_path / "m.tsv"
    write_metadata(path, recs)
    assert b"\r" not in path.read_bytes()
    assert read_metadata(path) == recs


def test_synthetic_is_deterministic():
    a = generate_synthetic(SyntheticSpec(n_classes=5, non_landmark_count=50, seed=7))
    b = generate_synthetic(SyntheticSpec(n_classes=5, non_landmark_count=50, seed=7))
    assert np.array_equal(a.dataset.X, b.dataset.X) and np.array_equal(a.dataset.y, b.dataset.y)
    assert a.metadata == b.metadata


def test_synthetic_ground_truth():
    c = generate_synthetic(SyntheticSpec(seed=1))
    assert not c.truth.is_outlier.any()
    for label in range(1, 51):
        assert len(c.truth.class_modes(label)) in (2, 3)
    assert c.dataset.y.max() == 51
    assert np.sum(c.dataset.y == 51) == 2000


def test_synthetic_outliers_far_from_modes():
    spec = SyntheticSpec(n_classes=4, non_landmark_count=10, outlier_fraction=0.2, seed=2)
    c = generate_synthetic(spec)
    out = np.flatnonzero(c.truth.is_outlier)
    assert out.size > 0
    for i in out:
        modes = c.truth.mode_centers[c.truth.class_modes(int(c.dataset.y[i]))]
        assert np.linalg.norm(modes - c.dataset.X[i], axis=1).min() > 4 * spec.within_mode_noise * np.sqrt(spec.d_in)


def test_draw_queries_shape():
    c = generate_synthetic(SyntheticSpec(n_classes=3, non_landmark_count=10, seed=0))
    q = draw_queries(c, 4, 6, seed=9)
    assert len(q) == 18 and np.sum(q.y == 4) == 6


def _meta(parts):
    return [LandmarkMetadata(i, f"L{i}", "c", "k", 0.0, 0.0, p) for i, p in parts.items()]


def test_partition_single_part():
    ds = Dataset(np.zeros((5, 2)), [1, 1, 2, 3, 3], 2)
    parts = partition_by_region(ds, _meta({1: 1, 2: 1}))
    assert parts[0].landmark_mask.sum() == 3
    for p in parts[1:]:
        assert p.landmark_classes.size == 0
        assert len(p) == 2  # the shared non-landmark pool


def test_partition_class_to_part_three():
    ds = Dataset(np.arange(8).reshape(4, 2), [1, 2, 2, 3], 2)
    parts = partition_by_region(ds, _meta({1: 1, 2: 3}))
    assert parts[2].landmark_classes.tolist() == [2]
    assert parts[2].landmark_mask.sum() == 2


def test_partition_sizes_sum():
    c = generate_synthetic(SyntheticSpec(seed=3))
    parts = partition_by_region(c.dataset, c.metadata)
    assert sum(int(p.landmark_mask.sum()) for p in parts) == int(c.dataset.landmark_mask.sum())


def test_partition_missing_metadata():
    ds = Dataset(np.zeros((2, 2)), [1, 2], 2)
    with pytest.raises(MetadataError):
        partition_by_region(ds, _meta({2: 1}))


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), [1, 4], 2)
    with pytest.raises(ValueError, match="without samples"):
        Dataset(np.zeros((1, 2)), [1], 2).check_complete()


def test_rng_is_philox():
    assert isinstance(make_rng(0).bit_generator, np.random.Philox)
    assert make_rng(5).random() == make_rng(5).random()
