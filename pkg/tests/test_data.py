import struct

import numpy as np
import pytest

from gradcon import data
from gradcon.data import CorruptionSpec, DataError, ParseError


# ---------------------------------------------------------------------------
# IDX container
# ---------------------------------------------------------------------------

def idx_image_fixture():
    # magic 0x803, 1 image of 2x2, pixels [0, 255, 128, 64]
    return struct.pack(">IIII", 0x803, 1, 2, 2) + bytes([0, 255, 128, 64])


def test_parse_idx_image_fixture():
    images = data.parse_idx(idx_image_fixture())
    assert images.shape == (1, 2, 2)
    assert np.allclose(images[0], [[0.0, 1.0], [128 / 255, 64 / 255]])


def test_parse_idx_label_fixture():
    buf = struct.pack(">II", 0x801, 3) + bytes([7, 0, 9])
    labels = data.parse_idx(buf)
    assert labels.dtype == np.int64
    assert labels.tolist() == [7, 0, 9]


def test_parse_idx_bad_magic_reports_offset():
    with pytest.raises(ParseError, match="offset 0"):
        data.parse_idx(struct.pack(">I", 0x9999) + b"\0" * 8)


def test_parse_idx_truncated_header():
    with pytest.raises(ParseError, match="truncated"):
        data.parse_idx(b"\x00\x00")


def test_parse_idx_truncated_payload():
    buf = idx_image_fixture()[:-2]
    with pytest.raises(ParseError, match="mismatch"):
        data.parse_idx(buf)


def test_parse_idx_extra_payload():
    with pytest.raises(ParseError, match="mismatch"):
        data.parse_idx(idx_image_fixture() + b"\x00")


def test_idx_roundtrip():
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(5, 28, 28)).astype(np.float64) / 255.0
    assert np.array_equal(data.parse_idx(data.write_idx(images)), images)
    labels = rng.integers(0, 10, size=7)
    assert np.array_equal(data.parse_idx(data.write_idx(labels)), labels)


# ---------------------------------------------------------------------------
# CIFAR-10 container
# ---------------------------------------------------------------------------

def test_parse_cifar10_fixture():
    record = bytes([3]) + bytes([255] * 1024) + bytes([0] * 1024) + bytes([128] * 1024)
    ds = data.parse_cifar10_bin(record)
    assert len(ds) == 1
    assert ds.labels[0] == 3
    assert np.all(ds.images[0, 0] == 1.0)       # red plane
    assert np.all(ds.images[0, 1] == 0.0)       # green plane
    assert np.allclose(ds.images[0, 2], 128 / 255)


def test_parse_cifar10_wrong_length():
    with pytest.raises(ParseError, match="multiple"):
        data.parse_cifar10_bin(b"\x00" * 3000)


def test_parse_cifar10_bad_label():
    record = bytes([10]) + bytes(3072)
    with pytest.raises(ParseError, match="record 0"):
        data.parse_cifar10_bin(record)


def test_cifar10_roundtrip():
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, size=(4, 3, 32, 32)).astype(np.float64) / 255.0
    ds = data.ImageDataset(images, rng.integers(0, 10, size=4), source="cifar10")
    ds2 = data.parse_cifar10_bin(data.write_cifar10_bin(ds))
    assert np.array_equal(ds2.images, ds.images)
    assert np.array_equal(ds2.labels, ds.labels)


# ---------------------------------------------------------------------------
# dataset container and resize
# ---------------------------------------------------------------------------

def test_dataset_validation():
    with pytest.raises(DataError):
        data.ImageDataset(np.zeros((2, 1, 32, 32)), np.zeros(3))
    with pytest.raises(DataError):
        data.ImageDataset(np.zeros((2, 2, 32, 32)), np.zeros(2))
    with pytest.raises(DataError):
        data.ImageDataset(np.full((1, 1, 32, 32), 1.5), np.zeros(1))


def test_resize_constant_image_stays_constant():
    out = data.resize_bilinear(np.full((1, 28, 28), 0.37))
    assert out.shape == (1, 32, 32)
    assert np.allclose(out, 0.37)


def test_resize_preserves_corners_and_bounds():
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, (1, 28, 28))
    out = data.resize_bilinear(img)
    # corner alignment: the four corners are reproduced exactly
    assert out[0, 0, 0] == pytest.approx(img[0, 0, 0])
    assert out[0, 0, -1] == pytest.approx(img[0, 0, -1])
    assert out[0, -1, 0] == pytest.approx(img[0, -1, 0])
    assert out[0, -1, -1] == pytest.approx(img[0, -1, -1])
    # interpolation never exceeds the input range
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


def test_resize_checkerboard_center():
    # 2x2 checkerboard blown up to 3x3: the center is the 4-point average 0.5
    img = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    out = data.resize_bilinear(img, size=3)
    assert out[0, 1, 1] == pytest.approx(0.5)
    assert out[0, 0, 0] == 0.0 and out[0, 0, 2] == 1.0


def test_resize_rejects_downscale():
    with pytest.raises(DataError):
        data.resize_bilinear(np.zeros((1, 40, 40)))


def test_load_idx_dataset(tmp_path):
    rng = np.random.default_rng(3)
    images = rng.integers(0, 256, size=(6, 28, 28)).astype(np.float64) / 255.0
    labels = rng.integers(0, 10, size=6)
    (tmp_path / "imgs.idx").write_bytes(data.write_idx(images))
    (tmp_path / "labels.idx").write_bytes(data.write_idx(labels))
    ds = data.load_idx_dataset(tmp_path / "imgs.idx", tmp_path / "labels.idx", "mnist")
    assert ds.images.shape == (6, 1, 32, 32)
    assert np.array_equal(ds.labels, labels)
    assert ds.source == "mnist"


def test_load_idx_dataset_count_mismatch(tmp_path):
    (tmp_path / "imgs.idx").write_bytes(data.write_idx(np.zeros((2, 28, 28))))
    (tmp_path / "labels.idx").write_bytes(data.write_idx(np.zeros(3, dtype=int)))
    with pytest.raises(DataError, match="label count"):
        data.load_idx_dataset(tmp_path / "imgs.idx", tmp_path / "labels.idx", "mnist")


# ---------------------------------------------------------------------------
# split protocols
# ---------------------------------------------------------------------------

def test_one_class_split_partitions():
    rng = np.random.default_rng(4)
    train_labels = rng.integers(0, 10, size=400)
    test_labels = rng.integers(0, 10, size=300)
    split = data.make_one_class_split(train_labels, test_labels, 3, seed=1)
    # train/val use only the inlier class and are disjoint
    assert set(train_labels[split.train]) == {3}
    assert set(train_labels[split.val]) == {3}
    assert not set(split.train) & set(split.val)
    n_class = (train_labels == 3).sum()
    assert split.train.size + split.val.size == n_class
    assert split.val.size == round(0.1 * n_class)
    # test outliers never include the inlier class and match the inlier count
    assert set(test_labels[split.test_in]) == {3}
    assert 3 not in set(test_labels[split.test_out])
    assert split.test_out.size == split.test_in.size
    assert np.unique(split.test_out).size == split.test_out.size


def test_one_class_split_determinism_and_max_train():
    labels = np.random.default_rng(5).integers(0, 10, size=500)
    test_labels = np.random.default_rng(6).integers(0, 10, size=500)
    a = data.make_one_class_split(labels, test_labels, 0, seed=2)
    b = data.make_one_class_split(labels, test_labels, 0, seed=2)
    assert np.array_equal(a.train, b.train)
    assert np.array_equal(a.test_out, b.test_out)
    c = data.make_one_class_split(labels, test_labels, 0, seed=3)
    assert not np.array_equal(a.test_out, c.test_out)
    small = data.make_one_class_split(labels, test_labels, 0, seed=2, max_train=20)
    assert small.train.size + small.val.size == 20


def test_one_class_split_missing_class():
    with pytest.raises(DataError):
        data.make_one_class_split(np.ones(10), np.ones(10), 5)


def test_fmnist_folds_structure():
    labels = np.repeat(np.arange(10), 100)   # 100 per class
    folds = data.make_fmnist_folds(labels, 4, fold_count=5, outlier_ratio=0.5, seed=0)
    assert len(folds) == 5
    all_test_in = []
    for split in folds:
        assert set(labels[split.train]) == {4}
        assert set(labels[split.test_in]) == {4}
        assert 4 not in set(labels[split.test_out])
        # 100 inliers per fold: 20 test, 60 train, 20 val
        assert split.test_in.size == 20
        assert split.train.size == 60
        assert split.val.size == 20
        # 50% outlier ratio -> equal outlier count
        assert split.test_out.size == 20
        all_test_in.append(split.test_in)
    # the 5 test folds partition the inlier class
    pooled = np.concatenate(all_test_in)
    assert np.array_equal(np.sort(pooled), np.nonzero(labels == 4)[0])


def test_fmnist_folds_outlier_ratio():
    labels = np.repeat(np.arange(10), 100)
    folds = data.make_fmnist_folds(labels, 0, outlier_ratio=0.2, seed=0)
    for split in folds:
        total = split.test_in.size + split.test_out.size
        assert split.test_out.size / total == pytest.approx(0.2, abs=0.02)


def test_fmnist_folds_bad_ratio():
    labels = np.repeat(np.arange(10), 100)
    with pytest.raises(DataError):
        data.make_fmnist_folds(labels, 0, outlier_ratio=0.65)


# ---------------------------------------------------------------------------
# corruption operators
# ---------------------------------------------------------------------------

def test_corruption_spec_validation():
    with pytest.raises(DataError):
        CorruptionSpec("sharpen", 1)
    with pytest.raises(DataError):
        CorruptionSpec("gaussian_blur", 0)
    with pytest.raises(DataError):
        CorruptionSpec("exposure", 6)


def sample_image():
    return data.synth_shapes(1, seed=0).images[0]


@pytest.mark.parametrize("kind", data.CORRUPTION_KINDS)
def test_corruption_severity_monotone(kind):
    img = sample_image() if kind != "decolorization" else \
        np.random.default_rng(0).uniform(0, 1, (3, 32, 32))
    dist = [np.linalg.norm(data.corrupt(img, CorruptionSpec(kind, lv)) - img)
            for lv in range(1, 6)]
    assert dist[0] > 0
    assert all(b > a for a, b in zip(dist, dist[1:]))


def test_corruption_output_range_and_shape():
    img = sample_image()
    for kind in data.CORRUPTION_KINDS:
        out = data.corrupt(img, CorruptionSpec(kind, 3))
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_decolorization_level5_full_blend():
    img = np.random.default_rng(1).uniform(0, 1, (3, 32, 32))
    out = data.corrupt(img, CorruptionSpec("decolorization", 5))
    gray = img.mean(axis=0)
    assert np.allclose(out, np.broadcast_to(gray, (3, 32, 32)))


def test_blur_preserves_constant_image():
    img = np.full((1, 32, 32), 0.6)
    out = data.corrupt(img, CorruptionSpec("gaussian_blur", 4))
    assert np.allclose(out, 0.6)


def test_corruption_determinism():
    img = sample_image()
    spec = CorruptionSpec("gaussian_blur", 2)
    assert np.array_equal(data.corrupt(img, spec), data.corrupt(img, spec))


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

def test_synth_shapes_properties():
    circles = data.synth_shapes(10, "circles", seed=0)
    crosses = data.synth_shapes(10, "crosses", seed=0)
    assert circles.images.shape == (10, 1, 32, 32)
    assert set(circles.labels) == {0} and set(crosses.labels) == {1}
    again = data.synth_shapes(10, "circles", seed=0)
    assert np.array_equal(circles.images, again.images)
    other = data.synth_shapes(10, "circles", seed=1)
    assert not np.array_equal(circles.images, other.images)
    with pytest.raises(DataError):
        data.synth_shapes(0)
    with pytest.raises(DataError):
        data.synth_shapes(5, "triangles")


def test_synth_digits_properties():
    ds = data.synth_digits(30, seed=0)
    assert ds.images.shape == (30, 1, 32, 32)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert set(ds.labels) <= set(range(10))
    again = data.synth_digits(30, seed=0)
    assert np.array_equal(ds.images, again.images)
    zeros = data.synth_digits(10, seed=0, classes=[0])
    assert set(zeros.labels) == {0}
