"""Dataset ingestion, one-class split protocols and synthetic corpora.

Reads MNIST-style IDX files and CIFAR-10 binary batches from user-supplied
paths (never downloads). 28x28 inputs are bilinearly resized to 32x32. Also
provides corruption operators emulating abnormal-condition detection and
deterministic synthetic image generators for fast tests and for running the
full pipeline when no benchmark files are available.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073


class DataError(Exception):
    """Malformed input data."""


class ParseError(DataError):
    """Container parse failure; message carries the byte offset."""


@dataclass
class ImageDataset:
    images: np.ndarray            # (N, C, 32, 32) in [0, 1]
    labels: np.ndarray            # (N,) ints
    source: str = "synthetic"     # mnist | fmnist | cifar10 | synthetic

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"dataset images {self.images.shape} / labels {self.labels.shape} mismatch")
        if self.images.shape[1] not in (1, 3):
            raise DataError(f"unsupported channel count {self.images.shape[1]}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixel values must lie in [0, 1]")

    def __len__(self):
        return self.images.shape[0]


@dataclass
class OneClassSplit:
    inlier_class: int
    seed: int
    train: np.ndarray             # indices into the training pool
    val: np.ndarray
    test_in: np.ndarray           # indices into the test pool
    test_out: np.ndarray


# ---------------------------------------------------------------------------
# container parsers
# ---------------------------------------------------------------------------

def parse_idx(buf: bytes):
    """Parse an IDX buffer; returns float images in [0,1] or an int label array."""
    if len(buf) < 4:
        raise ParseError(f"truncated IDX header: {len(buf)} bytes at offset 0")
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise ParseError(f"bad IDX magic 0x{magic:08x} at offset 0")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise ParseError(f"truncated IDX dimensions: {len(buf)} bytes at offset 4")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = int(np.prod([int(d) for d in dims], dtype=np.int64))
    if count < 0 or count > 1 << 40:
        raise ParseError(f"IDX dimension overflow {dims} at offset 4")
    if len(buf) != header + count:
        raise ParseError(
            f"IDX payload size mismatch at offset {header}: expected {count} bytes, "
            f"got {len(buf) - header}")
    payload = np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)
    if magic == IDX_LABELS_MAGIC:
        return payload.astype(np.int64)
    return payload.astype(np.float64) / 255.0


def write_idx(array: np.ndarray) -> bytes:
    """Inverse of parse_idx for fixtures: images in [0,1] or integer labels."""
    array = np.asarray(array)
    if array.ndim == 3:
        payload = np.round(array * 255.0).astype(np.uint8)
        header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *payload.shape)
    elif array.ndim == 1:
        payload = array.astype(np.uint8)
        header = struct.pack(">II", IDX_LABELS_MAGIC, payload.shape[0])
    else:
        raise DataError(f"write_idx: unsupported rank {array.ndim}")
    return header + payload.tobytes()


def parse_cifar10_bin(buf: bytes) -> ImageDataset:
    """Parse CIFAR-10 binary batch records (1 label byte + 3072 planar pixels)."""
    if len(buf) % CIFAR_RECORD_BYTES != 0:
        raise ParseError(
            f"CIFAR-10 buffer length {len(buf)} is not a multiple of {CIFAR_RECORD_BYTES}")
    n = len(buf) // CIFAR_RECORD_BYTES
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise ParseError(
            f"CIFAR-10 label byte {labels[bad[0]]} > 9 in record {bad[0]} "
            f"(offset {bad[0] * CIFAR_RECORD_BYTES})")
    images = raw[:, 1:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    return ImageDataset(images, labels, source="cifar10")


def write_cifar10_bin(dataset: ImageDataset) -> bytes:
    """Inverse of parse_cifar10_bin for fixtures."""
    pixels = np.round(dataset.images * 255.0).astype(np.uint8).reshape(len(dataset), 3072)
    labels = dataset.labels.astype(np.uint8).reshape(-1, 1)
    return np.hstack([labels, pixels]).tobytes()


def resize_bilinear(image: np.ndarray, size: int = 32) -> np.ndarray:
    """Corner-aligned bilinear upsampling of a (C, H, W) image."""
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    if h > size or w > size:
        raise DataError(f"resize_bilinear: source {h}x{w} larger than target {size}")
    if (h, w) == (size, size):
        return image.copy()

    def axis_coords(n):
        if n == 1:
            return np.zeros(size), np.zeros(size, dtype=int)
        pos = np.linspace(0.0, n - 1.0, size)
        lo = np.minimum(pos.astype(int), n - 2)
        return pos - lo, lo

    fy, y0 = axis_coords(h)
    fx, x0 = axis_coords(w)
    tl = image[:, y0[:, None], x0[None, :]]
    tr = image[:, y0[:, None], (x0 + (w > 1))[None, :]]
    bl = image[:, (y0 + (h > 1))[:, None], x0[None, :]]
    br = image[:, (y0 + (h > 1))[:, None], (x0 + (w > 1))[None, :]]
    wy = fy[:, None]
    wx = fx[None, :]
    return ((1 - wy) * (1 - wx) * tl + (1 - wy) * wx * tr
            + wy * (1 - wx) * bl + wy * wx * br)


def load_idx_dataset(images_path, labels_path, source: str) -> ImageDataset:
    """Load paired IDX image/label files, resizing images to 32x32."""
    with open(images_path, "rb") as f:
        images = parse_idx(f.read())
    with open(labels_path, "rb") as f:
        labels = parse_idx(f.read())
    if images.ndim != 3:
        raise DataError(f"{images_path}: expected an image IDX file")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise DataError(f"{labels_path}: label count does not match image count")
    resized = np.stack([resize_bilinear(img[None])[0] for img in images])
    return ImageDataset(resized[:, None], labels, source=source)


# ---------------------------------------------------------------------------
# split protocols
# ---------------------------------------------------------------------------

def make_one_class_split(train_labels, test_labels, inlier_class: int,
                         seed: int = 0, max_train: int | None = None) -> OneClassSplit:
    """Original train/test protocol: train on one class, 10% held out for
    validation, outliers sampled uniformly without replacement from the other
    classes' test images to match the inlier test count."""
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    pool = np.nonzero(train_labels == inlier_class)[0]
    if pool.size == 0:
        raise DataError(f"class {inlier_class} absent from training labels")
    rng = np.random.default_rng(seed)
    pool = rng.permutation(pool)
    if max_train is not None:
        pool = pool[:max_train]
    n_val = max(1, int(round(0.1 * pool.size))) if pool.size > 1 else 0
    val, train = pool[:n_val], pool[n_val:]
    test_in = np.nonzero(test_labels == inlier_class)[0]
    others = np.nonzero(test_labels != inlier_class)[0]
    if others.size < test_in.size:
        raise DataError(
            f"need {test_in.size} outliers but only {others.size} available")
    test_out = rng.choice(others, size=test_in.size, replace=False)
    return OneClassSplit(inlier_class, seed, np.sort(train), np.sort(val),
                         np.sort(test_in), np.sort(test_out))


def make_fmnist_folds(labels, inlier_class: int, fold_count: int = 5,
                      outlier_ratio: float = 0.5, seed: int = 0):
    """5-fold protocol: per fold 60/20/20 train/val/test of the inlier class,
    with outliers added so they form `outlier_ratio` of the final test set."""
    if not np.isclose(outlier_ratio * 10, round(outlier_ratio * 10)) or \
            not 0.1 <= outlier_ratio <= 0.5:
        raise DataError(f"outlier_ratio {outlier_ratio} not in {{0.1,...,0.5}}")
    labels = np.asarray(labels)
    pool = np.nonzero(labels == inlier_class)[0]
    if pool.size == 0:
        raise DataError(f"class {inlier_class} absent")
    others = np.nonzero(labels != inlier_class)[0]
    rng = np.random.default_rng(seed)
    pool = rng.permutation(pool)
    folds = np.array_split(pool, fold_count)
    splits = []
    for i in range(fold_count):
        test_in = folds[i]
        rest = np.concatenate([folds[j] for j in range(fold_count) if j != i])
        n_train = int(round(0.75 * rest.size))  # 60% of the class = 75% of the rest
        train, val = rest[:n_train], rest[n_train:]
        n_out = int(round(test_in.size * outlier_ratio / (1.0 - outlier_ratio)))
        if n_out > others.size:
            raise DataError(
                f"ratio {outlier_ratio} needs {n_out} outliers, only {others.size} available")
        test_out = rng.choice(others, size=n_out, replace=False)
        splits.append(OneClassSplit(inlier_class, seed, np.sort(train), np.sort(val),
                                    np.sort(test_in), np.sort(test_out)))
    return splits


# ---------------------------------------------------------------------------
# corruption operators (abnormal-condition emulation)
# ---------------------------------------------------------------------------

CORRUPTION_KINDS = ("gaussian_blur", "exposure", "decolorization")


@dataclass
class CorruptionSpec:
    kind: str
    level: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise DataError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.level <= 5:
            raise DataError(f"corruption level {self.level} not in 1..5")


def _gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def corrupt(image: np.ndarray, spec: CorruptionSpec, seed: int = 0) -> np.ndarray:
    """Apply one corruption; severity is monotone in spec.level.

    gaussian_blur: separable kernel, sigma = 0.5 * level (reflect padding)
    exposure:      gamma adjustment, gamma = 1 + 0.4 * level
    decolorization: blend toward the channel-mean gray, weight 0.2 * level
    """
    del seed  # operators are deterministic; kept for interface stability
    image = np.asarray(image, dtype=np.float64)
    if spec.kind == "gaussian_blur":
        k = _gaussian_kernel1d(0.5 * spec.level)
        r = (k.size - 1) // 2
        padded = np.pad(image, ((0, 0), (r, r), (r, r)), mode="reflect")
        out = np.apply_along_axis(lambda m: np.convolve(m, k, mode="valid"), 1, padded)
        out = np.apply_along_axis(lambda m: np.convolve(m, k, mode="valid"), 2, out)
    elif spec.kind == "exposure":
        out = np.power(np.clip(image, 0.0, 1.0), 1.0 + 0.4 * spec.level)
    else:  # decolorization
        gray = image.mean(axis=0, keepdims=True)
        w = 0.2 * spec.level
        out = (1.0 - w) * image + w * gray
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

def synth_shapes(n: int, kind: str = "circles", seed: int = 0) -> ImageDataset:
    """Antialiased circles or crosses at random position/scale, 1x32x32."""
    if n < 1:
        raise DataError("synth_shapes: n must be >= 1")
    if kind not in ("circles", "crosses"):
        raise DataError(f"unknown shape kind {kind!r}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    images = np.empty((n, 1, 32, 32))
    soft = 1.0  # antialias transition width in pixels
    for i in range(n):
        cy, cx = rng.uniform(11, 21, size=2)
        r = rng.uniform(5, 9)
        if kind == "circles":
            d = np.abs(np.hypot(yy - cy, xx - cx) - r)
            img = np.clip(1.0 - (d - 1.2) / soft, 0.0, 1.0)
        else:
            t = rng.uniform(-0.4, 0.4)  # slight rotation
            u = np.cos(t) * (xx - cx) + np.sin(t) * (yy - cy)
            v = -np.sin(t) * (xx - cx) + np.cos(t) * (yy - cy)
            bar1 = np.maximum(np.abs(u) - 1.4, np.abs(v) - r)
            bar2 = np.maximum(np.abs(v) - 1.4, np.abs(u) - r)
            d = np.minimum(bar1, bar2)
            img = np.clip(1.0 - d / soft, 0.0, 1.0)
        images[i, 0] = img
    labels = np.zeros(n, dtype=np.int64) if kind == "circles" else np.ones(n, dtype=np.int64)
    return ImageDataset(images, labels, source="synthetic")


_FONT_NAMES = ("DejaVuSans.ttf", "DejaVuSans-Bold.ttf", "DejaVuSerif.ttf",
               "DejaVuSerif-Bold.ttf")


def _digit_fonts():
    from pathlib import Path

    import matplotlib
    font_dir = Path(matplotlib.get_data_path()) / "fonts" / "ttf"
    return [font_dir / name for name in _FONT_NAMES if (font_dir / name).exists()]


def synth_digits(n: int, seed: int = 0, classes=range(10)) -> ImageDataset:
    """Deterministic handwritten-digit stand-in: font-rendered digits 0-9 with
    random font, size, rotation, shift and blur, as 1x32x32 images."""
    from PIL import Image, ImageDraw, ImageFilter, ImageFont

    if n < 1:
        raise DataError("synth_digits: n must be >= 1")
    classes = list(classes)
    rng = np.random.default_rng(seed)
    fonts = _digit_fonts()
    if not fonts:
        raise DataError("no TTF fonts available for digit rendering")
    images = np.empty((n, 1, 32, 32))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        digit = classes[int(rng.integers(len(classes)))]
        font_path = fonts[int(rng.integers(len(fonts)))]
        size = int(rng.integers(34, 52))
        canvas = Image.new("L", (64, 64), 0)
        draw = ImageDraw.Draw(canvas)
        font = ImageFont.truetype(str(font_path), size)
        bbox = draw.textbbox((0, 0), str(digit), font=font)
        tx = 32 - (bbox[0] + bbox[2]) / 2 + rng.uniform(-4, 4)
        ty = 32 - (bbox[1] + bbox[3]) / 2 + rng.uniform(-4, 4)
        draw.text((tx, ty), str(digit), fill=255, font=font)
        canvas = canvas.rotate(rng.uniform(-18, 18), resample=Image.BILINEAR)
        canvas = canvas.filter(ImageFilter.GaussianBlur(rng.uniform(0.4, 1.1)))
        canvas = canvas.resize((32, 32), Image.BILINEAR)
        img = np.asarray(canvas, dtype=np.float64) / 255.0
        peak = img.max()
        if peak > 0:
            img = img / peak
        # handwriting-like variation in stroke intensity
        img = img * rng.uniform(0.55, 1.0)
        images[i, 0] = np.clip(img, 0.0, 1.0)
        labels[i] = digit
    return ImageDataset(images, labels, source="synthetic")
