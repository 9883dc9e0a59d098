"""Long-tailed dataset construction, synthetic blob rendering, and binary IO.

Class counts follow exponential decay: class c keeps
max(1, round(n0 * beta^(-c/(C-1)))) samples, with round-half-to-even and a
floor of one sample so no class vanishes.
"""

from __future__ import annotations

import csv
import hashlib
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

DATASET_MAGIC = b"LTDD1"

_POSITION_GRID = 4  # blob centers on a 4x4 grid
_PALETTE_RGB = (
    (1.0, 0.2, 0.2),
    (0.2, 1.0, 0.2),
    (0.2, 0.4, 1.0),
    (1.0, 1.0, 0.2),
    (1.0, 0.3, 1.0),
    (0.2, 1.0, 1.0),
    (1.0, 1.0, 1.0),
    (1.0, 0.6, 0.2),
)
_PALETTE_GRAY = ((1.0,), (0.7,), (0.45,), (0.25,))


class DatasetFormatError(ValueError):
    """Bad magic, truncation, or checksum mismatch in a dataset file."""


@dataclass(frozen=True)
class LongTailSpec:
    num_classes: int
    largest_class_count: int
    imbalance_factor: float
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.largest_class_count < 1:
            raise ValueError(
                f"largest_class_count must be >= 1, got {self.largest_class_count}"
            )
        if self.imbalance_factor < 1.0:
            raise ValueError(
                f"imbalance_factor must be >= 1, got {self.imbalance_factor}"
            )


def expected_counts(spec: LongTailSpec) -> np.ndarray:
    """Per-class sample counts under exponential decay."""
    spec.validate()
    c = np.arange(spec.num_classes, dtype=np.float64)
    decay = spec.imbalance_factor ** (-c / (spec.num_classes - 1))
    counts = np.round(spec.largest_class_count * decay)  # round-half-to-even
    return np.maximum(counts, 1).astype(np.int64)


@dataclass
class LongTailDataset:
    """Images with integer labels plus a per-class index for fast grouping."""

    images: np.ndarray  # (N, channels, H, W) uint8
    labels: np.ndarray  # (N,) int64 in [0, C)
    per_class_index: list  # C arrays of row indices, in sampled order
    spec: LongTailSpec | None = None

    @property
    def num_classes(self) -> int:
        return len(self.per_class_index)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.per_class_index], dtype=np.int64)

    def validate(self) -> None:
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise ValueError("images must be (N, C, H, W) uint8")
        n = self.images.shape[0]
        if self.labels.shape != (n,):
            raise ValueError("labels must align with images")
        c = self.num_classes
        if n and (self.labels.min() < 0 or self.labels.max() >= c):
            raise ValueError("labels out of range")
        seen = 0
        for cls, idx in enumerate(self.per_class_index):
            idx = np.asarray(idx)
            if idx.size and not np.all(self.labels[idx] == cls):
                raise ValueError(f"per_class_index for class {cls} is inconsistent")
            seen += idx.size
        if seen != n:
            raise ValueError("per_class_index does not cover the dataset")
        if self.spec is not None:
            want = expected_counts(self.spec)
            got = self.class_counts()
            if not np.array_equal(want, got):
                raise ValueError(f"class counts {got} differ from spec {want}")


def _index_by_class(labels: np.ndarray, num_classes: int) -> list:
    return [np.flatnonzero(labels == c).astype(np.int64) for c in range(num_classes)]


def _take(dataset: LongTailDataset, rows: np.ndarray, spec=None) -> LongTailDataset:
    labels = dataset.labels[rows]
    return LongTailDataset(
        images=dataset.images[rows].copy(),
        labels=labels.copy(),
        per_class_index=_index_by_class(labels, dataset.num_classes),
        spec=spec,
    )


def make_long_tail(source: LongTailDataset, spec: LongTailSpec) -> LongTailDataset:
    """Subsample a balanced source into the exponential-decay profile.

    Per class, count(c) samples are drawn uniformly without replacement; the
    sampled order is kept and rows are laid out class-major.
    """
    spec.validate()
    if source.num_classes != spec.num_classes:
        raise ValueError(
            f"source has {source.num_classes} classes, spec wants {spec.num_classes}"
        )
    counts = expected_counts(spec)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    rows = []
    for c in range(spec.num_classes):
        avail = np.asarray(source.per_class_index[c])
        if avail.size < counts[c]:
            raise ValueError(
                f"class {c} has {avail.size} samples, needs {counts[c]}"
            )
        rows.append(rng.choice(avail, size=counts[c], replace=False))
    return _take(source, np.concatenate(rows), spec=spec)


def gen_blobs(
    num_classes: int,
    n_per_class: int,
    shape: tuple[int, int, int] = (3, 16, 16),
    seed: int = 0,
    noise: float = 0.28,
    jitter: float = 0.10,
    ring_prob: float = 0.0,
) -> LongTailDataset:
    """Balanced procedural dataset: one (grid position, color) blob per class.

    Each sample jitters the blob center, radius and intensity and adds
    uniform pixel noise, so classes are separable but not trivially so.
    With ring_prob > 0 a sample renders as an annulus instead of a filled
    blob at that rate, making classes bimodal: small random subsets then
    under-cover the class appearance while the class identity (position,
    color) stays unambiguous.
    """
    if num_classes < 1 or n_per_class < 1:
        raise ValueError("num_classes and n_per_class must be positive")
    channels, h, w = shape
    if channels < 1 or h < 4 or w < 4:
        raise ValueError(f"unsupported image shape {shape}")
    palette = _PALETTE_RGB if channels >= 3 else _PALETTE_GRAY
    npos = _POSITION_GRID * _POSITION_GRID
    max_classes = npos * len(palette)
    if num_classes > max_classes:
        raise ValueError(
            f"only {max_classes} distinguishable patterns for shape {shape}, "
            f"got num_classes={num_classes}"
        )

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    ys, xs = np.mgrid[0:h, 0:w]
    grid_frac = (np.arange(_POSITION_GRID) + 1.0) / (_POSITION_GRID + 1.0)
    images = np.empty((num_classes * n_per_class, channels, h, w), dtype=np.uint8)
    labels = np.empty(num_classes * n_per_class, dtype=np.int64)
    row = 0
    for c in range(num_classes):
        # stride the grid and rotate the palette so nearby class ids get
        # well-separated (position, color) pairs; the pairs stay unique up
        # to npos * len(palette) classes
        pos = (5 * c) % npos
        cy = grid_frac[pos % _POSITION_GRID] * h
        cx = grid_frac[pos // _POSITION_GRID] * w
        color = np.array(palette[(c + c // npos) % len(palette)], dtype=np.float64)
        if channels > len(color):
            color = np.resize(color, channels)
        for _ in range(n_per_class):
            jy = cy + rng.uniform(-jitter, jitter) * h
            jx = cx + rng.uniform(-jitter, jitter) * w
            radius = (h / 7.0) * rng.uniform(0.7, 1.4)
            amp = rng.uniform(0.55, 1.0)
            d2 = (ys - jy) ** 2 + (xs - jx) ** 2
            if rng.random() < ring_prob:
                r_ring = 1.4 * radius
                blob = np.exp(-((np.sqrt(d2) - r_ring) ** 2) / (2.0 * (0.4 * r_ring) ** 2))
            else:
                blob = np.exp(-d2 / (2.0 * radius**2))
            img = rng.uniform(0.0, noise, size=(channels, h, w))
            img += amp * color[:, None, None] * blob[None, :, :]
            images[row] = np.clip(img * 255.0, 0, 255).astype(np.uint8)
            labels[row] = c
            row += 1
    return LongTailDataset(
        images=images,
        labels=labels,
        per_class_index=_index_by_class(labels, num_classes),
    )


def balanced_split(
    dataset: LongTailDataset, per_class: int, seed: int
) -> tuple[LongTailDataset, LongTailDataset]:
    """Carve a class-balanced subset off; returns (test, remainder), disjoint."""
    if per_class < 0:
        raise ValueError("per_class must be >= 0")
    counts = dataset.class_counts()
    if per_class > counts.min():
        raise ValueError(
            f"per_class={per_class} exceeds smallest class count {counts.min()}"
        )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    test_rows = []
    taken = np.zeros(dataset.images.shape[0], dtype=bool)
    for c in range(dataset.num_classes):
        avail = np.asarray(dataset.per_class_index[c])
        pick = rng.choice(avail, size=per_class, replace=False)
        test_rows.append(pick)
        taken[pick] = True
    test_rows = (
        np.concatenate(test_rows) if test_rows else np.empty(0, dtype=np.int64)
    )
    rest_rows = np.flatnonzero(~taken)
    return _take(dataset, test_rows), _take(dataset, rest_rows)


# ---------------------------------------------------------------------------
# binary format: magic "LTDD1"; u32 N, C, channels, H, W; N u16 labels;
# N*channels*H*W pixel bytes; trailing u32 CRC32 of everything before it.


def dataset_bytes(dataset: LongTailDataset) -> bytes:
    dataset.validate()
    n = dataset.images.shape[0]
    channels, h, w = (dataset.images.shape[1:] if n else (0, 0, 0))
    if n == 0:
        raise ValueError("refusing to serialize an empty dataset")
    if dataset.num_classes > 0xFFFF:
        raise ValueError("too many classes for u16 labels")
    body = b"".join(
        [
            DATASET_MAGIC,
            struct.pack("<5I", n, dataset.num_classes, channels, h, w),
            dataset.labels.astype("<u2").tobytes(),
            dataset.images.tobytes(),
        ]
    )
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_dataset(path, dataset: LongTailDataset) -> str:
    """Write the dataset; returns the sha256 hex digest of the file bytes."""
    blob = dataset_bytes(dataset)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load_dataset(path) -> LongTailDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(DATASET_MAGIC):
        raise DatasetFormatError("truncated dataset file")
    if blob[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DatasetFormatError("bad magic")
    header_end = len(DATASET_MAGIC) + 20
    if len(blob) < header_end:
        raise DatasetFormatError("truncated dataset file")
    n, c, channels, h, w = struct.unpack(
        "<5I", blob[len(DATASET_MAGIC) : header_end]
    )
    expect = header_end + 2 * n + n * channels * h * w + 4
    if len(blob) < expect:
        raise DatasetFormatError("truncated dataset file")
    if len(blob) > expect:
        raise DatasetFormatError("trailing bytes in dataset file")
    (crc_stored,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc_stored:
        raise DatasetFormatError("checksum mismatch")
    off = header_end
    labels = np.frombuffer(blob, dtype="<u2", count=n, offset=off).astype(np.int64)
    off += 2 * n
    images = (
        np.frombuffer(blob, dtype=np.uint8, count=n * channels * h * w, offset=off)
        .reshape(n, channels, h, w)
        .copy()
    )
    ds = LongTailDataset(
        images=images,
        labels=labels,
        per_class_index=_index_by_class(labels, c),
    )
    ds.validate()
    return ds


def dataset_hash(dataset: LongTailDataset) -> str:
    return hashlib.sha256(dataset_bytes(dataset)).hexdigest()


def load_manifest(
    manifest_path, channels: int, height: int, width: int
) -> LongTailDataset:
    """Ingest a `path,label` CSV of raw uint8 image files (no codecs)."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    images, labels = [], []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["path", "label"]:
            raise DatasetFormatError(
                f"manifest header must be path,label, got {reader.fieldnames}"
            )
        for line in reader:
            p = line["path"]
            if not os.path.isabs(p):
                p = os.path.join(base, p)
            raw = open(p, "rb").read()
            if len(raw) != channels * height * width:
                raise DatasetFormatError(
                    f"{line['path']}: expected {channels * height * width} bytes, "
                    f"got {len(raw)}"
                )
            images.append(
                np.frombuffer(raw, dtype=np.uint8).reshape(channels, height, width)
            )
            labels.append(int(line["label"]))
    if not images:
        raise DatasetFormatError("empty manifest")
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = int(labels.max()) + 1
    return LongTailDataset(
        images=np.stack(images),
        labels=labels,
        per_class_index=_index_by_class(labels, num_classes),
    )


def images_to_float(images: np.ndarray) -> np.ndarray:
    """uint8 pixels -> float32 in [0, 1], the network input convention."""
    return np.ascontiguousarray(images, dtype=np.float32) / 255.0
