"""Fair per-class BN statistics over a frozen observer.

A frozen-capture pass visits every sample once; per (layer, channel, class)
the running count/mean/M2 triple is updated with a count-proportional
momentum, so every element (sample x spatial position) weighs equally no
matter how batches were cut or ordered. Global targets then average the
per-class statistics uniformly, removing the head-class dominance a plain
element average would keep.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad
from .data import LongTailDataset, dataset_hash, images_to_float
from .nn import MODE_CAPTURE
from .utils import sha256_bytes

BUNDLE_MAGIC = b"LTDDBND1"


class BundleFormatError(ValueError):
    """Bad magic, truncation, or inconsistent stats-bundle headers."""


@dataclass
class ClassMomentsTable:
    """Per (BN layer, channel, class) streaming count/mean/M2 accumulators.

    Counts are element counts (batch rows x spatial positions); channels of
    one layer share them. Accumulation runs in float64 so merge order only
    perturbs results far below the stated tolerances.
    """

    layer_channels: list
    num_classes: int
    counts: list  # per layer (C,) int64
    means: list  # per layer (C, channels) float64
    m2s: list  # per layer (C, channels) float64

    @staticmethod
    def empty(layer_channels, num_classes: int) -> "ClassMomentsTable":
        return ClassMomentsTable(
            layer_channels=list(layer_channels),
            num_classes=num_classes,
            counts=[np.zeros(num_classes, dtype=np.int64) for _ in layer_channels],
            means=[np.zeros((num_classes, ch)) for ch in layer_channels],
            m2s=[np.zeros((num_classes, ch)) for ch in layer_channels],
        )

    def geometry(self):
        return (tuple(self.layer_channels), self.num_classes)


def update_class_moments(
    table: ClassMomentsTable, layer_activations, labels
) -> ClassMomentsTable:
    """Fold one captured batch into the table.

    For each class present, the new mean is (1-a)*old + a*batch_mean with
    a = B / (N + B); M2 gets the parallel-merge cross term so the finalized
    variance is the exact population variance of every contribution.
    """
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= table.num_classes):
        raise ValueError("label out of range")
    if len(layer_activations) != len(table.layer_channels):
        raise ValueError("layer count mismatch")
    classes = np.unique(labels)
    for l, acts in enumerate(layer_activations):
        acts = np.asarray(acts, dtype=np.float64)
        if acts.shape[1] != table.layer_channels[l]:
            raise ValueError(
                f"layer {l}: {acts.shape[1]} channels, table has {table.layer_channels[l]}"
            )
        for c in classes:
            sub = acts[labels == c]
            b = sub.shape[0] * sub.shape[2] * sub.shape[3]
            batch_mean = sub.mean(axis=(0, 2, 3))
            batch_m2 = ((sub - batch_mean[None, :, None, None]) ** 2).sum(axis=(0, 2, 3))
            n_prev = int(table.counts[l][c])
            alpha = b / (n_prev + b)
            delta = batch_mean - table.means[l][c]
            table.means[l][c] += alpha * delta
            table.m2s[l][c] += batch_m2 + delta**2 * (n_prev * b / (n_prev + b))
            table.counts[l][c] = n_prev + b
    return table


def merge_moments(a: ClassMomentsTable, b: ClassMomentsTable) -> ClassMomentsTable:
    """Count-weighted combine of two tables; identity when one is empty."""
    if a.geometry() != b.geometry():
        raise ValueError(f"geometry mismatch: {a.geometry()} vs {b.geometry()}")
    out = ClassMomentsTable.empty(a.layer_channels, a.num_classes)
    for l in range(len(a.layer_channels)):
        na = a.counts[l][:, None].astype(np.float64)
        nb = b.counts[l][:, None].astype(np.float64)
        n = na + nb
        safe = np.where(n > 0, n, 1.0)
        delta = b.means[l] - a.means[l]
        out.means[l] = np.where(n > 0, a.means[l] + delta * (nb / safe), 0.0)
        out.m2s[l] = np.where(
            n > 0, a.m2s[l] + b.m2s[l] + delta**2 * (na * nb / safe), 0.0
        )
        out.counts[l] = a.counts[l] + b.counts[l]
    return out


@dataclass
class RealStatsBundle:
    """Finalized per-layer global and per-class means/variances (targets for
    recovery), with the provenance hashes of what produced them."""

    layer_channels: list
    num_classes: int
    global_means: list  # per layer (channels,) float32
    global_vars: list
    class_means: list  # per layer (C, channels) float32
    class_vars: list
    checkpoint_hash: str = ""
    dataset_hash: str = ""

    def validate(self) -> None:
        for l, ch in enumerate(self.layer_channels):
            if self.global_means[l].shape != (ch,) or self.global_vars[l].shape != (ch,):
                raise ValueError(f"layer {l}: bad global stats shape")
            if self.class_means[l].shape != (self.num_classes, ch):
                raise ValueError(f"layer {l}: bad class stats shape")
            if np.any(self.global_vars[l] < 0) or np.any(self.class_vars[l] < 0):
                raise ValueError(f"layer {l}: negative variance")
            if (
                np.abs(self.class_means[l].mean(axis=0) - self.global_means[l]).max()
                > 1e-6 + 1e-5 * np.abs(self.global_means[l]).max()
            ):
                raise ValueError(f"layer {l}: global mean is not the class average")

    @property
    def num_layers(self) -> int:
        return len(self.layer_channels)


def finalize_global(
    table: ClassMomentsTable, checkpoint_hash: str = "", dataset_hash_: str = ""
) -> RealStatsBundle:
    """Uniform class average of finalized per-class stats (population
    variance M2/count); every (layer, class) cell needs count >= 2."""
    for l in range(len(table.layer_channels)):
        if np.any(table.counts[l] < 2):
            short = np.flatnonzero(table.counts[l] < 2)
            raise ValueError(
                f"layer {l}: classes {short.tolist()} have fewer than 2 contributions"
            )
    class_means, class_vars, global_means, global_vars = [], [], [], []
    for l in range(len(table.layer_channels)):
        cm = table.means[l]
        cv = table.m2s[l] / table.counts[l][:, None]
        class_means.append(cm.astype(np.float32))
        class_vars.append(cv.astype(np.float32))
        global_means.append(cm.mean(axis=0).astype(np.float32))
        global_vars.append(cv.mean(axis=0).astype(np.float32))
    bundle = RealStatsBundle(
        layer_channels=list(table.layer_channels),
        num_classes=table.num_classes,
        global_means=global_means,
        global_vars=global_vars,
        class_means=class_means,
        class_vars=class_vars,
        checkpoint_hash=checkpoint_hash,
        dataset_hash=dataset_hash_,
    )
    bundle.validate()
    return bundle


def _iter_batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield np.arange(start, min(start + batch_size, n))


def capture_batch_activations(model, images_float: np.ndarray):
    """BN-input activations for one batch under frozen-capture, as numpy."""
    with no_grad():
        res = model.forward(Tensor(images_float), MODE_CAPTURE)
    return [t.data for t in res.bn_inputs]


def recalibrate(observer, dataset: LongTailDataset, batch_size: int = 64) -> RealStatsBundle:
    """One frozen-capture pass over the dataset; returns the finalized bundle
    stamped with the observer and dataset hashes."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    model = observer.model
    if tuple(dataset.image_shape) != tuple(model.spec.in_shape):
        raise ValueError(
            f"dataset images {dataset.image_shape} do not match observer "
            f"{model.spec.in_shape}"
        )
    table = ClassMomentsTable.empty(
        [model.spec.width] * model.num_bn_layers, dataset.num_classes
    )
    floats = images_to_float(dataset.images)
    for rows in _iter_batches(floats.shape[0], batch_size):
        acts = capture_batch_activations(model, floats[rows])
        update_class_moments(table, acts, dataset.labels[rows])
    return finalize_global(
        table,
        checkpoint_hash=observer.content_hash(),
        dataset_hash_=dataset_hash(dataset),
    )


def ema_reference_stats(observer, dataset: LongTailDataset, batch_size: int = 64,
                        momentum: float = 0.1, sort_by_class: bool = True):
    """Fixed-momentum EMA per class over a (by default class-sorted) pass.

    This is the naive estimator the dynamic momentum replaces: initialized at
    zero mean / unit variance and dominated by late batches, it drifts from
    the fair per-class statistics on skewed data. Returns (means, vars) lists
    shaped like the bundle's class stats.
    """
    model = observer.model
    num_classes = dataset.num_classes
    ch = model.spec.width
    layers = model.num_bn_layers
    means = [np.zeros((num_classes, ch)) for _ in range(layers)]
    variances = [np.ones((num_classes, ch)) for _ in range(layers)]
    order = (
        np.argsort(dataset.labels, kind="stable")
        if sort_by_class
        else np.arange(dataset.labels.size)
    )
    floats = images_to_float(dataset.images)
    for rows in _iter_batches(order.size, batch_size):
        rows = order[rows]
        acts = capture_batch_activations(model, floats[rows])
        labels = dataset.labels[rows]
        for l in range(layers):
            a = acts[l].astype(np.float64)
            for c in np.unique(labels):
                sub = a[labels == c]
                bm = sub.mean(axis=(0, 2, 3))
                bv = sub.var(axis=(0, 2, 3))
                means[l][c] = (1 - momentum) * means[l][c] + momentum * bm
                variances[l][c] = (1 - momentum) * variances[l][c] + momentum * bv
    return means, variances


def running_stats_bundle(observer, num_classes: int, dataset_hash_: str = "") -> RealStatsBundle:
    """Bundle built from the observer's raw training-time running statistics
    (the "no recalibration" ablation): class slots are copies of the global
    running values so downstream stages keep identical configuration."""
    model = observer.model
    global_means, global_vars, class_means, class_vars = [], [], [], []
    for bn in model.bns:
        gm = bn.running_mean.astype(np.float32)
        gv = bn.running_var.astype(np.float32)
        global_means.append(gm.copy())
        global_vars.append(gv.copy())
        class_means.append(np.tile(gm, (num_classes, 1)))
        class_vars.append(np.tile(gv, (num_classes, 1)))
    bundle = RealStatsBundle(
        layer_channels=[model.spec.width] * model.num_bn_layers,
        num_classes=num_classes,
        global_means=global_means,
        global_vars=global_vars,
        class_means=class_means,
        class_vars=class_vars,
        checkpoint_hash=observer.content_hash(),
        dataset_hash=dataset_hash_,
    )
    bundle.validate()
    return bundle


# ---------------------------------------------------------------------------
# bundle file: magic, u32 version/L/C, L u32 channel counts, then float32 LE
# arrays in the order global means, global variances, class means, class
# variances (each in layer order), then the two provenance hashes.


def bundle_bytes(bundle: RealStatsBundle) -> bytes:
    bundle.validate()
    parts = [
        BUNDLE_MAGIC,
        struct.pack("<3I", 1, bundle.num_layers, bundle.num_classes),
        struct.pack(f"<{bundle.num_layers}I", *bundle.layer_channels),
    ]
    for group in (bundle.global_means, bundle.global_vars, bundle.class_means, bundle.class_vars):
        for arr in group:
            parts.append(np.asarray(arr, dtype="<f4").tobytes())
    for h in (bundle.checkpoint_hash, bundle.dataset_hash):
        blob = h.encode("utf-8")
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
    return b"".join(parts)


def save_bundle(path, bundle: RealStatsBundle) -> str:
    blob = bundle_bytes(bundle)
    with open(path, "wb") as fh:
        fh.write(blob)
    return sha256_bytes(blob)


def load_bundle(path) -> RealStatsBundle:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = len(BUNDLE_MAGIC)
    if blob[:off] != BUNDLE_MAGIC:
        raise BundleFormatError("bad magic")

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise BundleFormatError("truncated bundle file")
        out = blob[off : off + n]
        off += n
        return out

    version, layers, num_classes = struct.unpack("<3I", take(12))
    if version != 1:
        raise BundleFormatError(f"unsupported bundle version {version}")
    channels = list(struct.unpack(f"<{layers}I", take(4 * layers)))

    def arr(shape):
        n = int(np.prod(shape))
        return np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)

    global_means = [arr((ch,)) for ch in channels]
    global_vars = [arr((ch,)) for ch in channels]
    class_means = [arr((num_classes, ch)) for ch in channels]
    class_vars = [arr((num_classes, ch)) for ch in channels]
    hashes = []
    for _ in range(2):
        (ln,) = struct.unpack("<I", take(4))
        hashes.append(take(ln).decode("utf-8"))
    if off != len(blob):
        raise BundleFormatError("trailing bytes in bundle file")
    bundle = RealStatsBundle(
        layer_channels=channels,
        num_classes=num_classes,
        global_means=global_means,
        global_vars=global_vars,
        class_means=class_means,
        class_vars=class_vars,
        checkpoint_hash=hashes[0],
        dataset_hash=hashes[1],
    )
    bundle.validate()
    return bundle
