"""Soft relabeling of recovered images and student-side evaluation.

Students train from scratch on the distilled set with a dual objective:
cross-entropy against the hard labels plus a squared-l2 pull of the softmax
output toward the teacher's soft label. Evaluation reports overall and
balanced (macro) accuracy on a class-balanced real test set.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, log_softmax, softmax, square, tmean, tsum
from .augment import pad_crop, random_flip
from .data import LongTailDataset, images_to_float
from .experts import DivergenceError, ExpertCheckpoint
from .nn import MODE_TRAIN, ConvNetSpec, Model, build_model, predict_logits
from .optim import OptimConfig, Optimizer
from .utils import derive_seed, new_rng

IMAGES_MAGIC = b"LTDDIMG1"
LABELS_MAGIC = b"LTDDLBL1"
SOFT_MAGIC = b"LTDDSFT1"


class ArtifactFormatError(ValueError):
    """Bad magic or truncation in a distilled-set artifact file."""


@dataclass
class DistilledSet:
    """Class-balanced synthetic set: pixels, hard labels, soft labels."""

    images: np.ndarray  # (C * ipc, channels, H, W) float32
    hard_labels: np.ndarray  # (C * ipc,) int64
    soft_labels: np.ndarray  # (C * ipc, C) float32 rows summing to 1
    ipc: int
    provenance: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.soft_labels.shape[1]

    def soft_argmax(self) -> np.ndarray:
        return self.soft_labels.argmax(axis=1)

    def validate(self) -> None:
        n = self.images.shape[0]
        if self.hard_labels.shape != (n,) or self.soft_labels.shape[0] != n:
            raise ValueError("labels must align with images")
        counts = np.bincount(self.hard_labels, minlength=self.num_classes)
        if not np.all(counts == self.ipc):
            raise ValueError(f"per-class counts {counts.tolist()} != ipc {self.ipc}")
        sums = self.soft_labels.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise ValueError("soft labels must sum to 1")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("non-finite pixels")


@dataclass
class EvalReport:
    overall: float
    balanced: float
    per_class: np.ndarray
    seeds: list
    arch_name: str

    def validate(self) -> None:
        if np.any(self.per_class < 0) or np.any(self.per_class > 1):
            raise ValueError("per-class accuracies must lie in [0, 1]")
        if abs(self.balanced - float(self.per_class.mean())) > 1e-9:
            raise ValueError("balanced accuracy must equal the per-class mean")


def relabel(teacher: ExpertCheckpoint, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Teacher softmax outputs as soft labels; pure inference."""
    logits = teacher.predict_logits(np.asarray(images, dtype=np.float32), batch_size)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def match_loss(student_logits, hard_labels, soft_labels, kappa1: float, kappa2: float) -> Tensor:
    """kappa1 * CE(softmax, one-hot) + kappa2 * ||soft - softmax||^2, batch-averaged.

    The l2 term compares probability vectors (soft labels are stored as
    distributions), not logits.
    """
    if kappa1 < 0 or kappa2 < 0:
        raise ValueError("kappa weights must be >= 0")
    if kappa1 == 0 and kappa2 == 0:
        raise ValueError("at least one of kappa1, kappa2 must be positive")
    logits = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    y = np.asarray(hard_labels)
    num_classes = logits.shape[1]
    onehot = np.eye(num_classes, dtype=np.float32)[y]
    loss = None
    if kappa1 > 0:
        ce = tmean(-tsum(log_softmax(logits, 1) * onehot, axis=1))
        loss = kappa1 * ce
    if kappa2 > 0:
        probs = softmax(logits, 1)
        soft = np.asarray(soft_labels, dtype=np.float32)
        l2 = tmean(tsum(square(soft - probs), axis=1))
        loss = kappa2 * l2 if loss is None else loss + kappa2 * l2
    return loss


@dataclass(frozen=True)
class StudentTrainConfig:
    epochs: int = 200
    batch_size: int = 64
    kappa1: float = 0.1
    kappa2: float = 1.0
    flip_prob: float = 0.5
    crop_pad: int = 2
    optimizer: OptimConfig = field(default_factory=lambda: OptimConfig(kind="adam", lr=2e-3))
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.optimizer.validate()


def train_student(
    distilled: DistilledSet,
    spec: ConvNetSpec,
    cfg: StudentTrainConfig,
    log_path=None,
) -> Model:
    """Train a fresh student on the distilled set with the dual objective."""
    cfg.validate()
    distilled.validate()
    spec.validate()
    model = build_model(spec, derive_seed(cfg.seed, "student-model"))
    opt = Optimizer(model.params(), cfg.optimizer)
    rng = new_rng(cfg.seed, "student-batches")
    n = distilled.images.shape[0]
    log_rows = []
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        nb = 0
        for start in range(0, n, cfg.batch_size):
            rows = perm[start : start + cfg.batch_size]
            x = distilled.images[rows]
            x = random_flip(x, rng, cfg.flip_prob)
            x = pad_crop(x, rng, cfg.crop_pad)
            res = model.forward(Tensor(x), MODE_TRAIN)
            loss = match_loss(
                res.logits,
                distilled.hard_labels[rows],
                distilled.soft_labels[rows],
                cfg.kappa1,
                cfg.kappa2,
            )
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            opt.zero_grad()
            epoch_loss += loss.item()
            nb += 1
        log_rows.append((epoch, epoch_loss / nb))
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss"])
            for epoch, v in log_rows:
                writer.writerow([epoch, f"{v:.6f}"])
    return model


def evaluate(student: Model, test: LongTailDataset, seed=None, arch_name: str = "") -> EvalReport:
    """Deterministic inference over a class-balanced test set."""
    if test.images.shape[0] == 0:
        raise ValueError("empty test set")
    counts = test.class_counts()
    if counts.min() != counts.max():
        raise ValueError(f"test set is not class-balanced: {counts.tolist()}")
    logits = predict_logits(student, images_to_float(test.images))
    pred = logits.argmax(axis=1)
    per_class = np.array(
        [
            float((pred[idx] == c).mean())
            for c, idx in enumerate(test.per_class_index)
        ]
    )
    report = EvalReport(
        overall=float((pred == test.labels).mean()),
        balanced=float(per_class.mean()),
        per_class=per_class,
        seeds=[seed] if seed is not None else [],
        arch_name=arch_name or f"convnet-d{student.spec.depth}w{student.spec.width}",
    )
    report.validate()
    return report


def random_real_subset(dataset: LongTailDataset, ipc: int, seed: int) -> DistilledSet:
    """Baseline distilled set: ipc random real images per class, one-hot soft
    labels. Errors when a class lacks enough images."""
    counts = dataset.class_counts()
    if counts.min() < ipc:
        short = int(np.argmin(counts))
        raise ValueError(f"class {short} has {counts[short]} images, needs {ipc}")
    rng = new_rng(seed, "random-baseline")
    images, labels = [], []
    for c in range(dataset.num_classes):
        rows = rng.choice(np.asarray(dataset.per_class_index[c]), size=ipc, replace=False)
        images.append(images_to_float(dataset.images[rows]))
        labels.extend([c] * ipc)
    labels = np.asarray(labels, dtype=np.int64)
    soft = np.eye(dataset.num_classes, dtype=np.float32)[labels]
    ds = DistilledSet(
        images=np.concatenate(images),
        hard_labels=labels,
        soft_labels=soft,
        ipc=ipc,
        provenance={"kind": "random-real-subset", "seed": str(seed)},
    )
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# distilled-set artifact directory: images.bin, hard_labels.bin,
# soft_labels.bin, provenance.txt (report.csv is written by evaluation).


def _write(path, blob: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(blob)


def save_image_set(dirpath, images: np.ndarray, labels: np.ndarray) -> None:
    """images.bin + hard_labels.bin for intermediate (unlabeled-soft) sets."""
    os.makedirs(dirpath, exist_ok=True)
    images = np.asarray(images, dtype=np.float32)
    n, c, h, w = images.shape
    _write(
        os.path.join(dirpath, "images.bin"),
        IMAGES_MAGIC + struct.pack("<4I", n, c, h, w) + images.astype("<f4").tobytes(),
    )
    _write(
        os.path.join(dirpath, "hard_labels.bin"),
        LABELS_MAGIC
        + struct.pack("<2I", n, 0)
        + np.asarray(labels).astype("<u4").tobytes(),
    )


def load_image_set(dirpath):
    (n, c, h, w), body = _read_exact(
        os.path.join(dirpath, "images.bin"), IMAGES_MAGIC, "<4I"
    )
    if len(body) != 4 * n * c * h * w:
        raise ArtifactFormatError("images.bin: truncated")
    images = np.frombuffer(body, dtype="<f4").reshape(n, c, h, w).astype(np.float32)
    (n2, _), body = _read_exact(
        os.path.join(dirpath, "hard_labels.bin"), LABELS_MAGIC, "<2I"
    )
    if n2 != n or len(body) != 4 * n:
        raise ArtifactFormatError("hard_labels.bin: truncated")
    labels = np.frombuffer(body, dtype="<u4").astype(np.int64)
    return images, labels


def save_distilled(dirpath, distilled: DistilledSet) -> None:
    distilled.validate()
    os.makedirs(dirpath, exist_ok=True)
    n, c, h, w = distilled.images.shape
    _write(
        os.path.join(dirpath, "images.bin"),
        IMAGES_MAGIC
        + struct.pack("<4I", n, c, h, w)
        + distilled.images.astype("<f4").tobytes(),
    )
    _write(
        os.path.join(dirpath, "hard_labels.bin"),
        LABELS_MAGIC
        + struct.pack("<2I", n, distilled.ipc)
        + distilled.hard_labels.astype("<u4").tobytes(),
    )
    _write(
        os.path.join(dirpath, "soft_labels.bin"),
        SOFT_MAGIC
        + struct.pack("<2I", n, distilled.num_classes)
        + distilled.soft_labels.astype("<f4").tobytes(),
    )
    lines = [f"{k}={v}" for k, v in sorted(distilled.provenance.items())]
    with open(os.path.join(dirpath, "provenance.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_exact(path, magic: bytes, header_fmt: str):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(magic) or blob[: len(magic)] != magic:
        raise ArtifactFormatError(f"{os.path.basename(path)}: bad magic")
    need = len(magic) + struct.calcsize(header_fmt)
    if len(blob) < need:
        raise ArtifactFormatError(f"{os.path.basename(path)}: truncated")
    header = struct.unpack(header_fmt, blob[len(magic) : need])
    return header, blob[need:]


def load_distilled(dirpath) -> DistilledSet:
    (n, c, h, w), body = _read_exact(
        os.path.join(dirpath, "images.bin"), IMAGES_MAGIC, "<4I"
    )
    if len(body) != 4 * n * c * h * w:
        raise ArtifactFormatError("images.bin: truncated")
    images = np.frombuffer(body, dtype="<f4").reshape(n, c, h, w).astype(np.float32)
    (n2, ipc), body = _read_exact(
        os.path.join(dirpath, "hard_labels.bin"), LABELS_MAGIC, "<2I"
    )
    if n2 != n or len(body) != 4 * n:
        raise ArtifactFormatError("hard_labels.bin: truncated")
    hard = np.frombuffer(body, dtype="<u4").astype(np.int64)
    (n3, ncls), body = _read_exact(
        os.path.join(dirpath, "soft_labels.bin"), SOFT_MAGIC, "<2I"
    )
    if n3 != n or len(body) != 4 * n * ncls:
        raise ArtifactFormatError("soft_labels.bin: truncated")
    soft = np.frombuffer(body, dtype="<f4").reshape(n, ncls).astype(np.float32)
    provenance = {}
    prov_path = os.path.join(dirpath, "provenance.txt")
    if os.path.exists(prov_path):
        for line in open(prov_path):
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                provenance[k] = v
    ds = DistilledSet(
        images=images, hard_labels=hard, soft_labels=soft, ipc=ipc, provenance=provenance
    )
    ds.validate()
    return ds
