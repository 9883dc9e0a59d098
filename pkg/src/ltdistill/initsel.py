"""Confidence-guided multi-round initialization of the distilled images.

Every real image contributes several augmented crops to its class pool; the
teacher scores each by negative cross-entropy against the hard label. Rounds
then fill the per-class budget: each image nominates its best unused crop,
and when nominations exceed the remaining slots only the top scorers get in.
Zero-filled placeholders pad small classes so scoring batches stay
rectangular; they never reach the distilled set.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .augment import CropAugmentConfig, random_resized_crop
from .autodiff import no_grad
from .data import LongTailDataset, images_to_float
from .utils import derive_seed, new_rng


class PoolExhaustedError(RuntimeError):
    """A class ran out of candidates before reaching its budget."""


@dataclass
class Candidate:
    source_image_id: int  # dataset row of the real image; -1 for placeholders
    augmentation_id: int
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    score: float = -math.inf
    used: bool = False
    placeholder: bool = False
    round_selected: int = -1


@dataclass
class CandidatePool:
    """Per-class candidate lists, grouped contiguously by source image."""

    num_classes: int
    n_aug: int
    candidates: list  # per class, list[Candidate]
    scored: bool = False

    def class_candidates(self, c: int):
        return self.candidates[c]

    def validate(self) -> None:
        for c, cands in enumerate(self.candidates):
            seen = set()
            for cand in cands:
                if cand.placeholder:
                    if not cand.used or cand.score != -math.inf:
                        raise ValueError(
                            f"class {c}: placeholder must be used with -inf score"
                        )
                    continue
                key = (cand.source_image_id, cand.augmentation_id)
                if key in seen:
                    raise ValueError(f"class {c}: duplicate candidate id {key}")
                seen.add(key)
                if self.scored and not math.isfinite(cand.score):
                    raise ValueError(f"class {c}: non-finite score on {key}")


def gen_candidates(
    image: np.ndarray, n_aug: int, aug_cfg: CropAugmentConfig, seed: int
) -> list:
    """n_aug seeded random-resized-crop + flip variants of one image."""
    if n_aug < 1:
        raise ValueError("n_aug must be >= 1")
    img = image
    if img.dtype == np.uint8:
        img = images_to_float(img[None])[0]
    rng = new_rng(seed)
    return [random_resized_crop(img, rng, aug_cfg) for _ in range(n_aug)]


def build_pool(
    dataset: LongTailDataset,
    n_aug: int,
    aug_cfg: CropAugmentConfig,
    seed: int,
    regen_round: int = 0,
) -> CandidatePool:
    """Augment every real image n_aug times into a class-wise pool, padding
    small classes with placeholders up to the largest class size."""
    aug_cfg.validate()
    counts = dataset.class_counts()
    if counts.min() < 1:
        raise PoolExhaustedError(
            f"class {int(np.argmin(counts))} has no real images"
        )
    max_images = int(counts.max())
    per_class = []
    for c in range(dataset.num_classes):
        cands = []
        for row in np.asarray(dataset.per_class_index[c]):
            row = int(row)
            imgs = gen_candidates(
                dataset.images[row],
                n_aug,
                aug_cfg,
                derive_seed(seed, "aug", row, regen_round),
            )
            for j, im in enumerate(imgs):
                cands.append(
                    Candidate(
                        source_image_id=row,
                        augmentation_id=regen_round * n_aug + j,
                        image=im,
                    )
                )
        shape = dataset.image_shape
        for k in range((max_images - len(np.asarray(dataset.per_class_index[c]))) * n_aug):
            cands.append(
                Candidate(
                    source_image_id=-1,
                    augmentation_id=k,
                    image=np.zeros(shape, dtype=np.float32),
                    used=True,
                    placeholder=True,
                )
            )
        per_class.append(cands)
    pool = CandidatePool(num_classes=dataset.num_classes, n_aug=n_aug, candidates=per_class)
    pool.validate()
    return pool


def score_pool(teacher, pool: CandidatePool, batch_size: int = 256) -> CandidatePool:
    """Score = log of the teacher's softmax probability of the hard label
    (negative cross-entropy). Placeholders keep -inf; the teacher is not
    mutated."""
    flat, labels = [], []
    for c in range(pool.num_classes):
        for cand in pool.candidates[c]:
            flat.append(cand)
            labels.append(c)
    images = np.stack([cand.image for cand in flat])
    labels = np.asarray(labels)
    with no_grad():
        logits = teacher.predict_logits(images, batch_size=batch_size)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    scores = logp[np.arange(len(flat)), labels]
    for cand, s in zip(flat, scores):
        if not cand.placeholder:
            cand.score = float(s)
    pool.scored = True
    pool.validate()
    return pool


def score_candidates(teacher, cands, label: int, batch_size: int = 256) -> None:
    """Score a flat candidate list against one hard label (regeneration path)."""
    if not cands:
        return
    images = np.stack([cand.image for cand in cands])
    with no_grad():
        logits = teacher.predict_logits(images, batch_size=batch_size)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    for cand, s in zip(cands, logp[:, label]):
        cand.score = float(s)


def _sort_key(cand: Candidate):
    # descending score; ties broken by lower source image then augmentation id
    return (-cand.score, cand.source_image_id, cand.augmentation_id)


def multi_round_select(
    pool: CandidatePool,
    ipc: int,
    regen=None,
    max_regen: int = 3,
) -> list:
    """Fill each class budget round by round; returns per-class ordered lists.

    Per round each source image nominates its highest-scoring unused
    candidate; nominations beyond the remaining slots are cut to the top
    scorers. When a class exhausts its pool, `regen(class_id, round_index)`
    may supply freshly scored candidates, up to max_regen times.
    """
    if ipc < 1:
        raise ValueError("ipc must be >= 1")
    if not pool.scored:
        raise ValueError("pool must be scored before selection")
    selections = []
    for c in range(pool.num_classes):
        cands = list(pool.candidates[c])
        if not any(not cand.placeholder for cand in cands):
            raise PoolExhaustedError(f"class {c} has no real candidates")
        chosen = []
        round_idx = 0
        regen_used = 0
        while len(chosen) < ipc:
            round_idx += 1
            groups = {}
            for cand in cands:
                if cand.used or cand.placeholder:
                    continue
                cur = groups.get(cand.source_image_id)
                if cur is None or _sort_key(cand) < _sort_key(cur):
                    groups[cand.source_image_id] = cand
            nominated = sorted(groups.values(), key=_sort_key)
            if not nominated:
                if regen is not None and regen_used < max_regen:
                    regen_used += 1
                    fresh = regen(c, regen_used)
                    if fresh:
                        cands.extend(fresh)
                        pool.candidates[c].extend(fresh)
                        continue
                raise PoolExhaustedError(
                    f"class {c}: pool exhausted at {len(chosen)}/{ipc} "
                    f"after {regen_used} regeneration rounds"
                )
            remaining = ipc - len(chosen)
            for cand in nominated[:remaining]:
                cand.used = True
                cand.round_selected = round_idx
                chosen.append(cand)
        selections.append(chosen)
    return selections


def assemble_init(selections, ipc: int, num_classes: int):
    """Stack selections class-major into optimizable pixels + hard labels."""
    if len(selections) != num_classes:
        raise ValueError(f"expected {num_classes} classes, got {len(selections)}")
    images, labels = [], []
    for c, chosen in enumerate(selections):
        if len(chosen) != ipc:
            raise ValueError(f"class {c} has {len(chosen)} selections, wants {ipc}")
        for cand in chosen:
            if cand.placeholder:
                raise ValueError(f"class {c}: placeholder leaked into selection")
            images.append(np.asarray(cand.image, dtype=np.float32))
            labels.append(c)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def write_selection_csv(path, selections) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "source_image_id", "augmentation_id", "score", "round"])
        for c, chosen in enumerate(selections):
            for cand in chosen:
                writer.writerow(
                    [c, cand.source_image_id, cand.augmentation_id, f"{cand.score:.6f}", cand.round_selected]
                )


def write_pool_csv(path, pool: CandidatePool) -> None:
    """Audit dump of every candidate's ids and score."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "source_image_id", "augmentation_id", "score", "placeholder"])
        for c in range(pool.num_classes):
            for cand in pool.candidates[c]:
                writer.writerow(
                    [c, cand.source_image_id, cand.augmentation_id,
                     "-inf" if cand.placeholder else f"{cand.score:.6f}",
                     int(cand.placeholder)]
                )


def naive_init(dataset: LongTailDataset, ipc: int, aug_cfg: CropAugmentConfig, seed: int):
    """Ablation baseline: per class, ipc distinct real images, one random
    crop each, no scoring. Errors when a class lacks enough images."""
    counts = dataset.class_counts()
    if counts.min() < ipc:
        short = int(np.argmin(counts))
        raise ValueError(
            f"class {short} has {counts[short]} images, naive init needs {ipc}"
        )
    rng = new_rng(seed, "naive-init")
    images, labels = [], []
    for c in range(dataset.num_classes):
        rows = rng.choice(np.asarray(dataset.per_class_index[c]), size=ipc, replace=False)
        for row in rows:
            img = images_to_float(dataset.images[int(row)][None])[0]
            images.append(random_resized_crop(img, rng, aug_cfg))
            labels.append(c)
    return np.stack(images), np.asarray(labels, dtype=np.int64)
