"""Debiased expert training: the observer anchors recovery statistics, the
teacher scores candidates and produces soft labels.

Both are trained with the same combined objective: a symmetric mixture
consistency term over two mixed-label augmented views (stop-gradient on the
prediction side) plus a dynamically weighted rebalancing cross-entropy whose
class weights sharpen toward rare classes as training progresses.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import (
    Tensor,
    clip_min,
    log,
    relu,
    softmax,
    sqrt,
    square,
    stop_gradient,
    tmean,
    tsum,
)
from .augment import pad_crop, random_flip
from .data import LongTailDataset, images_to_float
from .nn import (
    MODE_TRAIN,
    ConvNetSpec,
    LinearLayer,
    Model,
    build_model,
    checkpoint_bytes,
    load_checkpoint,
    predict_logits,
    save_checkpoint,
)
from .optim import OptimConfig, Optimizer
from .utils import derive_seed, new_rng

LOG_PROB_FLOOR = 1e-12


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


class HeadStack:
    """Projection (one linear map) and prediction (linear-ReLU-linear),
    all square in the encoder feature dimension."""

    def __init__(self, proj: LinearLayer, pred1: LinearLayer, pred2: LinearLayer):
        self.proj = proj
        self.pred1 = pred1
        self.pred2 = pred2
        self.validate()

    def validate(self) -> None:
        d_out_proj = self.proj.w.shape[1]
        d_out_pred = self.pred2.w.shape[1]
        if d_out_proj != d_out_pred:
            raise ValueError(
                f"projection dim {d_out_proj} != prediction dim {d_out_pred}"
            )

    def params(self):
        return self.proj.params() + self.pred1.params() + self.pred2.params()

    def state_arrays(self):
        return (
            self.proj.state_arrays()
            + self.pred1.state_arrays()
            + self.pred2.state_arrays()
        )

    def project(self, features: Tensor) -> Tensor:
        return self.proj.forward(features)

    def predict(self, z: Tensor) -> Tensor:
        return self.pred2.forward(relu(self.pred1.forward(z)))

    @staticmethod
    def from_arrays(arrs) -> "HeadStack":
        return HeadStack(
            LinearLayer(arrs[0], arrs[1]),
            LinearLayer(arrs[2], arrs[3]),
            LinearLayer(arrs[4], arrs[5]),
        )


def build_heads(feature_dim: int, seed: int) -> HeadStack:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    limit = 1.0 / np.sqrt(feature_dim)

    def lin():
        w = rng.uniform(-limit, limit, size=(feature_dim, feature_dim)).astype(
            np.float32
        )
        return LinearLayer(w, np.zeros(feature_dim, dtype=np.float32))

    return HeadStack(lin(), lin(), lin())


@dataclass(frozen=True)
class ClassFrequency:
    """Per-class sample frequencies plus the reweighting sharpness."""

    r: np.ndarray  # (C,) positive reals
    q: float = 0.5

    def validate(self) -> None:
        if np.any(self.r <= 0):
            raise ValueError("class frequencies must be positive")
        if self.q < 0:
            raise ValueError(f"q must be >= 0, got {self.q}")

    @staticmethod
    def from_dataset(dataset: LongTailDataset, q: float) -> "ClassFrequency":
        counts = dataset.class_counts().astype(np.float64)
        return ClassFrequency(r=counts / counts.sum(), q=q)


@dataclass
class MixedBatch:
    """Two mixed-label augmented views of one anchor batch."""

    views: tuple  # two (B, C, H, W) float arrays
    targets: tuple  # two (B, num_classes) rows summing to 1
    lam: tuple  # two (B,) mix coefficients in [0, 1]

    def validate(self) -> None:
        for t in self.targets:
            if np.abs(t.sum(axis=1) - 1.0).max() > 1e-5:
                raise ValueError("mixed targets must sum to 1")
        for l in self.lam:
            if l.min() < 0 or l.max() > 1:
                raise ValueError("mix coefficients must lie in [0, 1]")


def mix_views(x_a, x_b, y_a, y_b, lam, num_classes: int):
    """Pixel mixup of two batches: returns (images, target distributions)."""
    x_a = np.asarray(x_a, dtype=np.float32)
    x_b = np.asarray(x_b, dtype=np.float32)
    if x_a.shape != x_b.shape:
        raise ValueError(f"shape mismatch: {x_a.shape} vs {x_b.shape}")
    lam = np.asarray(lam, dtype=np.float32).reshape(-1)
    if lam.min() < 0 or lam.max() > 1:
        raise ValueError("lambda must lie in [0, 1]")
    lam_img = lam.reshape(-1, *([1] * (x_a.ndim - 1)))
    images = lam_img * x_a + (1.0 - lam_img) * x_b
    eye = np.eye(num_classes, dtype=np.float32)
    targets = lam[:, None] * eye[np.asarray(y_a)] + (1.0 - lam[:, None]) * eye[
        np.asarray(y_b)
    ]
    return images, targets


def _row_cosine(a: Tensor, b: Tensor) -> Tensor:
    dot = tsum(a * b, axis=1)
    na = sqrt(tsum(square(a), axis=1))
    nb = sqrt(tsum(square(b), axis=1))
    return dot / (na * nb)


def robust_loss(z1, z2, p1, p2) -> Tensor:
    """Negated symmetric cosine between each projection and the opposite
    view's (stop-gradient) prediction. -2 at perfect alignment."""
    ts = []
    for t in (z1, z2, p1, p2):
        t = t if isinstance(t, Tensor) else Tensor(t)
        if t.ndim == 1:
            t = t.reshape(1, -1)
        norms = np.sqrt((t.data.astype(np.float64) ** 2).sum(axis=1))
        if np.any(norms == 0):
            raise ValueError("cosine undefined for zero-norm vectors")
        ts.append(t)
    z1, z2, p1, p2 = ts
    c1 = _row_cosine(z1, stop_gradient(p2))
    c2 = _row_cosine(z2, stop_gradient(p1))
    return -(tmean(c1) + tmean(c2))


def debias_schedule(t: int, total: int) -> float:
    """Weight of the rebalanced term: (t / T)^2."""
    if not 0 <= t <= total:
        raise ValueError(f"iteration {t} outside [0, {total}]")
    return (t / total) ** 2


def debias_loss(pred_probs, targets, freq: ClassFrequency, t: int, total: int) -> Tensor:
    """Convex blend of frequency-reweighted and plain cross-entropy on mixed
    targets; the reweighted share grows as (t/T)^2."""
    freq.validate()
    alpha = debias_schedule(t, total)
    p = pred_probs if isinstance(pred_probs, Tensor) else Tensor(pred_probs)
    y = np.asarray(targets, dtype=np.float32)
    logp = log(clip_min(p, LOG_PROB_FLOOR))
    weights = np.power(freq.r, -freq.q)
    weights = (weights / weights.sum()).astype(np.float32)
    ce = tmean(-tsum(logp * y, axis=1))
    wce = tmean(-tsum(logp * (y * weights[None, :]), axis=1))
    return alpha * wce + (1.0 - alpha) * ce


@dataclass(frozen=True)
class ExpertTrainConfig:
    iterations: int = 600
    batch_size: int = 64
    gamma1: float = 0.5
    gamma2: float = 1.0
    q: float = 0.5
    mixup_alpha: float = 1.0
    use_mixup: bool = True
    flip_prob: float = 0.5
    crop_pad: int = 2
    optimizer: OptimConfig = field(default_factory=lambda: OptimConfig(kind="adam", lr=2e-3))
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("loss weights must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.optimizer.validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExpertCheckpoint:
    """Trained expert: encoder+classifier model, head stack, provenance."""

    model: Model
    heads: HeadStack | None
    meta: dict

    def content_hash(self) -> str:
        return hashlib.sha256(
            checkpoint_bytes(self.model, self.heads, self.meta)
        ).hexdigest()

    def save(self, path) -> str:
        return save_checkpoint(path, self.model, self.heads, self.meta)

    @staticmethod
    def load(path) -> "ExpertCheckpoint":
        model, heads, meta = load_checkpoint(path)
        return ExpertCheckpoint(model, heads, meta)

    def predict_logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return predict_logits(self.model, images, batch_size)


def _make_view(x, y, cfg: ExpertTrainConfig, rng, num_classes):
    xa = random_flip(x, rng, cfg.flip_prob)
    xa = pad_crop(xa, rng, cfg.crop_pad)
    n = xa.shape[0]
    if cfg.use_mixup:
        perm = rng.permutation(n)
        lam = rng.beta(cfg.mixup_alpha, cfg.mixup_alpha, size=n)
    else:
        perm = np.arange(n)
        lam = np.ones(n)
    images, targets = mix_views(xa, xa[perm], y, y[perm], lam, num_classes)
    return images, targets, lam.astype(np.float32)


def make_mixed_batch(x, y, cfg: ExpertTrainConfig, rng, num_classes: int) -> MixedBatch:
    """Two independent mixup draws (partner and coefficient) of one anchor
    batch, each behind its own flip/crop augmentation."""
    i1, t1, l1 = _make_view(x, y, cfg, rng, num_classes)
    i2, t2, l2 = _make_view(x, y, cfg, rng, num_classes)
    return MixedBatch(views=(i1, i2), targets=(t1, t2), lam=(l1, l2))


def train_expert(
    dataset: LongTailDataset,
    spec: ConvNetSpec,
    cfg: ExpertTrainConfig,
    log_path=None,
) -> ExpertCheckpoint:
    """Train one expert on the long-tailed dataset with the combined loss."""
    cfg.validate()
    spec.validate()
    if dataset.images.shape[0] == 0:
        raise ValueError("empty dataset")
    if tuple(dataset.image_shape) != tuple(spec.in_shape):
        raise ValueError(
            f"dataset images {dataset.image_shape} do not match spec {spec.in_shape}"
        )
    num_classes = dataset.num_classes
    model = build_model(spec, derive_seed(cfg.seed, "expert-model"))
    heads = build_heads(spec.feature_dim, derive_seed(cfg.seed, "expert-heads"))
    freq = ClassFrequency.from_dataset(dataset, cfg.q)
    rng = new_rng(cfg.seed, "expert-batches")
    opt = Optimizer(model.params() + heads.params(), cfg.optimizer)

    all_float = images_to_float(dataset.images)
    n = all_float.shape[0]
    log_rows = []
    for t in range(1, cfg.iterations + 1):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        x, y = all_float[idx], dataset.labels[idx]
        batch = make_mixed_batch(x, y, cfg, rng, num_classes)
        if t == 1:
            batch.validate()
        (v1_img, v2_img), (v1_tgt, v2_tgt) = batch.views, batch.targets

        res1 = model.forward(Tensor(v1_img), MODE_TRAIN)
        res2 = model.forward(Tensor(v2_img), MODE_TRAIN)

        if cfg.gamma1 > 0:
            z1, z2 = heads.project(res1.features), heads.project(res2.features)
            p1, p2 = heads.predict(z1), heads.predict(z2)
            l_rob = robust_loss(z1, z2, p1, p2)
        else:
            l_rob = Tensor(np.float32(0.0))
        l_deb = 0.5 * (
            debias_loss(softmax(res1.logits, 1), v1_tgt, freq, t, cfg.iterations)
            + debias_loss(softmax(res2.logits, 1), v2_tgt, freq, t, cfg.iterations)
        )
        loss = cfg.gamma1 * l_rob + cfg.gamma2 * l_deb
        if not np.isfinite(loss.data):
            raise DivergenceError(f"non-finite loss at iteration {t}")
        loss.backward()
        opt.step()
        opt.zero_grad()
        log_rows.append(
            (t, l_rob.item(), l_deb.item(), loss.item(), debias_schedule(t, cfg.iterations))
        )

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "robust_loss", "debias_loss", "total_loss", "alpha"])
            for row in log_rows:
                writer.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])

    meta = {"arch": spec.to_dict(), "train_config": cfg.to_dict()}
    return ExpertCheckpoint(model, heads, meta)
