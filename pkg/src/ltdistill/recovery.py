"""Statistics-alignment recovery of the synthetic pixels.

The frozen observer's BN layers see the synthetic batch; per layer the batch
mean/variance (and per-class counterparts) are pulled toward the recalibrated
real-data targets by gradient descent on the pixels alone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, gather_rows, l2_norm, square, tmean
from .nn import MODE_CAPTURE
from .optim import OptimConfig, Optimizer
from .recalib import RealStatsBundle


class RecoveryError(RuntimeError):
    """Non-finite loss or a failed descent contract during recovery."""


@dataclass(frozen=True)
class RecoveryConfig:
    iterations: int = 1000
    lambda_cw: float = 1.0
    per_class_batches: bool = False
    clamp: tuple[float, float] = (0.0, 1.0)
    optimizer: OptimConfig = field(default_factory=lambda: OptimConfig(kind="adam", lr=0.05))
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.lambda_cw < 0:
            raise ValueError(f"lambda_cw must be >= 0, got {self.lambda_cw}")
        if self.clamp[0] >= self.clamp[1]:
            raise ValueError(f"bad clamp range {self.clamp}")
        self.optimizer.validate()

    def to_dict(self) -> dict:
        d = {
            "iterations": self.iterations,
            "lambda_cw": self.lambda_cw,
            "per_class_batches": self.per_class_batches,
            "clamp": list(self.clamp),
            "seed": self.seed,
        }
        d["optimizer"] = {
            "kind": self.optimizer.kind,
            "lr": self.optimizer.lr,
            "momentum": self.optimizer.momentum,
        }
        return d


@dataclass
class SynthStats:
    """Graph nodes for the synthetic batch's BN statistics."""

    means: list  # per layer (channels,) Tensor
    variances: list
    class_means: dict  # class -> per-layer list of Tensors (may be empty)
    class_vars: dict


def capture_synth_stats(result, labels, with_classes: bool) -> SynthStats:
    """Build SynthStats from a frozen-capture ForwardResult; per-class stats
    are recomputed from the captured BN inputs over each class's rows."""
    labels = np.asarray(labels)
    class_means: dict = {}
    class_vars: dict = {}
    if with_classes:
        for c in np.unique(labels):
            rows = np.flatnonzero(labels == c)
            cms, cvs = [], []
            for x in result.bn_inputs:
                sub = gather_rows(x, rows)
                m = tmean(sub, axis=(0, 2, 3))
                ch = x.shape[1]
                centered = sub - m.reshape(1, ch, 1, 1)
                v = tmean(square(centered), axis=(0, 2, 3))
                cms.append(m)
                cvs.append(v)
            class_means[int(c)] = cms
            class_vars[int(c)] = cvs
    return SynthStats(
        means=list(result.bn_means),
        variances=list(result.bn_vars),
        class_means=class_means,
        class_vars=class_vars,
    )


def alignment_loss(
    synth: SynthStats,
    bundle: RealStatsBundle,
    lambda_cw: float,
    classes_in_batch,
):
    """Sum over layers of l2 distances between synthetic and target mean and
    variance vectors, plus lambda_cw times the class-wise analogue averaged
    over the classes present.

    Returns (loss Tensor, per-layer mean distances, per-layer variance
    distances, class-wise component value).
    """
    layers = bundle.num_layers
    if len(synth.means) != layers:
        raise ValueError(
            f"synthetic stats have {len(synth.means)} layers, bundle has {layers}"
        )
    total = None
    d_mu, d_sigma = [], []
    for l in range(layers):
        dm = l2_norm(synth.means[l] - bundle.global_means[l])
        ds = l2_norm(synth.variances[l] - bundle.global_vars[l])
        term = dm + ds
        total = term if total is None else total + term
        d_mu.append(dm.item())
        d_sigma.append(ds.item())

    cw_value = 0.0
    if lambda_cw > 0:
        classes = [int(c) for c in classes_in_batch]
        if not classes:
            raise ValueError("class-wise alignment requested with no classes present")
        cw_total = None
        for c in classes:
            if c < 0 or c >= bundle.num_classes:
                raise ValueError(f"class {c} has no statistics in the bundle")
            if c not in synth.class_means:
                raise ValueError(f"class {c} missing from synthetic statistics")
            for l in range(layers):
                dm = l2_norm(synth.class_means[c][l] - bundle.class_means[l][c])
                ds = l2_norm(synth.class_vars[c][l] - bundle.class_vars[l][c])
                term = dm + ds
                cw_total = term if cw_total is None else cw_total + term
        cw = cw_total * (1.0 / len(classes))
        cw_value = cw.item()
        total = total + lambda_cw * cw
    return total, d_mu, d_sigma, cw_value


@dataclass
class AlignmentReport:
    iterations: list = field(default_factory=list)
    total: list = field(default_factory=list)
    d_mu: list = field(default_factory=list)  # per iteration, per-layer list
    d_sigma: list = field(default_factory=list)
    class_wise: list = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")

    def add(self, it, total, d_mu, d_sigma, cw) -> None:
        self.iterations.append(it)
        self.total.append(total)
        self.d_mu.append(list(d_mu))
        self.d_sigma.append(list(d_sigma))
        self.class_wise.append(cw)

    def to_csv(self, path) -> None:
        layers = len(self.d_mu[0]) if self.d_mu else 0
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["iteration", "total_loss"]
            header += [f"d_mu_{l + 1}" for l in range(layers)]
            header += [f"d_sigma_{l + 1}" for l in range(layers)]
            header += ["class_wise"]
            writer.writerow(header)
            for i, it in enumerate(self.iterations):
                row = [it, f"{self.total[i]:.6f}"]
                row += [f"{v:.6f}" for v in self.d_mu[i]]
                row += [f"{v:.6f}" for v in self.d_sigma[i]]
                row += [f"{self.class_wise[i]:.6f}"]
                writer.writerow(row)


def _per_class_synth_stats(model, pixels: Tensor, labels) -> SynthStats:
    """Forward one class at a time and merge into exact pooled statistics.

    Frozen-capture normalizes by stored statistics, so per-class activations
    equal their slice of a joint forward; the pooled mean is the
    count-weighted class mean and the pooled variance adds the between-class
    mean spread (law of total variance over equal-size spatial grids).
    """
    labels = np.asarray(labels)
    classes = [int(c) for c in np.unique(labels)]
    n = labels.size
    class_means: dict = {}
    class_vars: dict = {}
    counts = {}
    layers = model.num_bn_layers
    for c in classes:
        rows = np.flatnonzero(labels == c)
        counts[c] = rows.size
        res = model.forward(gather_rows(pixels, rows), MODE_CAPTURE)
        class_means[c] = list(res.bn_means)
        class_vars[c] = list(res.bn_vars)
    pooled_means, pooled_vars = [], []
    for l in range(layers):
        mean = None
        for c in classes:
            term = (counts[c] / n) * class_means[c][l]
            mean = term if mean is None else mean + term
        var = None
        for c in classes:
            spread = square(class_means[c][l] - mean)
            term = (counts[c] / n) * (class_vars[c][l] + spread)
            var = term if var is None else var + term
        pooled_means.append(mean)
        pooled_vars.append(var)
    return SynthStats(
        means=pooled_means,
        variances=pooled_vars,
        class_means=class_means,
        class_vars=class_vars,
    )


def _eval_loss(model, pixels: Tensor, labels, bundle, cfg: RecoveryConfig):
    if cfg.per_class_batches:
        synth = _per_class_synth_stats(model, pixels, labels)
    else:
        res = model.forward(pixels, MODE_CAPTURE)
        synth = capture_synth_stats(res, labels, with_classes=cfg.lambda_cw > 0)
    return alignment_loss(synth, bundle, cfg.lambda_cw, np.unique(labels))


def recover(
    init_images: np.ndarray,
    observer,
    bundle: RealStatsBundle,
    cfg: RecoveryConfig,
    labels=None,
):
    """Optimize pixels so the observer's BN statistics match the bundle.

    `labels` are the hard labels of the initialized set (class-major layout
    is assumed when omitted). Returns (images, AlignmentReport).
    """
    cfg.validate()
    obs_hash = observer.content_hash()
    if bundle.checkpoint_hash and bundle.checkpoint_hash != obs_hash:
        raise RecoveryError(
            "bundle provenance mismatch: statistics were computed from a "
            "different observer checkpoint"
        )
    model = observer.model
    n = init_images.shape[0]
    if labels is None:
        ipc = n // bundle.num_classes
        labels = np.repeat(np.arange(bundle.num_classes), ipc)
    labels = np.asarray(labels)
    if labels.shape[0] != n:
        raise ValueError("labels must align with images")

    was_grad = [p.requires_grad for p in model.params()]
    for p in model.params():
        p.requires_grad = False
    state_before = model.state_bytes()
    try:
        pixels = Tensor(
            np.clip(np.asarray(init_images, dtype=np.float32), *cfg.clamp),
            requires_grad=True,
        )
        opt = Optimizer([pixels], cfg.optimizer)
        report = AlignmentReport()
        for it in range(1, cfg.iterations + 1):
            loss, d_mu, d_sigma, cw = _eval_loss(model, pixels, labels, bundle, cfg)
            if not np.isfinite(loss.data):
                raise RecoveryError(f"non-finite alignment loss at iteration {it}")
            report.add(it, loss.item(), d_mu, d_sigma, cw)
            loss.backward()
            opt.step()
            opt.zero_grad()
            np.clip(pixels.data, *cfg.clamp, out=pixels.data)
        # one extra evaluation so final_loss reflects the delivered pixels;
        # the per-iteration rows stay aligned with the iteration count
        final_loss, _, _, _ = _eval_loss(model, pixels, labels, bundle, cfg)
        report.initial_loss = report.total[0]
        report.final_loss = final_loss.item()
    finally:
        for p, flag in zip(model.params(), was_grad):
            p.requires_grad = flag
    if model.state_bytes() != state_before:
        raise RecoveryError("observer state changed during recovery")
    if report.final_loss >= report.initial_loss:
        raise RecoveryError(
            f"no descent: initial {report.initial_loss:.6f}, "
            f"final {report.final_loss:.6f}"
        )
    return pixels.data.copy(), report
