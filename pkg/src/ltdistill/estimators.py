"""Scikit-learn-style estimators wrapping the functional pipeline.

These make the toolkit compose with the wider ecosystem: get_params /
set_params / clone work as usual, X is a (N, channels, H, W) array (uint8
or float in [0, 1]) and y holds integer class labels.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .data import LongTailDataset
from .experts import ExpertTrainConfig, train_expert
from .nn import ConvNetSpec
from .optim import OptimConfig
from .recalib import recalibrate
from .recovery import RecoveryConfig, recover
from .augment import CropAugmentConfig
from .initsel import assemble_init, build_pool, multi_round_select, score_pool
from .students import DistilledSet, StudentTrainConfig, relabel, train_student
from .utils import derive_seed
from .validation import check_images, check_labels, check_soft_labels


def _to_dataset(X: np.ndarray, y: np.ndarray) -> LongTailDataset:
    images = np.clip(np.asarray(X, dtype=np.float32) * 255.0, 0, 255).astype(np.uint8)
    num_classes = int(y.max()) + 1
    return LongTailDataset(
        images=images,
        labels=y,
        per_class_index=[np.flatnonzero(y == c) for c in range(num_classes)],
    )


class DebiasedExpertClassifier(BaseEstimator, ClassifierMixin):
    """ConvNet classifier trained with the combined robustness + debiasing
    objective; the building block behind the observer and teacher roles."""

    def __init__(
        self,
        depth=3,
        width=32,
        iterations=500,
        batch_size=64,
        lr=2e-3,
        gamma1=0.5,
        gamma2=1.0,
        q=0.5,
        mixup_alpha=1.0,
        bn_eps=1e-5,
        seed=0,
    ):
        self.depth = depth
        self.width = width
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.q = q
        self.mixup_alpha = mixup_alpha
        self.bn_eps = bn_eps
        self.seed = seed

    def _spec(self, shape, num_classes) -> ConvNetSpec:
        return ConvNetSpec(
            depth=self.depth,
            width=self.width,
            in_shape=shape,
            num_classes=num_classes,
            bn_eps=self.bn_eps,
        )

    def _train_config(self) -> ExpertTrainConfig:
        return ExpertTrainConfig(
            iterations=self.iterations,
            batch_size=self.batch_size,
            gamma1=self.gamma1,
            gamma2=self.gamma2,
            q=self.q,
            mixup_alpha=self.mixup_alpha,
            use_mixup=self.gamma1 > 0 or self.mixup_alpha > 0,
            optimizer=OptimConfig(kind="adam", lr=self.lr),
            seed=self.seed,
        )

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, X.shape[0])
        dataset = _to_dataset(X, y)
        self.classes_ = np.arange(dataset.num_classes)
        self.checkpoint_ = train_expert(
            dataset, self._spec(X.shape[1:], dataset.num_classes), self._train_config()
        )
        return self

    def _checkpoint(self):
        ck = getattr(self, "checkpoint_", None)
        if ck is None:
            raise NotFittedError("fit must be called first")
        return ck

    def decision_function(self, X):
        return self._checkpoint().predict_logits(check_images(X))

    def predict_proba(self, X):
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)


class LongTailDistiller(BaseEstimator):
    """fit(X, y) on a long-tailed dataset; the distilled set comes out of
    `images_`, `hard_labels_`, `soft_labels_` (or `fit_distill`)."""

    def __init__(
        self,
        ipc=10,
        depth=3,
        width=32,
        expert_iterations=500,
        expert_lr=2e-3,
        gamma1=0.5,
        gamma2=1.0,
        q=0.5,
        n_aug=8,
        crop_area_min=0.3,
        recovery_iterations=400,
        recovery_lr=0.05,
        lambda_cw=1.0,
        recalib_batch_size=64,
        seed=0,
    ):
        self.ipc = ipc
        self.depth = depth
        self.width = width
        self.expert_iterations = expert_iterations
        self.expert_lr = expert_lr
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.q = q
        self.n_aug = n_aug
        self.crop_area_min = crop_area_min
        self.recovery_iterations = recovery_iterations
        self.recovery_lr = recovery_lr
        self.lambda_cw = lambda_cw
        self.recalib_batch_size = recalib_batch_size
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, X.shape[0])
        dataset = _to_dataset(X, y)
        spec = ConvNetSpec(
            depth=self.depth,
            width=self.width,
            in_shape=X.shape[1:],
            num_classes=dataset.num_classes,
        )

        def expert_cfg(role):
            return ExpertTrainConfig(
                iterations=self.expert_iterations,
                gamma1=self.gamma1,
                gamma2=self.gamma2,
                q=self.q,
                optimizer=OptimConfig(kind="adam", lr=self.expert_lr),
                seed=derive_seed(self.seed, role),
            )

        self.observer_ = train_expert(dataset, spec, expert_cfg("observer"))
        self.teacher_ = train_expert(dataset, spec, expert_cfg("teacher"))
        self.bundle_ = recalibrate(dataset=dataset, observer=self.observer_,
                                   batch_size=self.recalib_batch_size)

        aug_cfg = CropAugmentConfig(area_range=(self.crop_area_min, 1.0))
        pool = build_pool(dataset, self.n_aug, aug_cfg, derive_seed(self.seed, "init"))
        score_pool(self.teacher_, pool)
        selections = multi_round_select(pool, self.ipc)
        init_images, labels = assemble_init(selections, self.ipc, dataset.num_classes)

        recovered, self.report_ = recover(
            init_images,
            self.observer_,
            self.bundle_,
            RecoveryConfig(
                iterations=self.recovery_iterations,
                lambda_cw=self.lambda_cw,
                optimizer=OptimConfig(kind="adam", lr=self.recovery_lr),
                seed=derive_seed(self.seed, "recovery"),
            ),
            labels=labels,
        )
        self.images_ = recovered
        self.hard_labels_ = labels
        self.soft_labels_ = relabel(self.teacher_, recovered)
        return self

    def fit_distill(self, X, y):
        """fit, then return (images, hard labels, soft labels)."""
        self.fit(X, y)
        return self.images_, self.hard_labels_, self.soft_labels_

    def distilled_set(self) -> DistilledSet:
        if getattr(self, "images_", None) is None:
            raise NotFittedError("fit must be called first")
        return DistilledSet(
            images=self.images_,
            hard_labels=self.hard_labels_,
            soft_labels=self.soft_labels_,
            ipc=self.ipc,
            provenance={
                "observer": self.observer_.content_hash(),
                "teacher": self.teacher_.content_hash(),
            },
        )


class DistilledStudentClassifier(BaseEstimator, ClassifierMixin):
    """Student trained from scratch on a (usually distilled) set with the
    dual hard-label / soft-label objective."""

    def __init__(
        self,
        depth=3,
        width=32,
        epochs=200,
        batch_size=64,
        lr=2e-3,
        kappa1=0.1,
        kappa2=1.0,
        bn_eps=1e-5,
        seed=0,
    ):
        self.depth = depth
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.kappa1 = kappa1
        self.kappa2 = kappa2
        self.bn_eps = bn_eps
        self.seed = seed

    def fit(self, X, y, soft_labels=None):
        X = check_images(X)
        y = check_labels(y, X.shape[0])
        num_classes = int(y.max()) + 1
        counts = np.bincount(y, minlength=num_classes)
        if counts.min() != counts.max():
            raise ValueError(
                f"distilled training set must be class-balanced, got {counts.tolist()}"
            )
        if soft_labels is None:
            # hard labels only: plain cross-entropy
            soft = np.eye(num_classes, dtype=np.float32)[y]
            kappa1 = self.kappa1 if self.kappa1 > 0 else 1.0
            kappa2 = 0.0
        else:
            soft = check_soft_labels(soft_labels, X.shape[0], num_classes)
            kappa1, kappa2 = self.kappa1, self.kappa2
        distilled = DistilledSet(
            images=X,
            hard_labels=y,
            soft_labels=soft,
            ipc=int(counts[0]),
        )
        cfg = StudentTrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            kappa1=kappa1,
            kappa2=kappa2,
            optimizer=OptimConfig(kind="adam", lr=self.lr),
            seed=self.seed,
        )
        spec = ConvNetSpec(
            depth=self.depth,
            width=self.width,
            in_shape=X.shape[1:],
            num_classes=num_classes,
            bn_eps=self.bn_eps,
        )
        self.classes_ = np.arange(num_classes)
        self.model_ = train_student(distilled, spec, cfg)
        return self

    def _model(self):
        model = getattr(self, "model_", None)
        if model is None:
            raise NotFittedError("fit must be called first")
        return model

    def decision_function(self, X):
        from .nn import predict_logits

        return predict_logits(self._model(), check_images(X))

    def predict_proba(self, X):
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)

    def balanced_score(self, X, y):
        """Macro accuracy: unweighted mean of per-class accuracies."""
        pred = self.predict(X)
        y = np.asarray(y)
        return float(
            np.mean([(pred[y == c] == c).mean() for c in np.unique(y)])
        )
