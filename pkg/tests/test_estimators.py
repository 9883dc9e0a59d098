import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ltdistill.data import gen_blobs, images_to_float
from ltdistill.estimators import (
    DebiasedExpertClassifier,
    DistilledStudentClassifier,
    LongTailDistiller,
)
from ltdistill.validation import check_images, check_labels, check_soft_labels


@pytest.fixture(scope="module")
def xy():
    ds = gen_blobs(2, 30, (3, 8, 8), seed=50)
    return images_to_float(ds.images), ds.labels


class TestValidation:
    def test_check_images_uint8_rescaled(self):
        X = np.full((2, 1, 2, 2), 255, dtype=np.uint8)
        out = check_images(X)
        assert out.dtype == np.float32 and out.max() == 1.0

    def test_check_images_rejects_bad_shapes(self):
        with pytest.raises(ValueError, match="4-d"):
            check_images(np.zeros((3, 4)))
        with pytest.raises(ValueError, match="empty"):
            check_images(np.zeros((0, 1, 2, 2)))
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            check_images(np.full((1, 1, 2, 2), 3.0))

    def test_check_labels(self):
        y = check_labels(np.array([0, 1, 1, 0]), 4)
        assert y.dtype == np.int64
        with pytest.raises(ValueError, match="shape"):
            check_labels(np.array([0, 1]), 4)
        with pytest.raises(ValueError, match="empty classes"):
            check_labels(np.array([0, 2, 0, 2]), 4)

    def test_check_soft_labels(self):
        soft = check_soft_labels(np.eye(3), 3, 3)
        assert soft.dtype == np.float32
        with pytest.raises(ValueError, match="sum"):
            check_soft_labels(np.eye(3) * 2, 3, 3)


class TestSklearnProtocol:
    def test_get_set_params_round_trip(self):
        est = LongTailDistiller(ipc=4, n_aug=3)
        params = est.get_params()
        assert params["ipc"] == 4 and params["n_aug"] == 3
        est.set_params(ipc=7)
        assert est.ipc == 7

    def test_clone(self):
        est = DebiasedExpertClassifier(iterations=12, width=8)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_not_fitted_errors(self, xy):
        X, _ = xy
        with pytest.raises(NotFittedError):
            DebiasedExpertClassifier().predict(X)
        with pytest.raises(NotFittedError):
            DistilledStudentClassifier().predict(X)
        with pytest.raises(NotFittedError):
            LongTailDistiller().distilled_set()


class TestExpertClassifier:
    def test_fit_predict_beats_chance(self, xy):
        X, y = xy
        est = DebiasedExpertClassifier(depth=2, width=8, iterations=60, batch_size=24, seed=1)
        est.fit(X, y)
        acc = (est.predict(X) == y).mean()
        assert acc > 0.8
        proba = est.predict_proba(X[:5])
        assert np.abs(proba.sum(axis=1) - 1).max() < 1e-5


class TestStudentClassifier:
    def test_fit_with_and_without_soft_labels(self, xy):
        X, y = xy
        # balanced subset: 10 per class
        rows = np.concatenate([np.flatnonzero(y == c)[:10] for c in range(2)])
        Xs, ys = X[rows], y[rows]
        est = DistilledStudentClassifier(depth=2, width=8, epochs=10, seed=2)
        est.fit(Xs, ys)
        assert set(np.unique(est.predict(Xs))) <= {0, 1}
        soft = np.eye(2, dtype=np.float32)[ys]
        est.fit(Xs, ys, soft_labels=soft)
        assert est.balanced_score(Xs, ys) >= 0.5

    def test_unbalanced_rejected(self, xy):
        X, y = xy
        rows = np.concatenate([np.flatnonzero(y == 0)[:4], np.flatnonzero(y == 1)[:2]])
        with pytest.raises(ValueError, match="balanced"):
            DistilledStudentClassifier(epochs=1).fit(X[rows], y[rows])


class TestDistiller:
    def test_fit_distill_produces_balanced_set(self, xy):
        X, y = xy
        est = LongTailDistiller(
            ipc=2,
            depth=2,
            width=8,
            expert_iterations=30,
            n_aug=3,
            recovery_iterations=8,
            seed=3,
        )
        images, hard, soft = est.fit_distill(X, y)
        assert images.shape == (4, 3, 8, 8)
        assert np.array_equal(np.bincount(hard), [2, 2])
        assert np.abs(soft.sum(axis=1) - 1).max() < 1e-5
        ds = est.distilled_set()
        ds.validate()
        assert est.report_.final_loss < est.report_.initial_loss
