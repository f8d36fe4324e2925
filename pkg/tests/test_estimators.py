"""Estimator API: sklearn contract, fit/predict behavior, validation."""

import numpy as np
import pytest
from sklearn.base import clone

from fednilm.estimators import FederatedNilmStateClassifier, NilmStateClassifier
from fednilm.tensor import ShapeError


def toy_problem(n=24, window_len=10, appliances=1, seed=0):
    """Windows whose per-window constant state is the sign of their mean.

    Labels constant across the window sit well inside the decoder's temporal
    resolution, so the task is representable by any window length.
    """
    rng = np.random.default_rng(seed)
    offset = rng.choice([-0.4, 0.4], size=(n, 1))
    x = (offset + rng.normal(scale=0.1, size=(n, window_len))).astype(np.float32)
    y = np.repeat((offset > 0).astype(np.uint8)[:, :, None], window_len, axis=2)
    return x, y


def small_params(cls, **extra):
    base = dict(
        window_len=10, n_appliances=1, batch_size=8,
        learning_rate=0.05, momentum=0.5, dropout=0.0, random_state=1,
    )
    base.update(extra)
    return cls(**base)


class TestSklearnContract:
    def test_get_set_params_roundtrip(self):
        est = small_params(NilmStateClassifier, epochs=3)
        params = est.get_params()
        assert params["learning_rate"] == 0.05
        est.set_params(learning_rate=0.01)
        assert est.learning_rate == 0.01

    def test_clone(self):
        est = small_params(NilmStateClassifier, epochs=3)
        twin = clone(est)
        assert twin.get_params() == est.get_params()

    def test_federated_get_params(self):
        est = small_params(FederatedNilmStateClassifier, global_rounds=2, local_epochs=1)
        assert est.get_params()["global_rounds"] == 2


class TestCentralizedEstimator:
    def test_fit_predict_shapes(self):
        x, y = toy_problem()
        est = small_params(NilmStateClassifier, epochs=5).fit(x, y)
        pred = est.predict(x)
        assert pred.shape == y.shape
        assert set(np.unique(pred)) <= {0, 1}
        proba = est.predict_proba(x)
        assert proba.shape == y.shape
        assert (proba >= 0).all() and (proba <= 1).all()

    def test_learns_threshold_task(self):
        x, y = toy_problem(n=48)
        est = small_params(NilmStateClassifier, epochs=60).fit(x, y)
        acc = (est.predict(x) == y).mean()
        assert acc > 0.9

    def test_deterministic_given_seed(self):
        x, y = toy_problem()
        a = small_params(NilmStateClassifier, epochs=4).fit(x, y)
        b = small_params(NilmStateClassifier, epochs=4).fit(x, y)
        assert np.array_equal(
            a.model_.params_buffer(), b.model_.params_buffer()
        )

    def test_loss_curve_recorded(self):
        x, y = toy_problem()
        est = small_params(NilmStateClassifier, epochs=7).fit(x, y)
        assert len(est.loss_curve_) == 7

    def test_unfitted_predict_rejected(self):
        with pytest.raises(RuntimeError, match="not fitted"):
            small_params(NilmStateClassifier).predict(np.zeros((1, 10)))

    def test_bad_window_shape(self):
        est = small_params(NilmStateClassifier, epochs=1)
        x, y = toy_problem()
        est.fit(x, y)
        with pytest.raises(ShapeError, match="length"):
            est.predict(np.zeros((2, 11)))

    def test_bad_labels(self):
        est = small_params(NilmStateClassifier, epochs=1)
        x, _ = toy_problem()
        with pytest.raises(ValueError, match="binary"):
            est.fit(x, np.full((x.shape[0], 1, 10), 2))

    def test_accepts_3d_windows(self):
        x, y = toy_problem()
        est = small_params(NilmStateClassifier, epochs=2).fit(x[:, None, :], y)
        assert est.predict(x[:, None, :]).shape == y.shape


class TestFederatedEstimator:
    def test_fit_with_households(self):
        x, y = toy_problem(n=30)
        households = np.repeat([0, 1, 2], 10)
        est = small_params(
            FederatedNilmStateClassifier, global_rounds=2, local_epochs=2
        ).fit(x, y, households=households)
        assert est.client_ids_ == [0, 1, 2]
        assert len(est.round_reports_) == 2
        assert est.predict(x).shape == y.shape

    def test_single_household_default(self):
        x, y = toy_problem()
        est = small_params(
            FederatedNilmStateClassifier, global_rounds=1, local_epochs=1
        ).fit(x, y)
        assert est.client_ids_ == [0]

    def test_household_length_checked(self):
        x, y = toy_problem()
        est = small_params(FederatedNilmStateClassifier, global_rounds=1, local_epochs=1)
        with pytest.raises(ValueError, match="households"):
            est.fit(x, y, households=np.zeros(3))
