"""Scikit-learn style estimators wrapping the disaggregation network.

`NilmStateClassifier` trains one model on pooled windows; the federated
variant partitions windows by household and runs synchronous averaging
rounds.  Both follow the fit/predict contract with get_params/set_params,
so they compose with pipelines and model-selection utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .federation import FederationConfig, run_centralized, run_federated
from .model import ModelConfig, NilmModel, on_probabilities, predict_states
from .validation import check_fitted, check_state_labels, check_windows


class NilmStateClassifier(BaseEstimator):
    """Per-appliance ON/OFF state classifier over aggregate-load windows.

    Parameters mirror the training-table defaults: SGD with momentum on a
    two-way-softmax binary cross-entropy, dropout after the temporal-pooling
    fusion, and deterministic seeded initialization.

    Attributes set by fit: `model_`, `n_appliances_`, `window_len_`,
    `loss_curve_` (mean loss per epoch block).
    """

    def __init__(
        self,
        window_len: int = 126,
        n_appliances: int = 3,
        epochs: int = 100,
        batch_size: int = 32,
        learning_rate: float = 1e-4,
        momentum: float = 0.5,
        dropout: float = 0.1,
        random_state: int = 0,
    ):
        self.window_len = window_len
        self.n_appliances = n_appliances
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.dropout = dropout
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            window_len=self.window_len,
            appliance_count=self.n_appliances,
            dropout_p=self.dropout,
            init_seed=self.random_state,
        )

    def fit(self, X, y):
        X = check_windows(X, self.window_len)
        y = check_state_labels(y, X.shape[0], self.window_len)
        if y.shape[1] != self.n_appliances:
            raise ValueError(f"{y.shape[1]} label rows per window for {self.n_appliances} appliances")
        config = FederationConfig(
            n_clients=1,
            global_rounds=self.epochs,
            local_epochs=1,
            local_batch=self.batch_size,
            eta=self.learning_rate,
            rho=self.momentum,
            dropout=self.dropout,
            global_seed=self.random_state,
            client_seeds=(self.random_state,),
        )
        params, reports = run_centralized(config, self._model_config(), (X, y))
        self.model_ = NilmModel(self._model_config())
        self.model_.load_params(params)
        self.n_appliances_ = self.n_appliances
        self.window_len_ = self.window_len
        self.loss_curve_ = [r.client_losses[0] for r in reports]
        return self

    def predict(self, X) -> np.ndarray:
        check_fitted(self)
        X = check_windows(X, self.window_len_)
        return predict_states(self.model_, X)

    def predict_proba(self, X) -> np.ndarray:
        """ON probabilities per appliance per step, shape (n, I, L)."""
        check_fitted(self)
        X = check_windows(X, self.window_len_)
        return on_probabilities(self.model_, X)


class FederatedNilmStateClassifier(BaseEstimator):
    """Federated trainer: households keep their windows, only parameters move.

    `fit(X, y, households=...)` partitions the windows by the household id
    array; each distinct id becomes one client of the averaging rounds.

    Attributes set by fit: `model_`, `round_reports_`, `client_ids_`.
    """

    def __init__(
        self,
        window_len: int = 126,
        n_appliances: int = 3,
        global_rounds: int = 10,
        local_epochs: int = 10,
        batch_size: int = 32,
        learning_rate: float = 1e-4,
        momentum: float = 0.5,
        dropout: float = 0.1,
        random_state: int = 0,
    ):
        self.window_len = window_len
        self.n_appliances = n_appliances
        self.global_rounds = global_rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.dropout = dropout
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            window_len=self.window_len,
            appliance_count=self.n_appliances,
            dropout_p=self.dropout,
            init_seed=self.random_state,
        )

    def fit(self, X, y, households=None):
        X = check_windows(X, self.window_len)
        y = check_state_labels(y, X.shape[0], self.window_len)
        if households is None:
            households = np.zeros(X.shape[0], dtype=int)
        households = np.asarray(households)
        if households.shape != (X.shape[0],):
            raise ValueError("households must assign one id per window")
        ids = sorted(set(households.tolist()))
        datasets = []
        for hid in ids:
            mask = households == hid
            datasets.append((X[mask], y[mask]))
        config = FederationConfig(
            n_clients=len(ids),
            global_rounds=self.global_rounds,
            local_epochs=self.local_epochs,
            local_batch=self.batch_size,
            eta=self.learning_rate,
            rho=self.momentum,
            dropout=self.dropout,
            global_seed=self.random_state,
            client_seeds=tuple(self.random_state + 1 + i for i in range(len(ids))),
        )
        params, reports = run_federated(config, self._model_config(), datasets)
        self.model_ = NilmModel(self._model_config())
        self.model_.load_params(params)
        self.client_ids_ = ids
        self.round_reports_ = reports
        self.n_appliances_ = self.n_appliances
        self.window_len_ = self.window_len
        return self

    def predict(self, X) -> np.ndarray:
        check_fitted(self)
        X = check_windows(X, self.window_len_)
        return predict_states(self.model_, X)

    def predict_proba(self, X) -> np.ndarray:
        check_fitted(self)
        X = check_windows(X, self.window_len_)
        return on_probabilities(self.model_, X)
