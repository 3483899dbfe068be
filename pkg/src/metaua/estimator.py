"""scikit-learn style wrapper: federated training behind ``fit`` / ``predict_proba``."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .data import Federation
from .fl import LocalTrainConfig, split_client
from .harness import DataConfig, ExperimentConfig, ServerConfig, run_experiment
from .model import Examples, ModelSpec, predict_batch


def check_categorical(X, n_features: Optional[int] = None) -> np.ndarray:
    """Validate a matrix of non-negative integer category ids."""
    X = check_array(X, dtype=None, ensure_2d=True, ensure_all_finite=True)
    if X.dtype.kind == "f":
        if not np.all(np.mod(X, 1) == 0):
            raise ValueError("feature ids must be integers")
    elif X.dtype.kind not in "iu":
        raise ValueError(f"feature ids must be integers, got dtype {X.dtype}")
    X = X.astype(np.int64)
    if X.size and X.min() < 0:
        raise ValueError("feature ids must be >= 0")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, expected {n_features}")
    return X


def check_binary_labels(y) -> np.ndarray:
    y = np.asarray(y)
    check_classification_targets(y)
    y = y.astype(np.float64).ravel()
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y


class FederatedCTRClassifier(ClassifierMixin, BaseEstimator):
    """Federated CTR model trained with MetaUA or a baseline aggregator.

    ``X`` holds categorical ids, one column per field.  Rows are grouped into
    clients by ``clients`` (default: column ``client_column`` of ``X``) and
    ordered within a client by ``timestamps`` (default: row order).
    """

    def __init__(self, strategy: str = "metaua", rounds: int = 200, fraction: float = 0.1, gamma_meta: float = 0.1,
                 attributes: Sequence[str] = ("z2",), learn_scaling: bool = True, learn_weighting: bool = True,
                 server_kind: Optional[str] = None, gamma_s: Optional[float] = None, lr: float = 0.01,
                 batch_size: int = 15, epochs: int = 3, embed_dim: int = 4, cross_layers: int = 1,
                 hidden: Sequence[int] = (16, 8), client_column: int = 0, random_state: int = 0):
        self.strategy = strategy
        self.rounds = rounds
        self.fraction = fraction
        self.gamma_meta = gamma_meta
        self.attributes = attributes
        self.learn_scaling = learn_scaling
        self.learn_weighting = learn_weighting
        self.server_kind = server_kind
        self.gamma_s = gamma_s
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.embed_dim = embed_dim
        self.cross_layers = cross_layers
        self.hidden = hidden
        self.client_column = client_column
        self.random_state = random_state

    def _config(self) -> ExperimentConfig:
        return ExperimentConfig(
            strategy=self.strategy, rounds=int(self.rounds), fraction=float(self.fraction),
            seed=int(self.random_state), attributes=tuple(self.attributes), gamma_meta=float(self.gamma_meta),
            ablation_weighting=bool(self.learn_weighting), ablation_scaling=bool(self.learn_scaling),
            server=ServerConfig(kind=self.server_kind, gamma_s=self.gamma_s),
            local=LocalTrainConfig(self.lr, self.batch_size, self.epochs),
            model={"embed_dim": self.embed_dim, "cross_layers": self.cross_layers, "hidden": tuple(self.hidden)},
            data=DataConfig(),
        )

    def fit(self, X, y, clients=None, timestamps=None):
        X = check_categorical(X)
        y = check_binary_labels(y)
        check_consistent_length(X, y)
        n = X.shape[0]
        if clients is None:
            if not 0 <= self.client_column < X.shape[1]:
                raise ValueError("client_column is out of range")
            clients = X[:, self.client_column]
        clients = np.asarray(clients).ravel()
        ts = np.arange(n) if timestamps is None else np.asarray(timestamps, dtype=np.int64).ravel()
        check_consistent_length(X, clients, ts)
        cfg = self._config()
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        self.cardinalities_ = tuple(int(c) for c in X.max(axis=0) + 1)
        fields = [(f"f{i}", c) for i, c in enumerate(self.cardinalities_)]
        feds = []
        for k, cid in enumerate(np.unique(clients)):
            rows = np.flatnonzero(clients == cid)
            feds.append(split_client(k, Examples(X[rows], y[rows], ts[rows])))
        result = run_experiment(cfg, Federation(feds, fields), write=False)
        self.spec_ = ModelSpec(tuple(fields), **cfg.model)
        self.weights_ = result.weights
        self.history_ = result.metrics
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        X = check_categorical(X, self.n_features_in_)
        if X.size and np.any(X >= np.array(self.cardinalities_)):
            raise ValueError("X contains ids not seen during fit")
        p = predict_batch(self.weights_, Examples(X, np.zeros(len(X)), np.arange(len(X))), self.spec_)
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)
