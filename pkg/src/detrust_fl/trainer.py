"""Desk-scale local training: multiclass logistic regression on flat parameter vectors.

The parameter vector stores the ``(n_features, n_classes)`` weight matrix in
row-major order followed by the ``n_classes`` biases.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, PreconditionError


@dataclass(frozen=True)
class DatasetShard:
    features: np.ndarray
    labels: np.ndarray
    party_id: int = 0

    def __post_init__(self):
        if self.features.ndim != 2:
            raise PreconditionError("features must be a 2-D array")
        if len(self.features) != len(self.labels):
            raise PreconditionError("feature and label row counts differ")

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.01
    local_epochs: int = 3
    batch_size: int = 16


def model_size(n_features: int, n_classes: int) -> int:
    return (n_features + 1) * n_classes


def init_model(n_features: int, n_classes: int) -> np.ndarray:
    return np.zeros(model_size(n_features, n_classes))


def _unpack(model: np.ndarray, n_features: int, n_classes: int):
    if model.size != model_size(n_features, n_classes):
        raise DimensionMismatch(
            f"model has {model.size} parameters, expected {model_size(n_features, n_classes)}"
        )
    W = model[: n_features * n_classes].reshape(n_features, n_classes)
    b = model[n_features * n_classes:]
    return W, b


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(model: np.ndarray, X: np.ndarray, n_classes: int) -> np.ndarray:
    W, b = _unpack(model, X.shape[1], n_classes)
    return _softmax(X @ W + b)


def evaluate(model: np.ndarray, X: np.ndarray, y: np.ndarray, n_classes: int) -> tuple[float, float]:
    """Accuracy and mean cross-entropy."""
    P = predict_proba(model, X, n_classes)
    acc = float(np.mean(P.argmax(axis=1) == y))
    loss = float(-np.mean(np.log(np.clip(P[np.arange(len(y)), y], 1e-12, None))))
    return acc, loss


def local_train(shard: DatasetShard, global_model: np.ndarray, n_classes: int,
                hp: Hyperparams = Hyperparams(), seed: int = 0) -> np.ndarray:
    """Minibatch SGD on softmax cross-entropy, starting from ``global_model``."""
    X, y = shard.features, shard.labels
    d = X.shape[1]
    model = np.array(global_model, dtype=np.float64, copy=True)
    W, b = _unpack(model, d, n_classes)
    W, b = W.copy(), b.copy()
    rng = np.random.default_rng(seed)
    onehot = np.eye(n_classes)[y]
    for _ in range(hp.local_epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), hp.batch_size):
            idx = order[start:start + hp.batch_size]
            P = _softmax(X[idx] @ W + b)
            G = (P - onehot[idx]) / len(idx)
            W -= hp.learning_rate * (X[idx].T @ G)
            b -= hp.learning_rate * G.sum(axis=0)
    return np.concatenate([W.ravel(), b])


def make_blobs(n_samples: int, n_features: int, n_classes: int, *, separation: float = 3.0,
               seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian clusters, one per class, standardized per feature."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, n_features))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True).clip(1e-9)
    y = rng.integers(0, n_classes, size=n_samples)
    X = centers[y] + rng.normal(size=(n_samples, n_features))
    X = (X - X.mean(axis=0)) / X.std(axis=0).clip(1e-9)
    return X, y


def split_shards(X: np.ndarray, y: np.ndarray, n_parties: int, *, partition: str = "iid",
                 seed: int = 0) -> list[DatasetShard]:
    rng = np.random.default_rng(seed)
    if partition == "iid":
        order = rng.permutation(len(y))
    elif partition == "label-skew":
        # sort by label with a random tie-break, so shards see few classes each
        order = np.lexsort((rng.random(len(y)), y))
    else:
        raise PreconditionError(f"unknown partition {partition!r}")
    parts = np.array_split(order, n_parties)
    return [DatasetShard(X[idx], y[idx], j + 1) for j, idx in enumerate(parts)]


def load_csv_shard(path: str | Path, party_id: int = 0) -> DatasetShard:
    """Headerless CSV; the last column is an integer class label."""
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    labels = data[:, -1]
    if not np.all(labels == np.round(labels)):
        raise PreconditionError(f"{path}: last column must hold integer labels")
    return DatasetShard(data[:, :-1].astype(np.float64), labels.astype(np.int64), party_id)
