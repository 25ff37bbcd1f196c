"""Conflict classifiers over fidelity (or hidden-state) features."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import checkpoint
from .exceptions import InputError

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class ConflictPrediction:
    prob_conflict: float
    label: bool
    threshold: float = DEFAULT_THRESHOLD

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PredictorReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self):
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self):
        return asdict(self)


def _softmax_rows(z):
    z = z - z.max(1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(1, keepdims=True)


class MLPConflictPredictor(ClassifierMixin, BaseEstimator):
    """One hidden ReLU layer followed by a two-logit output layer.

    ``hidden_dim=0`` drops the hidden layer and leaves a plain affine
    classifier. Trained with mini-batch Adam on softmax cross-entropy.
    """

    def __init__(self, hidden_dim=64, epochs=200, batch_size=32, learning_rate=1e-2,
                 seed=0, threshold=DEFAULT_THRESHOLD):
        self.hidden_dim = hidden_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.threshold = threshold

    def _init_weights(self, n_in, rng):
        if self.hidden_dim:
            return {
                "w1": rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, self.hidden_dim)),
                "b1": np.zeros(self.hidden_dim),
                "w2": rng.normal(0.0, np.sqrt(1.0 / self.hidden_dim), size=(self.hidden_dim, 2)),
                "b2": np.zeros(2),
            }
        return {"w2": rng.normal(0.0, np.sqrt(1.0 / n_in), size=(n_in, 2)), "b2": np.zeros(2)}

    def _logits(self, X, w, keep=False):
        if "w1" in w:
            pre = X @ w["w1"] + w["b1"]
            hid = np.maximum(pre, 0.0)
        else:
            pre = hid = X
        out = hid @ w["w2"] + w["b2"]
        return (out, pre, hid) if keep else out

    def _loss_and_grads(self, X, y, w):
        out, pre, hid = self._logits(X, w, keep=True)
        prob = _softmax_rows(out)
        n = len(X)
        loss = -np.log(np.clip(prob[np.arange(n), y], 1e-12, None)).mean()
        d_out = prob
        d_out[np.arange(n), y] -= 1.0
        d_out /= n
        grads = {"w2": hid.T @ d_out, "b2": d_out.sum(0)}
        if "w1" in w:
            d_hid = (d_out @ w["w2"].T) * (pre > 0)
            grads["w1"] = X.T @ d_hid
            grads["b1"] = d_hid.sum(0)
        return loss, grads

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = np.asarray(y).astype(bool)
        if len(X) < 2:
            raise InputError("need at least two training examples")
        if len(np.unique(y)) < 2:
            raise InputError("training labels contain a single class")
        self.classes_ = np.array([False, True])
        self.n_features_in_ = X.shape[1]
        rng = np.random.default_rng(self.seed)
        w = self._init_weights(X.shape[1], rng)
        target = y.astype(np.int64)
        m = {k: np.zeros_like(v) for k, v in w.items()}
        v = {k: np.zeros_like(v) for k, v in w.items()}
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        step = 0
        self.initial_loss_ = float(self._loss_and_grads(X, target, w)[0])
        self.loss_history_ = []
        for _ in range(self.epochs):
            order = rng.permutation(len(X))
            epoch_loss = 0.0
            for start in range(0, len(X), self.batch_size):
                idx = order[start:start + self.batch_size]
                loss, grads = self._loss_and_grads(X[idx], target[idx], w)
                epoch_loss += loss * len(idx)
                step += 1
                for k in w:
                    m[k] = beta1 * m[k] + (1 - beta1) * grads[k]
                    v[k] = beta2 * v[k] + (1 - beta2) * grads[k] ** 2
                    m_hat = m[k] / (1 - beta1 ** step)
                    v_hat = v[k] / (1 - beta2 ** step)
                    w[k] = w[k] - self.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
            self.loss_history_.append(epoch_loss / len(X))
        # checkpoints store float32; keep in-memory weights identical to a reload
        self.weights_ = {k: val.astype(np.float32).astype(np.float64) for k, val in w.items()}
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InputError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return _softmax_rows(self._logits(X, self.weights_))

    def predict(self, X):
        return self.predict_proba(X)[:, 1] >= self.threshold

    def predict_one(self, features):
        prob = float(self.predict_proba(np.asarray(features, dtype=np.float64).reshape(1, -1))[0, 1])
        return ConflictPrediction(prob, prob >= self.threshold, self.threshold)

    def save(self, path):
        check_is_fitted(self, "weights_")
        meta = {"kind": "predictor", "params": self.get_params(), "n_features_in": int(self.n_features_in_)}
        return checkpoint.save(path, {k: v for k, v in sorted(self.weights_.items())}, meta=meta)

    @classmethod
    def load(cls, path):
        tensors, meta = checkpoint.load(path)
        if meta.get("kind") != "predictor":
            raise InputError(f"{path} is not a predictor checkpoint")
        est = cls(**meta["params"])
        est.weights_ = {k: v.astype(np.float64) for k, v in tensors.items()}
        est.n_features_in_ = meta["n_features_in"]
        est.classes_ = np.array([False, True])
        return est


class RandomConflictPredictor(ClassifierMixin, BaseEstimator):
    """Ignores features; the k-th call draws from a stream fixed by ``seed``."""

    def __init__(self, p_conflict=0.5, seed=0):
        self.p_conflict = p_conflict
        self.seed = seed

    def fit(self, X=None, y=None):
        if not 0.0 <= self.p_conflict <= 1.0:
            raise InputError("p_conflict must lie in [0, 1]")
        self.classes_ = np.array([False, True])
        self.reset()
        return self

    def reset(self):
        self._rng = np.random.default_rng(self.seed)
        self.calls_ = 0

    def _draw(self):
        if not hasattr(self, "_rng"):
            self.fit()
        self.calls_ += 1
        return bool(self._rng.random() < self.p_conflict)

    def predict(self, X):
        return np.array([self._draw() for _ in range(len(X))])

    def predict_one(self, features=None):
        label = self._draw()
        return ConflictPrediction(float(self.p_conflict), label, DEFAULT_THRESHOLD)


class ConstantConflictPredictor(BaseEstimator):
    """Always returns ``label``; with the true label this is the routing oracle."""

    def __init__(self, label=True):
        self.label = label

    def fit(self, X=None, y=None):
        return self

    def predict(self, X):
        return np.full(len(X), bool(self.label))

    def predict_one(self, features=None):
        return ConflictPrediction(1.0 if self.label else 0.0, bool(self.label), DEFAULT_THRESHOLD)


def report_from_labels(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=bool)
    y_pred = np.asarray(y_pred, dtype=bool)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise InputError("label arrays must be nonempty and equally long")
    tp = int(np.sum(y_true & y_pred))
    fp = int(np.sum(~y_true & y_pred))
    tn = int(np.sum(~y_true & ~y_pred))
    fn = int(np.sum(y_true & ~y_pred))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PredictorReport((tp + tn) / y_true.size, precision, recall, f1, tp, fp, tn, fn)


def evaluate_predictor(predictor, X, y):
    """Confusion-matrix metrics of ``predictor.predict(X)`` against ``y``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise InputError("features must be a nonempty 2-d array")
    return report_from_labels(y, predictor.predict(X))
