"""Small feedforward softmax classifiers with explicit access to the final layer.

The network is plain numpy: ReLU hidden layers, a linear final layer and a
softmax cross-entropy loss, trained by minibatch SGD with momentum. Influence
computations elsewhere only ever touch the final weight matrix and bias, so the
estimator exposes the penultimate activation and per-sample gradients of that
layer directly.
"""
from __future__ import annotations

import base64
import copy
import json
import os
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_X_y

CHECKPOINT_FORMAT = "labelsift-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """One SGD run: epochs, initial rate plus (epoch, factor) drops, momentum, batching."""

    epochs: int
    learning_rate: float = 0.1
    lr_drops: tuple[tuple[int, float], ...] = ()
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for epoch, factor in self.lr_drops:
            if epoch < 0 or factor <= 0:
                raise ValueError(f"bad lr drop ({epoch}, {factor})")

    def rate_at(self, epoch: int) -> float:
        """Learning rate in effect for a 0-based epoch index."""
        rate = self.learning_rate
        for drop_epoch, factor in sorted(self.lr_drops):
            if epoch >= drop_epoch:
                rate *= factor
        return rate


def init_layer_params(
    layer_dims: list[int], seed: int
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Uniform +-1/sqrt(fan_in) weights and biases per layer."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return weights, biases


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


class FeedforwardClassifier(BaseEstimator, ClassifierMixin):
    """ReLU network trained with softmax cross-entropy and minibatch SGD + momentum.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Hidden widths; () gives multinomial logistic regression.
    epochs, learning_rate, lr_drops, momentum, batch_size
        Training schedule; `lr_drops` is a tuple of (epoch, factor) pairs, each
        factor applied once the 0-based epoch index is reached.
    n_classes : int or None
        Number of classes; inferred as max(y) + 1 when None.
    standardize : bool
        Scale inputs to zero mean and unit variance, with the statistics frozen
        at fit time and stored in checkpoints.
    random_state : int
        Seeds both initialization and the shuffle order, so two fits with the
        same config produce bit-identical parameters.
    """

    def __init__(
        self,
        hidden_layer_sizes: tuple[int, ...] = (50,),
        epochs: int = 100,
        learning_rate: float = 0.1,
        lr_drops: tuple[tuple[int, float], ...] = (),
        momentum: float = 0.9,
        batch_size: int = 32,
        n_classes: int | None = None,
        standardize: bool = False,
        random_state: int = 0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.lr_drops = lr_drops
        self.momentum = momentum
        self.batch_size = batch_size
        self.n_classes = n_classes
        self.standardize = standardize
        self.random_state = random_state

    # -- fitting ---------------------------------------------------------------

    def train_config(self, **overrides) -> TrainConfig:
        base = dict(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            lr_drops=tuple(tuple(d) for d in self.lr_drops),
            momentum=self.momentum,
            batch_size=self.batch_size,
            seed=self.random_state,
        )
        base.update(overrides)
        return TrainConfig(**base)

    def fit(self, X, y) -> "FeedforwardClassifier":
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        if y.min() < 0:
            raise ValueError("labels must be non-negative integers")
        k = self.n_classes if self.n_classes is not None else int(y.max()) + 1
        k = max(k, 2)
        if y.max() >= k:
            raise ValueError(f"label {y.max()} out of range for {k} classes")
        self.classes_ = np.arange(k)
        self.n_features_in_ = X.shape[1]
        if self.standardize:
            self.input_mean_ = X.mean(axis=0)
            scale = X.std(axis=0)
            self.input_scale_ = np.where(scale > 0.0, scale, 1.0)
        else:
            self.input_mean_ = None
            self.input_scale_ = None
        self.layer_dims_ = [X.shape[1], *self.hidden_layer_sizes, k]
        self.weights_, self.biases_ = init_layer_params(self.layer_dims_, self.random_state)
        self._velocity = None
        self.loss_curve_: list[float] = []
        # shuffle stream kept separate from the init stream
        self._run_sgd(self._transform(X), y, self.train_config(),
                      np.random.default_rng([self.random_state, 1]))
        return self

    def continue_fit(self, X, y, config: TrainConfig) -> "FeedforwardClassifier":
        """Warm-start more SGD epochs on the current parameters."""
        self._require_fitted()
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError("feature dimension changed between fits")
        if y.min() < 0 or y.max() >= len(self.classes_):
            raise ValueError("labels out of range for the fitted classes")
        self._velocity = None  # momentum restarts with the schedule
        # the input scaler stays frozen at its original fit
        self._run_sgd(self._transform(X), y, config, np.random.default_rng(config.seed))
        return self

    def _run_sgd(self, X, y, config: TrainConfig, rng: np.random.Generator) -> None:
        n = X.shape[0]
        if self._velocity is None:
            self._velocity = [
                (np.zeros_like(w), np.zeros_like(b))
                for w, b in zip(self.weights_, self.biases_)
            ]
        for epoch in range(config.epochs):
            rate = config.rate_at(epoch)
            order = rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, config.batch_size):
                batch = order[start : start + config.batch_size]
                epoch_loss += self._sgd_step(X[batch], y[batch], rate, config.momentum) * len(batch)
            self.loss_curve_.append(epoch_loss / n)

    def _sgd_step(self, Xb, yb, rate: float, momentum: float) -> float:
        acts = self._forward(Xb)
        logits = acts[-1]
        logp = _log_softmax(logits)
        loss = float(-logp[np.arange(len(yb)), yb].mean())
        delta = np.exp(logp)
        delta[np.arange(len(yb)), yb] -= 1.0
        delta /= len(yb)
        for layer in range(len(self.weights_) - 1, -1, -1):
            grad_w = acts[layer].T @ delta
            grad_b = delta.sum(axis=0)
            if layer > 0:
                delta = (delta @ self.weights_[layer].T) * (acts[layer] > 0)
            vw, vb = self._velocity[layer]
            vw *= momentum
            vw -= rate * grad_w
            vb *= momentum
            vb -= rate * grad_b
            self.weights_[layer] += vw
            self.biases_[layer] += vb
        return loss

    # -- inference ---------------------------------------------------------------

    def _require_fitted(self) -> None:
        if not hasattr(self, "weights_"):
            raise NotFittedError("this FeedforwardClassifier instance is not fitted yet")

    def _transform(self, X: np.ndarray) -> np.ndarray:
        if self.input_mean_ is None:
            return X
        return (X - self.input_mean_) / self.input_scale_

    def _forward(self, X: np.ndarray) -> list[np.ndarray]:
        """Activations per layer: input, hidden ReLU outputs, final logits."""
        acts = [X]
        h = X
        for i, (w, b) in enumerate(zip(self.weights_, self.biases_)):
            h = h @ w + b
            if i < len(self.weights_) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def decision_function(self, X) -> np.ndarray:
        self._require_fitted()
        X = check_array(X, dtype=np.float64)
        return self._forward(self._transform(X))[-1]

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        # argmax takes the first maximum, so ties go to the lowest class index
        return self.classes_[np.argmax(scores, axis=1)]

    def accuracy(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))

    def per_sample_loss(self, X, y) -> np.ndarray:
        """Cross-entropy of each sample under the current parameters."""
        logp = _log_softmax(self.decision_function(X))
        return -logp[np.arange(len(logp)), np.asarray(y, dtype=np.int64)]

    # -- final-layer access --------------------------------------------------------

    def penultimate(self, X) -> np.ndarray:
        """Activation feeding the final layer (the scaled input itself without hidden layers)."""
        self._require_fitted()
        X = check_array(X, dtype=np.float64)
        return self._forward(self._transform(X))[-2]

    @property
    def n_final_params(self) -> int:
        self._require_fitted()
        return (self.layer_dims_[-2] + 1) * self.layer_dims_[-1]

    def final_layer_grads(self, X, y) -> np.ndarray:
        """Per-sample cross-entropy gradients w.r.t. the final weight matrix and bias.

        The penultimate activation is treated as a fixed feature map. Row i is
        outer([a_i, 1], softmax_i - onehot_i) flattened in C order, so the bias
        block is the last K entries.
        """
        a = self.penultimate(X)
        y = np.asarray(y, dtype=np.int64)
        delta = softmax(a @ self.weights_[-1] + self.biases_[-1])
        delta[np.arange(len(y)), y] -= 1.0
        a_aug = np.hstack([a, np.ones((len(a), 1))])
        return np.einsum("nh,nk->nhk", a_aug, delta).reshape(len(a), -1)

    def final_layer_grad(self, x, y: int) -> np.ndarray:
        """Gradient for one sample; vector of length (h_last + 1) * K."""
        return self.final_layer_grads(np.atleast_2d(x), [int(y)])[0]

    # -- parameter snapshots ---------------------------------------------------------

    def get_flat_params(self) -> np.ndarray:
        self._require_fitted()
        parts = []
        for w, b in zip(self.weights_, self.biases_):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def set_flat_params(self, flat: np.ndarray) -> None:
        self._require_fitted()
        flat = np.asarray(flat, dtype=np.float64)
        total = sum(w.size + b.size for w, b in zip(self.weights_, self.biases_))
        if flat.size != total:
            raise ValueError("flat parameter vector has the wrong length")
        offset = 0
        for w, b in zip(self.weights_, self.biases_):
            w[...] = flat[offset : offset + w.size].reshape(w.shape)
            offset += w.size
            b[...] = flat[offset : offset + b.size]
            offset += b.size

    def copy(self) -> "FeedforwardClassifier":
        return copy.deepcopy(self)

    # -- checkpoints -----------------------------------------------------------------

    def save(self, path: str | os.PathLike) -> None:
        self._require_fitted()
        flat = self.get_flat_params()
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "layer_dims": self.layer_dims_,
            "seed": self.random_state,
            "train": {
                "epochs": self.epochs,
                "learning_rate": self.learning_rate,
                "lr_drops": [list(d) for d in self.lr_drops],
                "momentum": self.momentum,
                "batch_size": self.batch_size,
            },
            "params_b64": base64.b64encode(
                np.ascontiguousarray(flat, dtype="<f8").tobytes()
            ).decode("ascii"),
        }
        if self.input_mean_ is not None:
            doc["input_mean"] = [float(v) for v in self.input_mean_]
            doc["input_scale"] = [float(v) for v in self.input_scale_]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FeedforwardClassifier":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a classifier checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
        dims = [int(d) for d in doc["layer_dims"]]
        train = doc.get("train", {})
        clf = cls(
            hidden_layer_sizes=tuple(dims[1:-1]),
            epochs=train.get("epochs", 0),
            learning_rate=train.get("learning_rate", 0.1),
            lr_drops=tuple(tuple(d) for d in train.get("lr_drops", [])),
            momentum=train.get("momentum", 0.9),
            batch_size=train.get("batch_size", 32),
            n_classes=dims[-1],
            standardize="input_mean" in doc,
            random_state=doc.get("seed", 0),
        )
        clf.classes_ = np.arange(dims[-1])
        clf.n_features_in_ = dims[0]
        clf.layer_dims_ = dims
        clf.weights_, clf.biases_ = init_layer_params(dims, clf.random_state)
        clf._velocity = None
        clf.loss_curve_ = []
        if "input_mean" in doc:
            clf.input_mean_ = np.array(doc["input_mean"], dtype=np.float64)
            clf.input_scale_ = np.array(doc["input_scale"], dtype=np.float64)
        else:
            clf.input_mean_ = None
            clf.input_scale_ = None
        flat = np.frombuffer(base64.b64decode(doc["params_b64"]), dtype="<f8")
        clf.set_flat_params(flat.astype(np.float64))
        return clf
