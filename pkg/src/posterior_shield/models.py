"""Small dense softmax classifiers trained with mini-batch momentum SGD.

:class:`SoftmaxMLP` plays every model role in an extraction experiment: the
victim, the adversary's surrogate and the misinformation model. ``fit``
accepts either integer labels or soft target distributions, so the same
trainer fits a victim on ground truth and a surrogate on returned posteriors.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .exceptions import ConfigError, ParseError, ShapeError
from .simplex import argmax

LOG_CLAMP = 1e-12
MODEL_FORMAT = "posterior-shield-model v1"


@dataclass
class TrainConfig:
    """Optimizer settings. Defaults are the desk-scale ones."""

    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.learning_rate < 0:
            raise ConfigError("must be >= 0", key="learning_rate")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("must lie in [0, 1)", key="momentum")
        if self.weight_decay < 0:
            raise ConfigError("must be >= 0", key="weight_decay")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError("must be 'constant' or 'cosine'", key="schedule")
        if int(self.epochs) < 0 or int(self.batch_size) < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1", key="epochs")
        return self

    def as_params(self):
        params = asdict(self)
        params["random_state"] = params.pop("seed")
        return params

    def to_dict(self):
        return asdict(self)


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def soft_cross_entropy(target, pred):
    """``-sum_i target_i * log(pred_i)`` with `pred` clamped to >= 1e-12.

    Works on single vectors or row batches (one value per row).
    """
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError(f"target {target.shape} vs prediction {pred.shape}")
    out = -(target * np.log(np.maximum(pred, LOG_CLAMP))).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def complement_targets(labels, n_classes):
    """Uniform mass over every wrong class, zero on the true one."""
    labels = np.asarray(labels)
    out = np.full((len(labels), n_classes), 1.0 / (n_classes - 1))
    out[np.arange(len(labels)), labels] = 0.0
    return out


class SoftmaxMLP(ClassifierMixin, BaseEstimator):
    """Fully connected ReLU network with a softmax output.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int, default=(16,)
        Widths of the hidden layers; ``()`` gives multinomial regression.
    epochs, batch_size, learning_rate, momentum, weight_decay, schedule
        Optimizer settings, see :class:`TrainConfig`. Momentum is the
        heavy-ball form; weight decay is an L2 term on weights only.
    random_state : int, default=0
        Seeds initialization and the per-epoch shuffling order.
    n_classes : int or None, default=None
        Output width. Inferred from the targets when None.
    warm_start : bool, default=False
        Continue from the current parameters instead of re-initializing.

    Attributes
    ----------
    coefs_, intercepts_ : lists of ndarray
    loss_curve_ : list of float
        Mean training loss of every epoch.
    initial_loss_ : float
        Training loss before the first update.
    """

    def __init__(self, hidden_layer_sizes=(16,), epochs=100, batch_size=32,
                 learning_rate=0.05, momentum=0.9, weight_decay=5e-4,
                 schedule="cosine", random_state=0, n_classes=None, warm_start=False):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.random_state = random_state
        self.n_classes = n_classes
        self.warm_start = warm_start

    # -- parameters --------------------------------------------------------

    @property
    def layer_sizes(self):
        return [self.n_features_in_, *self.hidden_layer_sizes, len(self.classes_)]

    def initialize(self, n_features, n_classes, rng=None):
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(self.random_state) if rng is None else rng
        self.n_features_in_ = int(n_features)
        self.classes_ = np.arange(int(n_classes))
        sizes = self.layer_sizes
        self.coefs_, self.intercepts_ = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            self.coefs_.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.intercepts_.append(np.zeros(fan_out))
        return self

    @property
    def n_parameters(self):
        return sum(w.size + b.size for w, b in zip(self.coefs_, self.intercepts_))

    # -- forward / backward ------------------------------------------------

    def _check_X(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} features, got shape {X.shape}")
        return X

    def _logits(self, X):
        h = X
        last = len(self.coefs_) - 1
        for i, (w, b) in enumerate(zip(self.coefs_, self.intercepts_)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def decision_function(self, X):
        return self._logits(self._check_X(X))

    def predict_proba(self, X):
        return softmax(self._logits(self._check_X(X)))

    def predict(self, X):
        return argmax(self.predict_proba(X))

    def forward(self, x):
        """Posterior of a single query as a 1-D array."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ShapeError("forward takes one query; use predict_proba for batches")
        return self.predict_proba(x)[0]

    def loss_and_grads(self, X, T):
        """Mean soft cross-entropy on (X, T) and its gradients.

        The loss uses log-softmax, identical to the clamped formula whenever
        every probability exceeds the clamp. Weight decay is not included.
        Returns ``(loss, grad_coefs, grad_intercepts)``.
        """
        activations = [X]
        h = X
        last = len(self.coefs_) - 1
        for i, (w, b) in enumerate(zip(self.coefs_, self.intercepts_)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
                activations.append(h)
        logp = log_softmax(h)
        n = X.shape[0]
        loss = float(-(T * logp).sum() / n)
        delta = (np.exp(logp) * T.sum(axis=1, keepdims=True) - T) / n
        grad_w = [None] * len(self.coefs_)
        grad_b = [None] * len(self.coefs_)
        for i in range(last, -1, -1):
            grad_w[i] = activations[i].T @ delta
            grad_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.coefs_[i].T) * (activations[i] > 0)
        return loss, grad_w, grad_b

    # -- training ------------------------------------------------------------

    def _targets(self, y, n_classes):
        y = np.asarray(y)
        if y.ndim == 2:
            if y.shape[1] != n_classes:
                raise ShapeError(f"soft targets have {y.shape[1]} classes, expected {n_classes}")
            return y.astype(np.float64)
        T = np.zeros((len(y), n_classes))
        T[np.arange(len(y)), y.astype(int)] = 1.0
        return T

    def fit(self, X, y):
        """Train on integer labels ``y`` of shape (n,) or soft targets of shape (n, K)."""
        TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.momentum,
                    self.weight_decay, self.schedule, self.random_state)
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if X.ndim != 2:
            raise ShapeError("X must be 2-D")
        if len(X) != len(y):
            raise ShapeError(f"{len(X)} samples but {len(y)} targets")
        if self.n_classes is not None:
            n_classes = self.n_classes
        elif y.ndim == 2:
            n_classes = y.shape[1]
        else:
            n_classes = int(y.max()) + 1 if len(y) else 2
        if not n_classes >= 2:
            raise ShapeError("need at least two classes")
        rng = np.random.default_rng(self.random_state)
        if not (self.warm_start and hasattr(self, "coefs_")):
            self.initialize(X.shape[1], n_classes, rng)
        elif X.shape[1] != self.n_features_in_:
            raise ShapeError("warm start with a different feature count")
        T = self._targets(y, len(self.classes_))
        self.loss_curve_ = []
        if len(X) == 0:
            self.initial_loss_ = float("nan")
            return self
        self.initial_loss_ = self.loss_and_grads(X, T)[0]

        vel_w = [np.zeros_like(w) for w in self.coefs_]
        vel_b = [np.zeros_like(b) for b in self.intercepts_]
        n = len(X)
        bs = int(self.batch_size)
        for epoch in range(int(self.epochs)):
            lr = self._lr(epoch)
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                loss, gw, gb = self.loss_and_grads(X[idx], T[idx])
                total += loss * len(idx)
                for i in range(len(self.coefs_)):
                    g = gw[i] + self.weight_decay * self.coefs_[i]
                    vel_w[i] *= self.momentum
                    vel_w[i] += g
                    self.coefs_[i] -= lr * vel_w[i]
                    vel_b[i] *= self.momentum
                    vel_b[i] += gb[i]
                    self.intercepts_[i] -= lr * vel_b[i]
            self.loss_curve_.append(total / n)
        return self

    def _lr(self, epoch):
        if self.schedule == "cosine":
            return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.learning_rate


def train(model, X, y, cfg=None):
    """Fit `model` with the optimizer settings of `cfg`; return ``(model, loss_curve)``."""
    if cfg is not None:
        cfg.validate()
        model.set_params(**cfg.as_params())
    model.fit(X, y)
    return model, list(model.loss_curve_)


def evaluate_error(model, X, y):
    """Fraction of rows whose argmax prediction differs from the label."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ShapeError("empty dataset")
    pred = model.predict(X)
    if len(pred) != len(y):
        raise ShapeError("prediction and label counts differ")
    return float(np.mean(pred != y))


def train_misinformation(X, y, n_classes=None, **params):
    """Fit a model toward the complement distribution of every true label.

    The result is confidently wrong on the data it was trained on, which is
    what an adaptive-misinformation defense blends in.
    """
    y = np.asarray(y).astype(int)
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    params.setdefault("hidden_layer_sizes", (16,))
    model = SoftmaxMLP(n_classes=n_classes, **params)
    return model.fit(X, complement_targets(y, n_classes))


def gradient_check(model, X, T, h=1e-5, grad_fn=None):
    """Max relative error between analytic and central-difference gradients.

    ``grad_fn(model, X, T)`` defaults to ``model.loss_and_grads`` and is
    replaceable so tests can feed a deliberately broken gradient. The relative
    error of each parameter is ``|a - n| / max(|a| + |n|, 1e-6)``.
    """
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    grad_fn = grad_fn or (lambda m, X_, T_: m.loss_and_grads(X_, T_))
    _, gw, gb = grad_fn(model, X, T)
    worst = 0.0
    for params, grads in ((model.coefs_, gw), (model.intercepts_, gb)):
        for p, g in zip(params, grads):
            flat, gflat = p.reshape(-1), np.asarray(g).reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                up = model.loss_and_grads(X, T)[0]
                flat[j] = orig - h
                down = model.loss_and_grads(X, T)[0]
                flat[j] = orig
                numeric = (up - down) / (2 * h)
                err = abs(gflat[j] - numeric) / max(abs(gflat[j]) + abs(numeric), 1e-6)
                worst = max(worst, err)
    return worst


# -- persistence -------------------------------------------------------------


def dumps_model(model):
    """Serialize a fitted model to the versioned text format."""
    lines = [MODEL_FORMAT, "layers " + " ".join(str(s) for s in model.layer_sizes)]
    for i, (w, b) in enumerate(zip(model.coefs_, model.intercepts_)):
        lines.append(f"W{i} {w.shape[0]} {w.shape[1]}")
        lines.append(" ".join(repr(float(v)) for v in w.reshape(-1)))
        lines.append(f"b{i} {b.shape[0]}")
        lines.append(" ".join(repr(float(v)) for v in b))
    return "\n".join(lines) + "\n"


def loads_model(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != MODEL_FORMAT:
        raise ParseError(f"expected header {MODEL_FORMAT!r}", line=1)
    try:
        sizes = [int(v) for v in lines[1].split()[1:]]
        model = SoftmaxMLP(hidden_layer_sizes=tuple(sizes[1:-1]), n_classes=sizes[-1])
        model.initialize(sizes[0], sizes[-1])
        pos = 2
        for i in range(len(sizes) - 1):
            rows, cols = (int(v) for v in lines[pos].split()[1:])
            model.coefs_[i] = np.array(lines[pos + 1].split(), dtype=np.float64).reshape(rows, cols)
            model.intercepts_[i] = np.array(lines[pos + 3].split(), dtype=np.float64)
            pos += 4
    except (IndexError, ValueError) as exc:
        raise ParseError(f"malformed model document: {exc}") from exc
    return model


def save_model(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_model(model))


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read())
