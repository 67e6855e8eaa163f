"""Feed-forward softmax classifier with exact first and second derivatives.

Parameters are one flat float64 vector laid out layer by layer: each layer's
weight matrix (``out x in``, row-major) followed by its bias (``out``).
The per-example loss is softmax cross-entropy plus ``l2_penalty/2 * |theta|^2``.
Hessian-vector products use Pearlmutter's R-operator, i.e. forward-mode
differentiation of the reverse-mode gradient, so they are exact.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_count, check_inputs, check_labeled, check_labels, check_positive
from .linalg import DimensionError, RngStream

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu")
DENSE_GUARD = 2000

__all__ = [
    "ModelSpec",
    "Dataset",
    "TrainConfig",
    "TrainingDivergedError",
    "init_model",
    "forward",
    "softmax",
    "softmax_scores",
    "loss",
    "per_example_losses",
    "mean_loss",
    "grad",
    "batch_grad",
    "hvp",
    "dense_hessian",
    "penultimate_features",
    "predict_labels",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "MLPClassifier",
]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture ``[d, hidden..., Y]`` plus the L2 term bound to the loss."""

    layer_sizes: tuple
    activation: str = "tanh"
    l2_penalty: float = 0.0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"invalid layer sizes {self.layer_sizes!r}")
        if sizes[-1] < 2:
            raise ValueError("output layer needs at least 2 classes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        check_positive(self.l2_penalty, "l2_penalty", strict=False)
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "l2_penalty", float(self.l2_penalty))

    @property
    def param_count(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def n_features(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_hidden_layers(self) -> int:
        return len(self.layer_sizes) - 2

    def check_params(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.param_count,):
            raise DimensionError(
                f"parameter vector has shape {theta.shape}, expected ({self.param_count},)"
            )
        return theta

    def unpack(self, theta):
        """Views ``[(W, b), ...]`` into ``theta``; no copy."""
        theta = self.check_params(theta)
        layers, offset = [], 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = theta[offset:offset + n_in * n_out].reshape(n_out, n_in)
            offset += n_in * n_out
            b = theta[offset:offset + n_out]
            offset += n_out
            layers.append((W, b))
        return layers


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    n_classes: int | None = None

    def __post_init__(self):
        X = check_inputs(self.inputs, "inputs")
        n_classes = self.n_classes
        y = np.asarray(self.labels)
        if n_classes is None:
            n_classes = int(y.max()) + 1 if y.size else 0
        y = check_labels(y, n_classes)
        if y.shape[0] != X.shape[0]:
            raise DimensionError(f"{X.shape[0]} inputs but {y.shape[0]} labels")
        if self.split not in ("train", "test"):
            raise ValueError("split must be 'train' or 'test'")
        self.inputs, self.labels, self.n_classes = X, y, int(n_classes)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.split, self.n_classes)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        check_positive(self.learning_rate, "learning_rate")
        check_count(self.epochs, "epochs", minimum=0)
        check_count(self.batch_size, "batch_size")


class TrainingDivergedError(RuntimeError):
    def __init__(self, last_finite_epoch: int):
        self.last_finite_epoch = last_finite_epoch
        super().__init__(
            f"training diverged (non-finite loss); last finite epoch {last_finite_epoch}"
        )


def init_model(spec: ModelSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = RngStream.derive(seed, "init_model", *spec.layer_sizes)
    parts = []
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        parts.append(rng.uniform(-limit, limit, size=n_in * n_out))
        parts.append(np.zeros(n_out))
    return np.concatenate(parts)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_derivs(name, z, a):
    """First and second derivative of the activation at ``z`` (``a = act(z)``)."""
    if name == "tanh":
        d1 = 1.0 - a * a
        return d1, -2.0 * a * d1
    return (z > 0).astype(np.float64), np.zeros_like(z)


def _as_batch(spec: ModelSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.n_features:
        raise DimensionError(f"inputs must have {spec.n_features} columns, got shape {X.shape}")
    return X


def _forward_cache(spec, layers, X):
    acts, zs = [X], []
    a = X
    for W, b in layers[:-1]:
        z = a @ W.T + b
        a = _act(spec.activation, z)
        zs.append(z)
        acts.append(a)
    W, b = layers[-1]
    return acts, zs, a @ W.T + b


def softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def forward(spec: ModelSpec, theta, x) -> np.ndarray:
    """Logits for one input row (shape ``(Y,)``) or a batch (``(m, Y)``)."""
    single = np.ndim(x) == 1
    _, _, logits = _forward_cache(spec, spec.unpack(theta), _as_batch(spec, x))
    return logits[0] if single else logits


def softmax_scores(spec: ModelSpec, theta, x) -> np.ndarray:
    return softmax(forward(spec, theta, x))


def penultimate_features(spec: ModelSpec, theta, x) -> np.ndarray:
    """Activations of the last hidden layer."""
    if spec.n_hidden_layers == 0:
        raise ValueError(
            "model has no hidden layer; use raw inputs as features instead"
        )
    single = np.ndim(x) == 1
    acts, _, _ = _forward_cache(spec, spec.unpack(theta), _as_batch(spec, x))
    return acts[-1][0] if single else acts[-1]


def predict_labels(spec: ModelSpec, theta, X) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class id
    return np.argmax(forward(spec, theta, _as_batch(spec, X)), axis=1)


def _penalty(spec, theta):
    return 0.5 * spec.l2_penalty * float(theta @ theta)


def per_example_losses(spec: ModelSpec, theta, X, y) -> np.ndarray:
    theta = spec.check_params(theta)
    X = _as_batch(spec, X)
    y = check_labels(np.atleast_1d(y), spec.n_classes)
    logits = forward(spec, theta, X)
    ce = -_log_softmax(logits)[np.arange(X.shape[0]), y]
    return ce + _penalty(spec, theta)


def loss(spec: ModelSpec, theta, x, y) -> float:
    return float(per_example_losses(spec, theta, np.atleast_2d(x), [y])[0])


def mean_loss(spec: ModelSpec, theta, ds: Dataset) -> float:
    if len(ds) == 0:
        raise ValueError("mean_loss of an empty dataset")
    return float(per_example_losses(spec, theta, ds.inputs, ds.labels).mean())


def batch_grad(spec: ModelSpec, theta, X, y, reduce: str = "mean") -> np.ndarray:
    """Gradient of the mean (or summed) per-example loss over a batch."""
    theta = spec.check_params(theta)
    X = _as_batch(spec, X)
    y = check_labels(np.atleast_1d(y), spec.n_classes)
    m = X.shape[0]
    if m == 0:
        raise ValueError("empty batch")
    weight = 1.0 / m if reduce == "mean" else 1.0
    layers = spec.unpack(theta)
    acts, zs, logits = _forward_cache(spec, layers, X)
    delta = softmax(logits)
    delta[np.arange(m), y] -= 1.0
    delta *= weight
    out = np.empty_like(theta)
    offset = spec.param_count
    for li in range(len(layers) - 1, -1, -1):
        W, b = layers[li]
        a_prev = acts[li]
        gb = delta.sum(axis=0)
        gW = delta.T @ a_prev
        offset -= gb.size
        out[offset:offset + gb.size] = gb
        offset -= gW.size
        out[offset:offset + gW.size] = gW.ravel()
        if li > 0:
            d1, _ = _act_derivs(spec.activation, zs[li - 1], acts[li])
            delta = (delta @ W) * d1
    penalty_scale = spec.l2_penalty * (1.0 if reduce == "mean" else m)
    return out + penalty_scale * theta


def grad(spec: ModelSpec, theta, x, y) -> np.ndarray:
    return batch_grad(spec, theta, np.atleast_2d(x), [y])


def hvp(spec: ModelSpec, theta, X, y, v) -> np.ndarray:
    """Exact mean Hessian-vector product over a batch.

    For relu networks the result is the Hessian of the piecewise-smooth loss,
    which is only meaningful away from activation kinks.
    """
    theta = spec.check_params(theta)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise DimensionError(f"v has shape {v.shape}, expected {theta.shape}")
    X = _as_batch(spec, X)
    if X.shape[0] == 0:
        raise ValueError("hvp needs a nonempty batch")
    y = check_labels(np.atleast_1d(y), spec.n_classes)
    m = X.shape[0]
    layers = spec.unpack(theta)
    dirs = spec.unpack(v)
    acts, zs, logits = _forward_cache(spec, layers, X)

    # forward pass of the directional derivative
    r_acts = [None]
    r_zs = []
    for li, ((W, b), (VW, Vb)) in enumerate(zip(layers, dirs)):
        rz = acts[li] @ VW.T + Vb
        if r_acts[li] is not None:
            rz += r_acts[li] @ W.T
        r_zs.append(rz)
        if li < len(layers) - 1:
            d1, _ = _act_derivs(spec.activation, zs[li], acts[li + 1])
            r_acts.append(d1 * rz)

    s = softmax(logits)
    delta = s.copy()
    delta[np.arange(m), y] -= 1.0
    delta /= m
    rz_out = r_zs[-1]
    r_delta = (s * rz_out - s * (s * rz_out).sum(axis=1, keepdims=True)) / m

    out = np.empty_like(theta)
    offset = spec.param_count
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        VW, _ = dirs[li]
        r_gW = r_delta.T @ acts[li]
        if r_acts[li] is not None:
            r_gW += delta.T @ r_acts[li]
        r_gb = r_delta.sum(axis=0)
        offset -= r_gb.size
        out[offset:offset + r_gb.size] = r_gb
        offset -= r_gW.size
        out[offset:offset + r_gW.size] = r_gW.ravel()
        if li > 0:
            d1, d2 = _act_derivs(spec.activation, zs[li - 1], acts[li])
            back = delta @ W
            r_back = r_delta @ W + delta @ VW
            r_delta = r_back * d1 + back * d2 * r_zs[li - 1]
            delta = back * d1
    return out + spec.l2_penalty * v


def dense_hessian(spec: ModelSpec, theta, X, y) -> np.ndarray:
    """Mean Hessian over a batch, assembled column by column from :func:`hvp`."""
    p = spec.param_count
    if p > DENSE_GUARD:
        raise ValueError(f"dense Hessian refused: p={p} exceeds guard {DENSE_GUARD}")
    H = np.empty((p, p))
    e = np.zeros(p)
    for j in range(p):
        e[j] = 1.0
        H[:, j] = hvp(spec, theta, X, y, e)
        e[j] = 0.0
    return H


def train(spec: ModelSpec, ds: Dataset, cfg: TrainConfig, *, init=None, return_report=False):
    """Mini-batch SGD with a fixed learning rate.

    Returns the trained parameter vector, or ``(theta, report)`` when
    ``return_report`` is set. ``init`` overrides the seeded initialization.
    """
    if ds.n_features != spec.n_features:
        raise DimensionError(f"dataset has {ds.n_features} features, model expects {spec.n_features}")
    theta = init_model(spec, cfg.seed) if init is None else spec.check_params(init).copy()
    rng = RngStream.derive(cfg.seed, "train")
    n = len(ds)
    last_finite = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        # overflow is detected below and reported as divergence
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                theta = theta - cfg.learning_rate * batch_grad(spec, theta, ds.inputs[idx], ds.labels[idx])
            epoch_loss = mean_loss(spec, theta, ds) if np.all(np.isfinite(theta)) else np.nan
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(last_finite)
        last_finite = epoch
    accuracy = float(np.mean(predict_labels(spec, theta, ds.inputs) == ds.labels)) if n else float("nan")
    logger.info("trained %s for %d epochs: train accuracy %.4f", spec.layer_sizes, cfg.epochs, accuracy)
    if return_report:
        return theta, {"train_accuracy": accuracy, "epochs": cfg.epochs,
                       "final_loss": mean_loss(spec, theta, ds) if n else float("nan")}
    return theta


# -- checkpoint file -------------------------------------------------------

_MAGIC = b"IFCK"
_VERSION = 1


def save_checkpoint(path, spec: ModelSpec, theta) -> None:
    """Write ``magic, version:u8, activation:u8, n_sizes:u32, sizes:u32[],
    l2:f64, p:u64, params:f64[p]``, all little-endian."""
    theta = spec.check_params(theta)
    sizes = spec.layer_sizes
    header = _MAGIC + struct.pack(
        f"<BBI{len(sizes)}IdQ",
        _VERSION,
        ACTIVATIONS.index(spec.activation),
        len(sizes),
        *sizes,
        spec.l2_penalty,
        spec.param_count,
    )
    Path(path).write_bytes(header + theta.astype("<f8").tobytes())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, act_code, n_sizes = struct.unpack_from("<BBI", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 4 + struct.calcsize("<BBI")
    sizes = struct.unpack_from(f"<{n_sizes}I", raw, offset)
    offset += 4 * n_sizes
    l2, p = struct.unpack_from("<dQ", raw, offset)
    offset += struct.calcsize("<dQ")
    spec = ModelSpec(sizes, ACTIVATIONS[act_code], l2)
    if p != spec.param_count or len(raw) - offset != 8 * p:
        raise ValueError(f"{path}: parameter block does not match header")
    theta = np.frombuffer(raw, dtype="<f8", count=p, offset=offset).astype(np.float64)
    return spec, theta


# -- estimator -------------------------------------------------------------

class MLPClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Scikit-learn style wrapper around the functional MLP.

    ``transform`` returns the penultimate-layer (intrinsic) features, so the
    fitted classifier can feed the feature samplers directly.
    """

    def __init__(self, hidden_layer_sizes=(32,), activation="tanh", l2_penalty=1e-3,
                 learning_rate=0.1, epochs=200, batch_size=32, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.l2_penalty = l2_penalty
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_labeled(X, y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        self.spec_ = ModelSpec((X.shape[1], *self.hidden_layer_sizes, self.classes_.size),
                               self.activation, self.l2_penalty)
        cfg = TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.random_state or 0)
        ds = Dataset(X, y_enc, "train", self.classes_.size)
        self.coef_, report = train(self.spec_, ds, cfg, return_report=True)
        self.train_accuracy_ = report["train_accuracy"]
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_params(cls, spec: ModelSpec, theta, classes=None):
        """Wrap an already trained parameter vector."""
        est = cls(hidden_layer_sizes=spec.layer_sizes[1:-1], activation=spec.activation,
                  l2_penalty=spec.l2_penalty)
        est.spec_ = spec
        est.coef_ = spec.check_params(theta).copy()
        est.classes_ = np.arange(spec.n_classes) if classes is None else np.asarray(classes)
        est.n_features_in_ = spec.n_features
        return est

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return forward(self.spec_, self.coef_, check_inputs(X))

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X):
        check_is_fitted(self, "coef_")
        return penultimate_features(self.spec_, self.coef_, check_inputs(X))

    def encode_labels(self, y) -> np.ndarray:
        check_is_fitted(self, "classes_")
        y = np.asarray(y)
        pos = np.searchsorted(self.classes_, y)
        pos = np.clip(pos, 0, self.classes_.size - 1)
        if not np.array_equal(self.classes_[pos], y):
            raise ValueError("labels not seen during fit")
        return pos
