"""Small fully connected classifier that predicts servoing success from distances.

The network is written out by hand in numpy: ReLU hidden layers, a logistic
output, binary cross-entropy, backpropagation and Adam. Inputs are
standardized with statistics taken from the training rows; the statistics
travel with the model file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODEL_FORMAT_VERSION = "1"
DEFAULT_LAYERS = (3, 64, 64, 32, 1)
P_CLAMP = 1e-7


class EmptyDataset(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


# -- model ------------------------------------------------------------------

@dataclass(eq=False)
class MlpModel:
    """Weights are stored as (fan_in, fan_out) matrices so ``x @ W + b`` runs a layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    mean: np.ndarray = None
    std: np.ndarray = None

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        n_in = self.weights[0].shape[0] if self.weights else 0
        self.mean = np.zeros(n_in) if self.mean is None else np.asarray(self.mean, dtype=float)
        self.std = np.ones(n_in) if self.std is None else np.asarray(self.std, dtype=float)
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bad shapes {w.shape} / {b.shape}")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i} does not chain onto layer {i - 1}")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("output layer must have one unit")
        if self.mean.shape != (n_in,) or self.std.shape != (n_in,) or np.any(self.std <= 0):
            raise ValueError("standardization vectors must match the input size, std > 0")
        if not all(np.all(np.isfinite(a)) for a in [*self.weights, *self.biases]):
            raise ValueError("parameters must be finite")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @classmethod
    def zeros(cls, sizes=DEFAULT_LAYERS) -> MlpModel:
        return cls([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(b) for b in sizes[1:]])

    @classmethod
    def glorot(cls, sizes=DEFAULT_LAYERS, seed: int = 0) -> MlpModel:
        rng = np.random.default_rng(seed)
        weights = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            lim = math.sqrt(6.0 / (a + b))
            weights.append(rng.uniform(-lim, lim, size=(a, b)))
        return cls(weights, [np.zeros(b) for b in sizes[1:]])

    def params(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]`` of the live parameter arrays."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> MlpModel:
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.mean.copy(), self.std.copy())

    def predict(self, x) -> float | np.ndarray:
        """Success probability for one feature vector (float) or a batch (array)."""
        x = np.asarray(x, dtype=float)
        p = forward(self, x.reshape(-1, x.shape[-1]))
        return float(p[0]) if x.ndim == 1 else p

    # serialization
    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "layer_sizes": self.layer_sizes,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> MlpModel:
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ModelFormatError(f"unsupported model format {d.get('format_version')!r}")
        try:
            model = cls([np.array(w, dtype=float).reshape(a, b) for w, a, b in
                         zip(d["weights"], d["layer_sizes"][:-1], d["layer_sizes"][1:])],
                        d["biases"], d["mean"], d["std"])
        except (KeyError, ValueError, TypeError) as exc:
            raise ModelFormatError(f"malformed model file: {exc}") from exc
        if model.layer_sizes != list(d["layer_sizes"]):
            raise ModelFormatError("layer sizes disagree with weights")
        return model


def save_model(model: MlpModel, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(model.to_dict()))


def load_model(path) -> MlpModel:
    try:
        return MlpModel.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc


# -- forward / loss / backward -----------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_cache(model: MlpModel, x: np.ndarray):
    a = (x - model.mean) / model.std
    acts, pre = [a], []
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        pre.append(z)
        a = _sigmoid(z) if i == len(model.weights) - 1 else np.maximum(z, 0.0)
        acts.append(a)
    return acts, pre


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Probabilities for a batch of shape (n, n_in); returns shape (n,)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return _forward_cache(model, x)[0][-1][:, 0]


def bce_loss(p, y):
    """Binary cross-entropy with ``p`` clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    return -(y * np.log(p) + (1 - y) * np.log(1 - p))


def backward(model: MlpModel, x: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean BCE over the batch and its gradient, ordered like ``model.params()``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(y) == 0:
        raise ValueError("empty batch")
    acts, pre = _forward_cache(model, x)
    n = len(y)
    p = acts[-1][:, 0]
    loss = float(bce_loss(p, y).mean())
    # d loss / d z at the output; the clamp zeroes the slope where it is active
    pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    live = (p > P_CLAMP) & (p < 1.0 - P_CLAMP)
    dz = np.where(live, (pc - y), 0.0)[:, None] / n
    grads: list[np.ndarray] = []
    for i in range(len(model.weights) - 1, -1, -1):
        gw = acts[i].T @ dz
        gb = dz.sum(axis=0)
        grads = [gw, gb] + grads
        if i:
            da = dz @ model.weights[i].T
            dz = da * (pre[i - 1] > 0)
    return loss, grads


# -- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    iterations: int = 2500
    patience: int | None = None
    seed: int = 0
    layers: tuple[int, ...] = DEFAULT_LAYERS
    standardize: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch size must be >= 1 and iterations >= 0")


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(eq=False)
class Dataset:
    """Feature rows ``(d_pq, d_cq, d_rp)`` with success labels."""

    features: np.ndarray
    labels: np.ndarray
    meta: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=float).reshape(-1)
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_rows(cls, rows) -> Dataset:
        """Build from ``(features, label)`` or ``(features, label, meta)`` rows.

        Rows with missing or non-finite features (unscorable demos) are dropped.
        """
        feats, labels, metas = [], [], []
        for row in rows:
            f, y = row[0], row[1]
            if f is None:
                continue
            f = np.asarray(f, dtype=float)
            if f.shape != (3,) or not np.all(np.isfinite(f)):
                continue
            feats.append(f)
            labels.append(float(y))
            metas.append(row[2] if len(row) > 2 else {})
        return cls(np.array(feats).reshape(-1, 3), np.array(labels), metas)

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.features[idx], self.labels[idx],
                       [self.meta[i] for i in idx] if self.meta else [])


DATASET_FORMAT_VERSION = "1"


def save_dataset(path, train: Dataset, test: Dataset) -> None:
    """Write both splits to one JSON file."""
    def part(ds: Dataset) -> dict:
        return {"features": ds.features.tolist(), "labels": ds.labels.astype(int).tolist(),
                "meta": ds.meta}
    Path(path).write_text(json.dumps({"format_version": DATASET_FORMAT_VERSION,
                                      "columns": ["d_pq", "d_cq", "d_rp"],
                                      "train": part(train), "test": part(test)}))


def load_dataset(path) -> tuple[Dataset, Dataset]:
    try:
        d = json.loads(Path(path).read_text())
        if d.get("format_version") != DATASET_FORMAT_VERSION:
            raise ModelFormatError(f"unsupported dataset format {d.get('format_version')!r}")
        return tuple(Dataset(d[k]["features"], d[k]["labels"], list(d[k].get("meta", [])))
                     for k in ("train", "test"))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{path}: malformed dataset file: {exc}") from exc


def standardization(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    return mean, np.where(std > 1e-12, std, 1.0)


def train(dataset: Dataset, config: TrainConfig = TrainConfig()) -> tuple[MlpModel, list[float]]:
    """Fit a fresh network; returns the model and the per-iteration batch loss."""
    if len(dataset) == 0:
        raise EmptyDataset("no usable rows to train on")
    model = MlpModel.glorot(config.layers, config.seed)
    if config.standardize:
        model.mean, model.std = standardization(dataset.features)
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(model.params(), config.learning_rate, config.beta1, config.beta2, config.eps)
    n, bs = len(dataset), config.batch_size
    order, cursor = None, n
    losses: list[float] = []
    best, stale = math.inf, 0
    for _ in range(config.iterations):
        if n < bs:
            idx = rng.integers(0, n, size=bs)
        else:
            if cursor + bs > n:
                order, cursor = rng.permutation(n), 0
            idx = order[cursor:cursor + bs]
            cursor += bs
        loss, grads = backward(model, dataset.features[idx], dataset.labels[idx])
        opt.step(grads)
        losses.append(loss)
        if config.patience is not None:
            if loss < best - 1e-9:
                best, stale = loss, 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    return model, losses


def accuracy(model: MlpModel, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise EmptyDataset("no rows")
    return float(((forward(model, dataset.features) >= 0.5) == (dataset.labels == 1)).mean())
