"""
Model assembly, prediction and persistence.

Deep architectures (cnn, rnn, parallel, crnn) are Sequential stacks from
neural.py fed with standardised mel spectrograms. Classical baselines
(logreg, knn, and the scikit-learn backed svm / rf) work on z-scored
51-feature vectors. Both kinds travel as a TrainedModel and are saved in an
MGT1 container with a JSON manifest entry.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Tuple

import joblib
import numpy as np
from pydantic import ValidationError
from scipy.special import expit
from sklearn.ensemble import RandomForestClassifier
from sklearn.svm import SVC

from config import DEEP_ARCHS, GENRES, ArchitectureConfig, ClassicalConfig
from dataio import MANIFEST_KEY, decode_json, encode_json, read_container, write_container
from errors import (ArtifactMismatchError, ConfigError, DataError, MissingArtifactError, NumericFault,
                    ShapeError)
from log import get_logger
from neural import (LSTM, BatchNorm1D, Conv1D, Dense, Dropout, Flatten, Layer, MaxPool1D, ParallelBranches,
                    ReLU, Sequential, softmax)
from schemas import CheckpointManifest, TrainingEpoch

logger = get_logger("TRAINING")


def _as_stored(a) -> np.ndarray:
    """Round to the float32 values a container will hold, keep float64 for arithmetic."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


# --- deep architectures ---------------------------------------------------------

def _pooled_length(cfg: ArchitectureConfig) -> int:
    steps = cfg.n_frames
    for _ in cfg.conv_channels:
        steps //= cfg.pool_width
    return steps


def _conv_blocks(cfg: ArchitectureConfig, rng: np.random.Generator, dtype) -> List[Layer]:
    layers: List[Layer] = []
    channels = cfg.n_mels
    for n, width in enumerate(cfg.conv_channels, start=1):
        layers += [
            Conv1D(f"conv{n}", channels, width, cfg.kernel_width, rng, dtype),
            ReLU(f"relu{n}"),
            BatchNorm1D(f"bn{n}", width, dtype),
            MaxPool1D(f"pool{n}", cfg.pool_width),
        ]
        channels = width
    return layers


def _head(in_features: int, cfg: ArchitectureConfig, rng: np.random.Generator, dtype) -> List[Layer]:
    dense = Dense("dense", in_features, cfg.dense_hidden, rng, dtype)
    logits = Dense("logits", cfg.dense_hidden, cfg.n_classes, rng, dtype)
    seeds = rng.integers(0, 2 ** 31, size=2)
    return [
        Dropout("dropout1", cfg.dropout, int(seeds[0])),
        dense,
        ReLU("relu_dense"),
        Dropout("dropout2", cfg.dropout, int(seeds[1])),
        logits,
    ]


def build_network(cfg: ArchitectureConfig, seed: int = 0, dtype=np.float32) -> Sequential:
    """
    crnn:     3 x (conv -> relu -> bn -> pool) -> lstm -> head
    cnn:      3 x (conv -> relu -> bn -> pool) -> flatten -> head
    rnn:      lstm on the raw spectrogram -> head
    parallel: (conv blocks -> flatten) || lstm, concatenated -> head
    head = dropout -> dense + relu -> dropout -> dense (logits)
    """
    rng = np.random.default_rng(seed)
    pooled = _pooled_length(cfg)
    last_channels = cfg.conv_channels[-1] if cfg.conv_channels else cfg.n_mels
    if cfg.kind == "crnn":
        layers = _conv_blocks(cfg, rng, dtype)
        layers.append(LSTM("lstm", last_channels, cfg.lstm_hidden, rng, dtype))
        layers += _head(cfg.lstm_hidden, cfg, rng, dtype)
    elif cfg.kind == "cnn":
        layers = _conv_blocks(cfg, rng, dtype) + [Flatten("flatten")]
        layers += _head(pooled * last_channels, cfg, rng, dtype)
    elif cfg.kind == "rnn":
        layers = [LSTM("lstm", cfg.n_mels, cfg.lstm_hidden, rng, dtype)]
        layers += _head(cfg.lstm_hidden, cfg, rng, dtype)
    elif cfg.kind == "parallel":
        cnn_branch = Sequential("cnn_branch", _conv_blocks(cfg, rng, dtype) + [Flatten("flatten")])
        rnn_branch = Sequential("rnn_branch", [LSTM("lstm", cfg.n_mels, cfg.lstm_hidden, rng, dtype)])
        layers = [ParallelBranches("branches", [cnn_branch, rnn_branch])]
        layers += _head(pooled * last_channels + cfg.lstm_hidden, cfg, rng, dtype)
    else:
        raise ConfigError(f"unknown architecture '{cfg.kind}'")
    return Sequential(cfg.kind, layers)


def parameter_count(cfg: ArchitectureConfig) -> int:
    """Closed-form number of trainable scalars for an architecture."""
    def conv_blocks() -> int:
        total, channels = 0, cfg.n_mels
        for width in cfg.conv_channels:
            total += width * cfg.kernel_width * channels + width + 2 * width
            channels = width
        return total

    def lstm(inputs: int) -> int:
        H = cfg.lstm_hidden
        return 4 * H * (inputs + H) + 4 * H

    def dense(n_in: int, n_out: int) -> int:
        return n_in * n_out + n_out

    def head(n_in: int) -> int:
        return dense(n_in, cfg.dense_hidden) + dense(cfg.dense_hidden, cfg.n_classes)

    last = cfg.conv_channels[-1] if cfg.conv_channels else cfg.n_mels
    flat = _pooled_length(cfg) * last
    if cfg.kind == "crnn":
        return conv_blocks() + lstm(last) + head(cfg.lstm_hidden)
    if cfg.kind == "cnn":
        return conv_blocks() + head(flat)
    if cfg.kind == "rnn":
        return lstm(cfg.n_mels) + head(cfg.lstm_hidden)
    if cfg.kind == "parallel":
        return conv_blocks() + lstm(cfg.n_mels) + head(flat + cfg.lstm_hidden)
    raise ConfigError(f"unknown architecture '{cfg.kind}'")


# --- standardisation --------------------------------------------------------------

@dataclass
class InputStats:
    """Global mean/std of the training spectrograms."""
    mean: float
    std: float

    @classmethod
    def fit(cls, X: np.ndarray) -> "InputStats":
        X = np.asarray(X, dtype=np.float64)
        mean = float(_as_stored(X.mean()))
        std = float(_as_stored(X.std()))
        return cls(mean, std if std > 0 else 1.0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return ((np.asarray(X, dtype=np.float32) - np.float32(self.mean)) / np.float32(self.std)).astype(np.float32)


@dataclass
class FeatureStats:
    """Per-feature z-score statistics; constant features keep std 1."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "FeatureStats":
        X = np.asarray(X, dtype=np.float64)
        std = X.std(axis=0)
        return cls(_as_stored(X.mean(axis=0)), _as_stored(np.where(std > 0, std, 1.0)))

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.mean.shape[0]:
            raise ShapeError(f"expected (N, {self.mean.shape[0]}) features, got {X.shape}")
        return (X - self.mean) / self.std


# --- classical baselines --------------------------------------------------------------

class BaselineClassifier(Protocol):
    kind: str

    def fit(self, X: np.ndarray, y: np.ndarray, n_classes: int) -> "BaselineClassifier": ...

    def predict_proba(self, X: np.ndarray) -> np.ndarray: ...

    def predict(self, X: np.ndarray) -> np.ndarray: ...


def _require_all_classes(y: np.ndarray, n_classes: int) -> None:
    present = np.bincount(y, minlength=n_classes)
    missing = np.flatnonzero(present == 0)
    if missing.size:
        raise DataError(f"class index(es) {missing.tolist()} absent from training data")


class LogisticOvR:
    """
    One binary logistic model per class, all trained full-batch with Adam
    from zero weights on mean BCE + (l2 / 2) * ||w||^2. A class stops
    updating once its gradient inf-norm drops below tol.
    """

    kind = "logreg"

    def __init__(self, l2: float = 1e-3, lr: float = 0.01, max_iter: int = 5000, tol: float = 1e-5):
        self.l2 = l2
        self.lr = lr
        self.max_iter = max_iter
        self.tol = tol
        self.W: Optional[np.ndarray] = None
        self.b: Optional[np.ndarray] = None
        self.iterations = 0

    def fit(self, X, y, n_classes):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        _require_all_classes(y, n_classes)
        N, F = X.shape
        targets = np.zeros((N, n_classes))
        targets[np.arange(N), y] = 1.0

        W = np.zeros((F, n_classes))
        b = np.zeros(n_classes)
        moments = [np.zeros_like(W), np.zeros_like(W), np.zeros_like(b), np.zeros_like(b)]
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        active = np.ones(n_classes, dtype=bool)
        step = 0
        for step in range(1, self.max_iter + 1):
            residual = expit(X @ W + b) - targets
            gW = X.T @ residual / N + self.l2 * W
            gb = residual.mean(axis=0)
            norms = np.maximum(np.abs(gW).max(axis=0), np.abs(gb))
            active &= norms >= self.tol
            if not active.any():
                break
            for k, (theta, g) in enumerate(((W, gW), (b, gb))):
                m, v = moments[2 * k], moments[2 * k + 1]
                m[...] = beta1 * m + (1 - beta1) * g
                v[...] = beta2 * v + (1 - beta2) * g * g
                update = self.lr * (m / (1 - beta1 ** step)) / (np.sqrt(v / (1 - beta2 ** step)) + eps)
                theta -= np.where(active, update, 0.0)
        if not np.all(np.isfinite(W)):
            raise NumericFault("logistic regression weights became non-finite")
        self.iterations = step
        self.W, self.b = _as_stored(W), _as_stored(b)
        return self

    def scores(self, X):
        return expit(np.asarray(X, dtype=np.float64) @ self.W + self.b)

    def predict_proba(self, X):
        s = self.scores(X)
        return s / s.sum(axis=1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.scores(X), axis=1)


class KNearest:
    """
    Exact k-nearest-neighbour vote in Euclidean distance.

    Neighbours are ordered by (distance, training index). When several labels
    share the top vote count, the label of the nearest neighbour among them
    wins.
    """

    kind = "knn"

    def __init__(self, k: int = 5):
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        self.k = k
        self.X: Optional[np.ndarray] = None
        self.y: Optional[np.ndarray] = None
        self.n_classes = 0

    def fit(self, X, y, n_classes):
        X = np.asarray(X, dtype=np.float64)
        if self.k > X.shape[0]:
            raise ConfigError(f"k={self.k} exceeds the {X.shape[0]} training samples")
        self.X = _as_stored(X)
        self.y = np.asarray(y, dtype=np.int64)
        self.n_classes = n_classes
        return self

    def neighbours(self, X) -> np.ndarray:
        # queries get the same float32 rounding as the stored training rows
        X = _as_stored(X)
        out = np.empty((X.shape[0], self.k), dtype=np.int64)
        for start in range(0, X.shape[0], 256):
            chunk = X[start:start + 256]
            d2 = ((chunk[:, None, :] - self.X[None, :, :]) ** 2).sum(axis=2)
            out[start:start + 256] = np.argsort(d2, axis=1, kind="stable")[:, :self.k]
        return out

    def predict(self, X):
        labels = self.y[self.neighbours(X)]
        out = np.empty(labels.shape[0], dtype=np.int64)
        for row, votes in enumerate(labels):
            counts = np.bincount(votes, minlength=self.n_classes)
            tied = np.flatnonzero(counts == counts.max())
            out[row] = next(label for label in votes if label in tied)
        return out

    def predict_proba(self, X):
        labels = self.y[self.neighbours(X)]
        probs = np.zeros((labels.shape[0], self.n_classes))
        for row, votes in enumerate(labels):
            probs[row] = np.bincount(votes, minlength=self.n_classes) / self.k
        return probs


class SklearnBaseline:
    """svm (RBF SVC) and rf (random forest) delegated to scikit-learn."""

    def __init__(self, kind: str, seed: int = 0):
        self.kind = kind
        if kind == "svm":
            self.estimator = SVC(kernel="rbf", probability=True, random_state=seed)
        elif kind == "rf":
            self.estimator = RandomForestClassifier(n_estimators=200, random_state=seed, n_jobs=1)
        else:
            raise ConfigError(f"unknown scikit-learn baseline '{kind}'")
        self.n_classes = 0

    def fit(self, X, y, n_classes):
        _require_all_classes(np.asarray(y, dtype=np.int64), n_classes)
        self.estimator.fit(X, y)
        self.n_classes = n_classes
        return self

    def predict_proba(self, X):
        partial = self.estimator.predict_proba(X)
        probs = np.zeros((partial.shape[0], self.n_classes))
        probs[:, self.estimator.classes_.astype(np.int64)] = partial
        return probs

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


def make_baseline(kind: str, cc: Optional[ClassicalConfig] = None, seed: int = 0) -> BaselineClassifier:
    cc = cc or ClassicalConfig()
    if kind == "logreg":
        return LogisticOvR(cc.logreg_l2, cc.logreg_lr, cc.logreg_max_iter, cc.logreg_tol)
    if kind == "knn":
        return KNearest(cc.knn_k)
    if kind in ("svm", "rf"):
        return SklearnBaseline(kind, seed)
    raise ConfigError(f"unknown baseline '{kind}'")


# --- trained model ------------------------------------------------------------------

@dataclass
class TrainedModel:
    kind: str
    class_order: List[str] = field(default_factory=lambda: list(GENRES))
    architecture: Optional[ArchitectureConfig] = None
    network: Optional[Sequential] = None
    input_stats: Optional[InputStats] = None
    feature_stats: Optional[FeatureStats] = None
    baseline: Optional[BaselineClassifier] = None
    classical: Optional[ClassicalConfig] = None
    curves: List[TrainingEpoch] = field(default_factory=list)
    best_epoch: int = 0
    metrics: Dict[str, float] = field(default_factory=dict)

    @property
    def is_deep(self) -> bool:
        return self.kind in DEEP_ARCHS

    @property
    def feature_mode(self) -> str:
        return "melspec" if self.is_deep else "features51"

    @property
    def n_classes(self) -> int:
        return len(self.class_order)


def build_model(cfg: ArchitectureConfig, seed: int = 0, class_order: Optional[List[str]] = None,
                dtype=np.float32) -> TrainedModel:
    class_order = list(GENRES[:cfg.n_classes]) if class_order is None else list(class_order)
    if len(class_order) != cfg.n_classes:
        raise ConfigError(f"{cfg.n_classes} output classes but {len(class_order)} class labels")
    return TrainedModel(cfg.kind, class_order, cfg, build_network(cfg, seed, dtype))


def predict(model: TrainedModel, X: np.ndarray, batch_size: int = 32) -> Tuple[np.ndarray, np.ndarray]:
    """
    Class probabilities and argmax labels (lowest index wins ties).

    Deep models run in inference mode, so a row's output does not depend on
    the rest of its batch.
    """
    if model.is_deep:
        if model.network is None or model.input_stats is None:
            raise ConfigError("model has not been trained")
        X = np.asarray(X)
        expected = (model.architecture.n_frames, model.architecture.n_mels)
        if X.ndim != 3 or X.shape[1:] != expected:
            raise ShapeError(f"expected (B, {expected[0]}, {expected[1]}) spectrograms, got {X.shape}")
        model.network.eval()
        chunks = []
        for start in range(0, X.shape[0], batch_size):
            batch = model.input_stats.apply(X[start:start + batch_size])
            chunks.append(softmax(model.network.forward(batch).astype(np.float64)))
        probs = np.concatenate(chunks) if chunks else np.zeros((0, model.n_classes))
        return probs, np.argmax(probs, axis=1)

    if model.baseline is None or model.feature_stats is None:
        raise ConfigError("model has not been trained")
    Z = model.feature_stats.apply(X)
    return model.baseline.predict_proba(Z), np.asarray(model.baseline.predict(Z), dtype=np.int64)


def fit_baseline(kind: str, X: np.ndarray, y: np.ndarray, cc: Optional[ClassicalConfig] = None, seed: int = 0,
                 class_order: Optional[List[str]] = None) -> TrainedModel:
    """Standardise with train statistics, then fit the named baseline."""
    class_order = list(class_order or GENRES)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ShapeError(f"features {X.shape} and labels {y.shape} disagree")
    stats = FeatureStats.fit(X)
    baseline = make_baseline(kind, cc, seed).fit(stats.apply(X), y, len(class_order))
    model = TrainedModel(kind, class_order, feature_stats=stats, baseline=baseline, classical=cc or ClassicalConfig())
    _, predicted = predict(model, X)
    model.metrics = {"train_acc": float(np.mean(predicted == y))}
    return model


def logreg_fit(X, y, l2: float = 1e-3, seed: int = 0, class_order=None, cc: Optional[ClassicalConfig] = None):
    cc = (cc or ClassicalConfig()).model_copy(update={"logreg_l2": l2})
    return fit_baseline("logreg", X, y, cc, seed, class_order)


def logreg_predict(model: TrainedModel, X) -> Tuple[np.ndarray, np.ndarray]:
    return predict(model, X)


def knn_fit(X, y, k: int = 5, class_order=None) -> TrainedModel:
    cc = ClassicalConfig(knn_k=k)
    return fit_baseline("knn", X, y, cc, 0, class_order)


def knn_predict(model: TrainedModel, X) -> np.ndarray:
    return predict(model, X)[1]


# --- checkpoints ----------------------------------------------------------------------

def encode_manifest(manifest: CheckpointManifest) -> np.ndarray:
    return encode_json(manifest.model_dump(mode="json"))


def decode_manifest(codes: np.ndarray, path="checkpoint") -> CheckpointManifest:
    try:
        return CheckpointManifest(**decode_json(codes, path))
    except ValidationError as e:
        raise ArtifactMismatchError(f"{path}: invalid checkpoint manifest: {e}") from e


def checkpoint_manifest(model: TrainedModel, config_hash: str = "", data_hash: str = "") -> CheckpointManifest:
    return CheckpointManifest(
        architecture=model.kind,
        class_order=model.class_order,
        config_hash=config_hash,
        data_hash=data_hash,
        epoch=model.best_epoch,
        metrics=model.metrics,
        architecture_config=model.architecture.model_dump(mode="json") if model.architecture else None,
        classical=model.classical.model_dump(mode="json") if model.classical else None,
        feature_mode=model.feature_mode,
    )


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".joblib")


def save_checkpoint(model: TrainedModel, path, manifest: Optional[CheckpointManifest] = None) -> Path:
    path = Path(path)
    manifest = manifest or checkpoint_manifest(model)
    tensors: Dict[str, np.ndarray] = {}
    if model.is_deep:
        for name, value in model.network.parameters().items():
            tensors[f"param/{name}"] = value
        for name, layer, key in model.network.named_buffers():
            tensors[f"buffer/{name}"] = layer.buffers[key]
        tensors["input_stats"] = np.array([model.input_stats.mean, model.input_stats.std])
    else:
        tensors["feature_stats/mean"] = model.feature_stats.mean
        tensors["feature_stats/std"] = model.feature_stats.std
        if isinstance(model.baseline, LogisticOvR):
            tensors["param/logreg.W"] = model.baseline.W
            tensors["param/logreg.b"] = model.baseline.b
        elif isinstance(model.baseline, KNearest):
            tensors["knn/X"] = model.baseline.X
            tensors["knn/y"] = model.baseline.y
        else:
            joblib.dump(model.baseline.estimator, _sidecar(path))
    tensors[MANIFEST_KEY] = encode_manifest(manifest)
    write_container(path, tensors)
    logger.info(f"checkpoint saved: {path}")
    return path


def _assign(target: Dict[str, np.ndarray], key: str, value: np.ndarray, name: str) -> None:
    if target[key].shape != value.shape:
        raise ArtifactMismatchError(f"{name}: checkpoint shape {value.shape}, model expects {target[key].shape}")
    target[key] = value.astype(target[key].dtype)


def _entry(tensors: Dict[str, np.ndarray], key: str, path) -> np.ndarray:
    if key not in tensors:
        raise ArtifactMismatchError(f"{path}: missing tensor '{key}'")
    return tensors[key]


def load_checkpoint(path) -> Tuple[TrainedModel, CheckpointManifest]:
    path = Path(path)
    tensors = read_container(path)
    manifest = decode_manifest(_entry(tensors, MANIFEST_KEY, path), path)
    kind = manifest.architecture

    if kind in DEEP_ARCHS:
        arch = ArchitectureConfig(**manifest.architecture_config)
        model = build_model(arch, 0, manifest.class_order)
        for prefix, entries in (("param", model.network.named_parameters()),
                                ("buffer", model.network.named_buffers())):
            for name, layer, key in entries:
                entry = f"{prefix}/{name}"
                _assign(layer.params if prefix == "param" else layer.buffers, key, _entry(tensors, entry, path), entry)
        mean, std = _entry(tensors, "input_stats", path).astype(np.float64)
        model.input_stats = InputStats(float(mean), float(std))
    else:
        cc = ClassicalConfig(**(manifest.classical or {}))
        model = TrainedModel(kind, manifest.class_order, classical=cc)
        model.feature_stats = FeatureStats(_entry(tensors, "feature_stats/mean", path).astype(np.float64),
                                           _entry(tensors, "feature_stats/std", path).astype(np.float64))
        baseline = make_baseline(kind, cc)
        if isinstance(baseline, LogisticOvR):
            baseline.W = _entry(tensors, "param/logreg.W", path).astype(np.float64)
            baseline.b = _entry(tensors, "param/logreg.b", path).astype(np.float64)
        elif isinstance(baseline, KNearest):
            baseline.X = _entry(tensors, "knn/X", path).astype(np.float64)
            baseline.y = _entry(tensors, "knn/y", path).astype(np.int64)
            baseline.n_classes = len(manifest.class_order)
        else:
            sidecar = _sidecar(path)
            if not sidecar.exists():
                raise MissingArtifactError(f"estimator file not found: {sidecar}")
            baseline.estimator = joblib.load(sidecar)
            baseline.n_classes = len(manifest.class_order)
        model.baseline = baseline
    model.best_epoch = manifest.epoch
    model.metrics = dict(manifest.metrics)
    return model, manifest
