"""Victim and surrogate NIDS classifiers over encoded flow vectors."""

from __future__ import annotations

import io
import logging
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import joblib
import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.ensemble import RandomForestClassifier
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import confusion_matrix
from sklearn.model_selection import GridSearchCV, StratifiedKFold
from sklearn.neural_network import MLPClassifier
from sklearn.tree import DecisionTreeRegressor

from .flow_data import FeatureCodec, FlowRecord, flows_to_matrix


logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
MODEL_FORMAT_VERSION = 1


class NidsError(Exception):
    """Base class for classifier training and inference failures."""


class SingleClassData(NidsError):
    pass


class NonFiniteFeature(NidsError):
    pass


class DimensionMismatch(NidsError):
    def __init__(self, expected: int, got: int) -> None:
        super().__init__(f"expected input dimension {expected}, got {got}")
        self.expected = expected
        self.got = got


class ModelFormatError(NidsError):
    pass


class ModelKind(str, Enum):
    LR = "LR"
    MLP = "MLP"
    RF = "RF"
    GBT = "GBT"

    @property
    def differentiable(self) -> bool:
        return self in (ModelKind.LR, ModelKind.MLP)

    @classmethod
    def parse(cls, value: Union[str, "ModelKind"]) -> "ModelKind":
        try:
            return cls(value)
        except ValueError as exc:
            raise NidsError(f"unknown model kind {value!r}") from exc


DEFAULT_HYPERPARAMS: Dict[ModelKind, Dict[str, Any]] = {
    ModelKind.LR: {"C": 1.0, "max_iter": 1000},
    ModelKind.MLP: {
        "hidden_layer_sizes": (64, 64),
        "alpha": 1e-4,
        "learning_rate_init": 1e-3,
        "batch_size": 256,
        "max_iter": 60,
    },
    ModelKind.RF: {"n_estimators": 100, "max_depth": 12, "min_samples_leaf": 1},
    ModelKind.GBT: {"n_estimators": 100, "max_depth": 6, "learning_rate": 0.1},
}

CV_GRIDS: Dict[ModelKind, Dict[str, List[Any]]] = {
    ModelKind.LR: {"C": [0.1, 1.0, 10.0]},
    ModelKind.MLP: {"alpha": [1e-4, 1e-3], "learning_rate_init": [1e-3, 3e-3]},
    ModelKind.RF: {"min_samples_leaf": [1, 5]},
    ModelKind.GBT: {"learning_rate": [0.05, 0.1]},
}


# ----------------------------------------------------------------------
# Gradient-boosted trees
# ----------------------------------------------------------------------
def _logistic_loss(y: np.ndarray, raw: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, raw) - y * raw))


class GradientBoostedTrees(ClassifierMixin, BaseEstimator):
    """Binary logistic boosting with Newton leaf values.

    Each stage fits a regression tree to the negative gradient and then
    replaces every leaf value with sum(residual) / sum(p * (1 - p)) over
    the samples that land in it. ``train_loss_`` holds the mean logistic
    loss before boosting and after every stage.
    """

    def __init__(self, n_estimators: int = 100, max_depth: int = 6, learning_rate: float = 0.1, random_state=None):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.random_state = random_state

    @classmethod
    def empty(cls, n_features: int, base_score: float = 0.0) -> "GradientBoostedTrees":
        model = cls(n_estimators=0)
        model.classes_ = np.array([0, 1])
        model.base_score_ = float(base_score)
        model.estimators_ = []
        model.leaf_values_ = []
        model.train_loss_ = []
        model.n_features_in_ = n_features
        return model

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        prior = float(np.clip(y.mean(), 1e-6, 1.0 - 1e-6))
        self.classes_ = np.array([0, 1])
        self.base_score_ = float(np.log(prior / (1.0 - prior)))
        self.n_features_in_ = X.shape[1]
        self.estimators_: List[DecisionTreeRegressor] = []
        self.leaf_values_: List[np.ndarray] = []

        rng = np.random.RandomState(self.random_state)
        raw = np.full(len(y), self.base_score_)
        self.train_loss_ = [_logistic_loss(y, raw)]
        for _ in range(self.n_estimators):
            p = expit(raw)
            residual = y - p
            tree = DecisionTreeRegressor(max_depth=self.max_depth, random_state=rng.randint(np.iinfo(np.int32).max))
            tree.fit(X, residual)
            leaves = tree.apply(X)
            node_count = tree.tree_.node_count
            numerator = np.bincount(leaves, weights=residual, minlength=node_count)
            denominator = np.bincount(leaves, weights=p * (1.0 - p), minlength=node_count)
            values = np.divide(numerator, denominator, out=np.zeros(node_count), where=denominator > 1e-12)
            raw += self.learning_rate * values[leaves]
            self.estimators_.append(tree)
            self.leaf_values_.append(values)
            self.train_loss_.append(_logistic_loss(y, raw))
        return self

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        raw = np.full(X.shape[0], self.base_score_)
        for tree, values in zip(self.estimators_, self.leaf_values_):
            raw += self.learning_rate * values[tree.apply(X)]
        return raw

    def predict_proba(self, X) -> np.ndarray:
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= DEFAULT_THRESHOLD).astype(np.int64)


# ----------------------------------------------------------------------
# Model container
# ----------------------------------------------------------------------
def _mlp_forward(estimator: MLPClassifier, X: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
    pre_activations: List[np.ndarray] = []
    activation = X
    last = len(estimator.coefs_) - 1
    for layer, (weights, bias) in enumerate(zip(estimator.coefs_, estimator.intercepts_)):
        z = activation @ weights + bias
        pre_activations.append(z)
        activation = np.maximum(z, 0.0) if layer < last else z
    return pre_activations, activation[:, 0]


@dataclass(frozen=True)
class NidsModel:
    """A fitted binary classifier plus the metadata needed to use it safely."""

    kind: ModelKind
    estimator: Any
    input_dim: int
    codec_id: str = ""
    threshold: float = DEFAULT_THRESHOLD

    @property
    def differentiable(self) -> bool:
        return self.kind.differentiable

    def _as_batch(self, x: np.ndarray) -> Tuple[np.ndarray, bool]:
        array = np.asarray(x, dtype=np.float64)
        single = array.ndim == 1
        batch = array[None, :] if single else array
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise DimensionMismatch(self.input_dim, int(batch.shape[-1]))
        return batch, single

    def _logits(self, batch: np.ndarray) -> np.ndarray:
        if self.kind is ModelKind.LR:
            return batch @ self.estimator.coef_[0] + self.estimator.intercept_[0]
        return _mlp_forward(self.estimator, batch)[1]

    def predict_proba(self, x: np.ndarray) -> Union[float, np.ndarray]:
        """Malicious probability for one encoded vector or a batch."""
        batch, single = self._as_batch(x)
        if self.differentiable:
            proba = expit(self._logits(batch))
        else:
            proba = self.estimator.predict_proba(batch)[:, 1]
        proba = np.clip(proba, 0.0, 1.0)
        return float(proba[0]) if single else proba

    def predict(self, x: np.ndarray) -> Union[int, np.ndarray]:
        proba = self.predict_proba(x)
        if np.isscalar(proba):
            return int(proba >= self.threshold)
        return (proba >= self.threshold).astype(np.int64)

    def gradient(self, x: np.ndarray) -> Optional[np.ndarray]:
        """Gradient of -log(1 - p) with respect to the encoded input, or None for tree models.

        Descending this gradient moves the input towards a benign decision.
        """
        if not self.differentiable:
            return None
        batch, single = self._as_batch(x)
        if self.kind is ModelKind.LR:
            p = expit(self._logits(batch))
            grad = p[:, None] * self.estimator.coef_[0][None, :]
        else:
            coefs = self.estimator.coefs_
            pre_activations, logits = _mlp_forward(self.estimator, batch)
            grad = expit(logits)[:, None] * coefs[-1][:, 0][None, :]
            for layer in range(len(coefs) - 2, -1, -1):
                grad = (grad * (pre_activations[layer] > 0.0)) @ coefs[layer].T
        return grad[0] if single else grad

    def resident_bytes(self) -> int:
        buffer = io.BytesIO()
        joblib.dump(self.estimator, buffer)
        return buffer.getbuffer().nbytes

    @classmethod
    def linear(cls, weights: Sequence[float], bias: float = 0.0, codec_id: str = "") -> "NidsModel":
        """Logistic model with fixed parameters; handy for probes and tests."""
        coef = np.asarray(weights, dtype=np.float64)
        estimator = LogisticRegression()
        estimator.classes_ = np.array([0, 1])
        estimator.coef_ = coef[None, :]
        estimator.intercept_ = np.array([float(bias)])
        estimator.n_features_in_ = coef.shape[0]
        return cls(kind=ModelKind.LR, estimator=estimator, input_dim=coef.shape[0], codec_id=codec_id)


@dataclass(frozen=True)
class FlowClassifier:
    """A model paired with the codec that produced its training inputs."""

    model: NidsModel
    codec: FeatureCodec

    def __post_init__(self) -> None:
        if self.model.input_dim != self.codec.dim:
            raise DimensionMismatch(self.model.input_dim, self.codec.dim)
        if self.model.codec_id and self.model.codec_id != self.codec.codec_id:
            raise NidsError(
                f"model was trained with codec {self.model.codec_id}, paired with {self.codec.codec_id}"
            )

    def proba_raw(self, raw: np.ndarray) -> np.ndarray:
        return np.atleast_1d(self.model.predict_proba(self.codec.encode_matrix(raw)))

    def decide_raw(self, raw: np.ndarray) -> np.ndarray:
        return (self.proba_raw(raw) >= self.model.threshold).astype(np.int64)

    def proba_flows(self, flows: Sequence[FlowRecord]) -> np.ndarray:
        if not flows:
            return np.zeros(0, dtype=np.float64)
        return self.proba_raw(flows_to_matrix(flows))

    def decide_flows(self, flows: Sequence[FlowRecord]) -> np.ndarray:
        if not flows:
            return np.zeros(0, dtype=np.int64)
        return self.decide_raw(flows_to_matrix(flows))

    def resident_bytes(self) -> int:
        return self.model.resident_bytes()


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------
def _check_training_data(X: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise NidsError(f"feature matrix {X.shape} does not match {y.shape[0]} labels")
    if not np.isfinite(X).all():
        raise NonFiniteFeature("training features contain NaN or infinite values")
    classes = np.unique(y)
    if classes.size < 2:
        raise SingleClassData(f"training labels contain a single class: {classes.tolist()}")
    return X, y


def _build_estimator(kind: ModelKind, params: Mapping[str, Any], seed: int, n_jobs: Optional[int]) -> Any:
    params = dict(params)
    if kind is ModelKind.LR:
        return LogisticRegression(random_state=seed, **params)
    if kind is ModelKind.MLP:
        params["hidden_layer_sizes"] = tuple(params.get("hidden_layer_sizes", (64, 64)))
        params["activation"] = "relu"
        return MLPClassifier(random_state=seed, **params)
    if kind is ModelKind.RF:
        return RandomForestClassifier(random_state=seed, n_jobs=n_jobs, **params)
    return GradientBoostedTrees(random_state=seed, **params)


def _fit(estimator: Any, X: np.ndarray, y: np.ndarray) -> Any:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=ConvergenceWarning)
        estimator.fit(X, y)
    if isinstance(estimator, RandomForestClassifier):
        # Single-row inference is faster without the joblib pool.
        estimator.set_params(n_jobs=1)
    return estimator


def train_model(
    kind: Union[str, ModelKind],
    X: np.ndarray,
    y: np.ndarray,
    hyperparams: Optional[Mapping[str, Any]] = None,
    seed: int = 0,
    *,
    codec_id: str = "",
    n_jobs: Optional[int] = None,
) -> NidsModel:
    """Fit one of the four classifier kinds on encoded features."""
    kind = ModelKind.parse(kind)
    X, y = _check_training_data(X, y)
    params = {**DEFAULT_HYPERPARAMS[kind], **(hyperparams or {})}
    estimator = _fit(_build_estimator(kind, params, seed, n_jobs), X, y)
    logger.info("Trained %s on %d rows x %d features (seed %d)", kind.value, X.shape[0], X.shape[1], seed)
    return NidsModel(kind=kind, estimator=estimator, input_dim=X.shape[1], codec_id=codec_id)


def tune_model(
    kind: Union[str, ModelKind],
    X: np.ndarray,
    y: np.ndarray,
    hyperparams: Optional[Mapping[str, Any]] = None,
    seed: int = 0,
    *,
    grid: Optional[Mapping[str, Sequence[Any]]] = None,
    folds: int = 3,
    codec_id: str = "",
    n_jobs: Optional[int] = None,
) -> Tuple[NidsModel, Dict[str, Any]]:
    """Grid-search regularization and learning rate with stratified folds on F1, then refit."""
    kind = ModelKind.parse(kind)
    X, y = _check_training_data(X, y)
    base = {**DEFAULT_HYPERPARAMS[kind], **(hyperparams or {})}
    search = GridSearchCV(
        _build_estimator(kind, base, seed, 1),
        param_grid={k: list(v) for k, v in (grid or CV_GRIDS[kind]).items()},
        scoring="f1",
        cv=StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed),
        n_jobs=n_jobs,
        refit=False,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=ConvergenceWarning)
        search.fit(X, y)
    best = dict(search.best_params_)
    logger.info("Cross-validated %s: best %s (F1 %.4f)", kind.value, best, search.best_score_)
    model = train_model(kind, X, y, {**base, **best}, seed, codec_id=codec_id, n_jobs=n_jobs)
    return model, best


def surrogate_labels(victim: NidsModel, X: np.ndarray) -> np.ndarray:
    """Label adversary data with the victim's own decisions."""
    return np.atleast_1d(victim.predict(X)).astype(np.int64)


# ----------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class EvalReport:
    f1: float
    precision: float
    recall: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> "EvalReport":
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        total = tp + fp + tn + fn
        return cls(
            f1=f1,
            precision=precision,
            recall=recall,
            accuracy=(tp + tn) / total if total else 0.0,
            tp=tp,
            fp=fp,
            tn=tn,
            fn=fn,
        )

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


def evaluate(model: NidsModel, X: np.ndarray, y: np.ndarray) -> EvalReport:
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise NidsError("cannot evaluate on an empty set")
    predicted = np.atleast_1d(model.predict(X))
    tn, fp, fn, tp = confusion_matrix(y, predicted, labels=[0, 1]).ravel()
    return EvalReport.from_counts(int(tp), int(fp), int(tn), int(fn))


def staged_train_loss(model: NidsModel) -> List[float]:
    """Per-stage training loss for boosted models, empty otherwise."""
    return list(getattr(model.estimator, "train_loss_", []))


# ----------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------
def save_model(model: NidsModel, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump(
        {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": model.kind.value,
            "input_dim": model.input_dim,
            "codec_id": model.codec_id,
            "threshold": model.threshold,
            "estimator": model.estimator,
        },
        target,
    )
    return target


def load_model(path: Union[str, Path], expected_input_dim: Optional[int] = None) -> NidsModel:
    source = Path(path)
    try:
        payload = joblib.load(source)
    except Exception as exc:  # joblib surfaces pickle errors of many types
        raise ModelFormatError(f"cannot read model container {source}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"{source} is not a version {MODEL_FORMAT_VERSION} model container")
    model = NidsModel(
        kind=ModelKind.parse(payload["kind"]),
        estimator=payload["estimator"],
        input_dim=int(payload["input_dim"]),
        codec_id=str(payload.get("codec_id", "")),
        threshold=float(payload.get("threshold", DEFAULT_THRESHOLD)),
    )
    if expected_input_dim is not None and expected_input_dim != model.input_dim:
        raise DimensionMismatch(expected_input_dim, model.input_dim)
    return model


__all__ = [
    "NidsError",
    "SingleClassData",
    "NonFiniteFeature",
    "DimensionMismatch",
    "ModelFormatError",
    "ModelKind",
    "DEFAULT_HYPERPARAMS",
    "GradientBoostedTrees",
    "NidsModel",
    "FlowClassifier",
    "train_model",
    "tune_model",
    "surrogate_labels",
    "EvalReport",
    "evaluate",
    "staged_train_loss",
    "save_model",
    "load_model",
]
