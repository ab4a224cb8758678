from __future__ import annotations

import numpy as np
import pytest

from flowevade.flow_data import fit_codec, labels_of
from flowevade.nids_zoo import (
    DimensionMismatch,
    FlowClassifier,
    ModelFormatError,
    ModelKind,
    NidsError,
    NidsModel,
    NonFiniteFeature,
    SingleClassData,
    evaluate,
    load_model,
    save_model,
    staged_train_loss,
    surrogate_labels,
    train_model,
    tune_model,
)

SMALL_PARAMS = {
    "LR": None,
    "MLP": {"hidden_layer_sizes": (16,), "max_iter": 40},
    "RF": {"n_estimators": 20, "max_depth": 8},
    "GBT": {"n_estimators": 20, "max_depth": 3},
}


@pytest.fixture(scope="module")
def encoded(split, victim_codec):
    return (
        victim_codec.encode_flows(split.victim_set),
        labels_of(split.victim_set),
        victim_codec.encode_flows(split.test_set),
        labels_of(split.test_set),
    )


def test_model_kind_parsing():
    assert ModelKind.parse("GBT") is ModelKind.GBT
    assert ModelKind.MLP.differentiable and not ModelKind.RF.differentiable
    with pytest.raises(NidsError):
        ModelKind.parse("SVM")


@pytest.mark.parametrize("kind", ["LR", "MLP", "RF", "GBT"])
def test_every_kind_learns_the_synthetic_corpus(kind, encoded):
    X, y, X_test, y_test = encoded
    model = train_model(kind, X, y, SMALL_PARAMS[kind], seed=1)
    report = evaluate(model, X_test, y_test)
    assert model.input_dim == X.shape[1]
    assert report.f1 > 0.8
    assert report.tp + report.fp + report.tn + report.fn == len(y_test)


def test_training_input_errors(encoded):
    X, y, _, _ = encoded
    with pytest.raises(SingleClassData):
        train_model("LR", X, np.zeros_like(y))
    poisoned = X.copy()
    poisoned[0, 0] = np.nan
    with pytest.raises(NonFiniteFeature):
        train_model("LR", poisoned, y)


def test_prediction_rejects_wrong_width(encoded):
    X, y, _, _ = encoded
    model = train_model("LR", X, y, seed=0)
    with pytest.raises(DimensionMismatch):
        model.predict_proba(np.zeros(X.shape[1] + 1))


def test_linear_gradient_matches_closed_form():
    model = NidsModel.linear([1.0, -2.0, 0.5], bias=0.1)
    x = np.array([0.3, 0.2, 0.9])
    p = model.predict_proba(x)
    assert model.gradient(x) == pytest.approx(p * np.array([1.0, -2.0, 0.5]))


def test_mlp_gradient_matches_finite_differences(split, mlp_surrogate):
    codec = mlp_surrogate.codec
    model = mlp_surrogate.model
    benign = [f for f in split.test_set if f.label == 0][:5]
    x = codec.encode(benign[0])

    def loss(vector: np.ndarray) -> float:
        return float(-np.log1p(-model.predict_proba(vector)))

    gradient = model.gradient(x)
    for position in (codec.numeric_index("IN_BYTES"), codec.numeric_index("IN_PKTS"), 0):
        step = np.zeros_like(x)
        step[position] = 1e-5
        numeric = (loss(x + step) - loss(x - step)) / 2e-5
        assert gradient[position] == pytest.approx(numeric, rel=1e-3, abs=1e-6)


def test_tree_models_have_no_gradient(encoded):
    X, y, _, _ = encoded
    model = train_model("RF", X, y, SMALL_PARAMS["RF"], seed=0)
    assert model.gradient(X[0]) is None


def test_boosting_loss_starts_at_the_prior_and_drops(encoded):
    X, y, _, _ = encoded
    model = train_model("GBT", X, y, {"n_estimators": 15, "max_depth": 3}, seed=0)
    losses = staged_train_loss(model)
    assert len(losses) == 16
    prior = y.mean()
    assert losses[0] == pytest.approx(-(prior * np.log(prior) + (1 - prior) * np.log(1 - prior)))
    assert losses[1] < losses[0]
    assert losses[-1] < 0.75 * losses[0]


def test_forest_is_deterministic_across_worker_counts(encoded):
    X, y, X_test, _ = encoded
    single = train_model("RF", X, y, SMALL_PARAMS["RF"], seed=5, n_jobs=1)
    pooled = train_model("RF", X, y, SMALL_PARAMS["RF"], seed=5, n_jobs=2)
    assert np.array_equal(single.predict_proba(X_test), pooled.predict_proba(X_test))


def test_evaluate_matches_hand_counted_confusion_matrix():
    model = NidsModel.linear([1.0], bias=-0.5)
    X = np.array([[1.0]] * 6 + [[0.0]] * 2 + [[1.0]] * 3 + [[0.0]] * 9)
    y = np.array([1] * 8 + [0] * 12)
    report = evaluate(model, X, y)
    assert (report.tp, report.fn, report.fp, report.tn) == (6, 2, 3, 9)
    assert report.precision == pytest.approx(6 / 9)
    assert report.recall == pytest.approx(6 / 8)
    assert report.f1 == pytest.approx(12 / 17)
    assert report.accuracy == pytest.approx(15 / 20)


def test_model_container_round_trip_and_errors(tmp_path, encoded, victim_codec):
    X, y, X_test, _ = encoded
    model = train_model("LR", X, y, seed=0, codec_id=victim_codec.codec_id)
    path = save_model(model, tmp_path / "victim.joblib")
    restored = load_model(path, expected_input_dim=X.shape[1])
    assert np.array_equal(restored.predict(X_test), model.predict(X_test))
    assert restored.codec_id == victim_codec.codec_id

    with pytest.raises(DimensionMismatch):
        load_model(path, expected_input_dim=X.shape[1] + 3)
    garbage = tmp_path / "garbage.joblib"
    garbage.write_bytes(b"not a model")
    with pytest.raises(ModelFormatError):
        load_model(garbage)


def test_classifier_refuses_a_foreign_codec(split, encoded, victim_codec):
    X, y, _, _ = encoded
    model = train_model("LR", X, y, seed=0, codec_id=victim_codec.codec_id)
    other = fit_codec(split.victim_set, top_k_ports=victim_codec.top_k_ports)
    assert FlowClassifier(model, other).codec == victim_codec
    with pytest.raises((NidsError, DimensionMismatch)):
        FlowClassifier(model, fit_codec(split.test_set))


def test_tune_model_picks_from_the_grid(encoded):
    X, y, _, _ = encoded
    model, best = tune_model("LR", X, y, seed=0, grid={"C": [0.1, 1.0]})
    assert best["C"] in (0.1, 1.0)
    assert model.estimator.C == best["C"]


def test_surrogate_labels_copy_victim_decisions(encoded):
    X, y, X_test, _ = encoded
    victim = train_model("LR", X, y, seed=0)
    assert np.array_equal(surrogate_labels(victim, X_test), victim.predict(X_test))
