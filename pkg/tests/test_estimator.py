import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tconv.core import ContractError
from tconv.data import clips_to_arrays, make_motion_dataset
from tconv.estimator import TConvClassifier, check_clips


@pytest.fixture(scope="module")
def clips():
    X, y = clips_to_arrays(make_motion_dataset(12, seed=1, size=16))
    names = np.array(["left", "right", "up", "down", "in", "out"])[y]
    return X, names


@pytest.fixture(scope="module")
def fitted(clips):
    X, y = clips
    return TConvClassifier(epochs=2, batch_size=4).fit(X, y)


def test_fit_sets_learned_attributes(fitted, clips):
    X, y = clips
    assert set(fitted.classes_) == set(y)
    assert fitted.n_features_in_ == 1
    assert len(fitted.loss_curve_) == 2 * 3
    assert fitted.model_.n_params() == 1702


def test_predictions_use_the_original_labels(fitted, clips):
    X, _ = clips
    pred = fitted.predict(X)
    assert pred.shape == (12,) and set(pred) <= set(fitted.classes_)
    proba = fitted.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert np.array_equal(fitted.classes_[proba.argmax(1)], pred)
    assert 0.0 <= fitted.score(X, fitted.predict(X)) == 1.0


def test_four_dimensional_input_is_single_channel(fitted, clips):
    X, _ = clips
    np.testing.assert_array_equal(fitted.decision_function(X[:, 0]), fitted.decision_function(X))


def test_unfitted_estimator_raises(clips):
    with pytest.raises(NotFittedError):
        TConvClassifier().predict(clips[0])


def test_clone_keeps_params_and_drops_state(fitted):
    c = clone(fitted)
    assert c.get_params() == fitted.get_params()
    assert not hasattr(c, "model_")


def test_fit_is_deterministic(clips):
    X, y = clips
    a = TConvClassifier(epochs=1, batch_size=4, random_state=3).fit(X, y)
    b = TConvClassifier(epochs=1, batch_size=4, random_state=3).fit(X, y)
    assert a.decision_function(X).tobytes() == b.decision_function(X).tobytes()


def test_dense_mode(clips):
    X, y = clips
    est = TConvClassifier(mode="3d", epochs=1, batch_size=6).fit(X, y)
    assert est.model_.n_params() == 4382


def test_input_validation(clips, fitted):
    X, y = clips
    with pytest.raises(ContractError):
        TConvClassifier(epochs=1).fit(X, y[:-1])
    with pytest.raises(ContractError):
        TConvClassifier(epochs=1).fit(X, np.zeros(len(X)))
    with pytest.raises(ValueError):
        TConvClassifier(epochs=1).fit(X, np.linspace(0, 1, len(X)))
    bad = X.copy()
    bad[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(ContractError):
        fitted.predict(bad)
    with pytest.raises(ContractError):
        fitted.predict(np.concatenate([X, X], axis=1))
    with pytest.raises(ContractError):
        check_clips(np.zeros((0, 1, 2, 3, 3)))
    with pytest.raises(ContractError):
        check_clips(np.zeros((3, 3)))
