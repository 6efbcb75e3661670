import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from drue._validation import ConfigurationError, ContractViolation
from drue.datasets import stack_images, stack_labels
from drue.estimator import DRUEClassifier
from drue.uncertainty import drue_score

SMALL = dict(channels=(8, 16, 32), downsample=(False, True, True), stem_channels=8, max_epochs=2, patience=2)


@pytest.fixture(scope="module")
def data(small_split):
    return stack_images(small_split.train), stack_labels(small_split.train), stack_images(small_split.test)


@pytest.fixture(scope="module")
def fitted(data):
    X, y, _ = data
    return DRUEClassifier(**SMALL).fit(X, y)


def test_params_round_trip():
    est = DRUEClassifier(**SMALL, learning_rate=5e-4)
    params = est.get_params()
    assert params["learning_rate"] == 5e-4 and params["channels"] == (8, 16, 32)
    twin = clone(est)
    assert twin.get_params() == params
    twin.set_params(freeze=False)
    assert twin.freeze is False and est.freeze is True


def test_unfitted_raises(data):
    with pytest.raises(NotFittedError):
        DRUEClassifier().predict(data[2])


def test_fit_outputs(fitted, data):
    _, _, X_test = data
    proba = fitted.predict_proba(X_test)
    assert proba.shape == (len(X_test), 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(fitted.predict(X_test)) <= {0, 1}
    assert fitted.freeze_report_ == 0.0
    assert fitted.bundle_.stages == ["classifier", "g1", "g0"]


def test_transform_columns_follow_methods(fitted, data):
    X_test = data[2]
    T = fitted.transform(X_test)
    assert T.shape == (len(X_test), 4)
    np.testing.assert_allclose(T[:, 0], drue_score(X_test, fitted.bundle_))
    np.testing.assert_allclose(T[:, 0], fitted.uncertainty(X_test, "drue"))


def test_uncertainty_map_shape(fitted, data):
    maps = fitted.uncertainty_map(data[0][:3])
    assert maps.shape == (3, 32, 32) and maps.min() >= 0 and maps.max() <= 1


def test_from_bundle_matches(fitted, data):
    twin = DRUEClassifier.from_bundle(fitted.bundle_)
    np.testing.assert_array_equal(twin.predict_proba(data[2]), fitted.predict_proba(data[2]))


def test_input_validation(fitted, data):
    X, y, _ = data
    with pytest.raises(ContractViolation):
        fitted.predict(np.zeros((2, 64, 64, 3)))
    with pytest.raises(ContractViolation):
        DRUEClassifier(**SMALL).fit(X, y[:-1])
    with pytest.raises(ContractViolation):
        DRUEClassifier(**SMALL).fit(X * 2, y)
    with pytest.raises(ConfigurationError):
        DRUEClassifier(**SMALL, validation_fraction=1.5).fit(X, y)
