import numpy as np
import pytest
from sklearn.base import clone
from sklearn.utils.validation import check_is_fitted

from xvol import config
from xvol.data import PhantomConfig, phantom_generate
from xvol.errors import ConfigError
from xvol.estimator import VolumeNetClassifier


@pytest.fixture(autouse=True)
def f64():
    with config.precision_context("f64"):
        yield


def phantom_arrays(n=14, seed=0):
    recs = phantom_generate(PhantomConfig(dims=(8, 12, 8), n_volumes=n,
                                          sigma=0.05, seed=seed))
    X = np.stack([r.values for r in recs])
    y = np.array([r.label for r in recs])
    return X, y


def test_get_set_params_round_trip():
    est = VolumeNetClassifier(variant="NA", lam=0.25)
    params = est.get_params()
    assert params["variant"] == "NA" and params["lam"] == 0.25
    est2 = clone(est)
    assert est2.get_params() == params


def test_fit_predict_api():
    X, y = phantom_arrays()
    est = VolumeNetClassifier(epochs=1, batch_size=3, learning_rate=1e-3, seed=0)
    est.fit(X, y)
    check_is_fitted(est, "model_")
    proba = est.predict_proba(X)
    assert proba.shape == (len(X), 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)
    pred = est.predict(X)
    assert set(np.unique(pred)) <= {0, 1}
    assert list(est.classes_) == [0, 1]
    assert 0.0 <= est.score(X, y) <= 1.0


def test_accepts_4d_input():
    X, y = phantom_arrays()
    est = VolumeNetClassifier(epochs=1, batch_size=3, seed=0)
    est.fit(X[:, 0], y)
    assert est.predict_proba(X[:, 0]).shape == (len(X), 2)


def test_predict_before_fit_errors():
    X, _ = phantom_arrays(n=2)
    with pytest.raises(ConfigError):
        VolumeNetClassifier().predict(X)


def test_bad_input_shape_errors():
    est = VolumeNetClassifier()
    with pytest.raises(ConfigError):
        est._records(np.zeros((3, 2, 4, 4, 4)))
