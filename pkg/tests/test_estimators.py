import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from infsample import (
    ClassRemoval,
    DistanceWeightedSampler,
    KMeans,
    LogitSampler,
    MLPClassifier,
    RandomSampler,
    TopKSampler,
)
from infsample.harness import make_blobs


@pytest.fixture(scope="module")
def blobs():
    X, y = make_blobs(4, 60, 10, 5.0, 1.0, 7)
    labels = np.array(["a", "b", "c", "d"])[y]
    return X, labels


@pytest.fixture(scope="module")
def fitted(blobs):
    X, y = blobs
    return MLPClassifier(hidden_layer_sizes=(16,), l2_penalty=0.01, epochs=150).fit(X, y)


def test_mlp_params_and_clone():
    est = MLPClassifier(hidden_layer_sizes=(8, 4), epochs=3)
    params = est.get_params()
    assert params["hidden_layer_sizes"] == (8, 4) and params["epochs"] == 3
    twin = clone(est).set_params(epochs=5)
    assert twin.epochs == 5 and est.epochs == 3


def test_mlp_fit_predict(fitted, blobs):
    X, y = blobs
    assert list(fitted.classes_) == ["a", "b", "c", "d"]
    assert fitted.score(X, y) >= 0.95
    proba = fitted.predict_proba(X[:5])
    np.testing.assert_allclose(proba.sum(1), 1.0, atol=1e-12)
    assert fitted.transform(X).shape == (X.shape[0], 16)
    assert fitted.n_features_in_ == 10


def test_mlp_errors(fitted):
    with pytest.raises(NotFittedError):
        MLPClassifier().predict(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        MLPClassifier().fit(np.zeros((3, 2)), [1, 1, 1])
    with pytest.raises(ValueError):
        fitted.predict(np.full((1, 10), np.nan))
    with pytest.raises(ValueError):
        fitted.encode_labels(["z"])


def test_mlp_in_pipeline(blobs):
    X, y = blobs
    pipe = make_pipeline(StandardScaler(), MLPClassifier(hidden_layer_sizes=(8,), epochs=60))
    assert pipe.fit(X, y).score(X, y) >= 0.95


def test_kmeans_estimator():
    X = np.array([[0.0], [1.0], [10.0], [11.0]])
    km = KMeans(n_clusters=2).fit(X)
    assert sorted(km.cluster_centers_.ravel()) == [0.5, 10.5]
    assert km.predict([[0.2], [10.9]]).tolist() == [km.labels_[0], km.labels_[3]]
    assert km.transform(X).shape == (4, 2)


def test_sampler_estimators(fitted, blobs):
    X, _ = blobs
    feats = fitted.transform(X)
    for est, size in [(RandomSampler(n_samples=12), 12), (TopKSampler(n_clusters=4, k=3), 12),
                      (DistanceWeightedSampler(n_clusters=4, k=3), 12),
                      (LogitSampler(k=3), 12)]:
        data = fitted.predict_proba(X) if isinstance(est, LogitSampler) else feats
        idx = est.fit_sample(data)
        assert len(set(idx.tolist())) == size
        np.testing.assert_array_equal(idx, clone(est).fit_sample(data))


def test_class_removal_estimator(fitted, blobs):
    X, y = blobs
    removed = y == "d"
    before = fitted.score(X[removed], y[removed])
    cr = ClassRemoval(fitted, "d", sampler=LogitSampler(k=15), tau=4.0, damping=0.3).fit(X, y)
    assert len(cr.sample_indices_) == 60
    assert np.all(y[cr.sample_indices_] != "d")
    assert cr.ihvp_result_.converged
    assert cr.score(X[removed], y[removed]) < before
    assert cr.score(X[~removed], y[~removed]) >= 0.9
    # the wrapped estimator is left untouched
    assert fitted.score(X[removed], y[removed]) == before


def test_class_removal_feature_samplers(fitted, blobs):
    X, y = blobs
    for features in ("intrinsic", "raw"):
        cr = ClassRemoval(fitted, "a", sampler=TopKSampler(n_clusters=3, k=10), features=features,
                          damping=0.3).fit(X, y)
        assert len(cr.sample_indices_) == 30
    with pytest.raises(ValueError):
        ClassRemoval(fitted, "a", sampler=TopKSampler(3, 10), features="vit", damping=0.3).fit(X, y)
