import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from lmrec import LandmarkEmbedder, LandmarkRecognizer, ReferenceCleaner, ThresholdAgglomerativeClustering

ESTIMATORS = [
    LandmarkEmbedder(hidden=(4,), dim=2, epochs=1),
    LandmarkRecognizer(distance_threshold=3.0, min_cluster_size=2),
    ReferenceCleaner(gamma=0.3),
    ThresholdAgglomerativeClustering(linkage="average", distance_threshold=1.5),
]


@pytest.mark.parametrize("est", ESTIMATORS, ids=lambda e: type(e).__name__)
def test_get_params_and_clone(est):
    params = est.get_params()
    twin = clone(est)
    assert twin is not est and twin.get_params() == params
    twin.set_params(**params)
    assert repr(twin) == repr(est)


@pytest.mark.parametrize("est", ESTIMATORS[:3], ids=lambda e: type(e).__name__)
def test_unfitted_raises(est):
    method = est.predict if not isinstance(est, LandmarkEmbedder) else est.transform
    with pytest.raises(NotFittedError):
        method(np.zeros((2, 3)))


def test_inputs_are_validated():
    with pytest.raises(ValueError):
        LandmarkRecognizer().fit(np.array([[np.nan, 1.0]]), [1])
    with pytest.raises(ValueError):
        ReferenceCleaner().fit(np.zeros((0, 2)))


def test_clustering_fit_predict_shape():
    X = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0]])
    labels = clone(ESTIMATORS[3]).fit_predict(X)
    assert labels.tolist() == [0, 0, 1]
