"""Scikit-learn style wrappers around the training engine."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from vcforge.estimators import VCGridClassifier, VCSceneDetector
from vcforge.synthdata import SceneTaskSpec, gen_scene


def blob_data(seed=0, n_per=60, labelled_per=5):
    """Three well-separated gaussian blobs; most labels hidden as -1."""
    rng = np.random.default_rng(seed)
    centers = np.array([[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]])
    X, y = [], []
    for c, center in enumerate(centers):
        X.append(center + rng.normal(0.0, 0.5, size=(n_per, 3)))
        y.append(np.full(n_per, c))
    X = np.vstack(X)
    y = np.concatenate(y)
    y_semi = np.full_like(y, -1)
    for c in range(3):
        idx = np.flatnonzero(y == c)[:labelled_per]
        y_semi[idx] = c
    return X, y, y_semi


def fast_params():
    return dict(iterations=60, ema_momentum=0.95, lr=0.05, t=0.7,
                batch_labelled=15, batch_unlabelled=32, random_state=0)


def test_get_set_params_round_trip():
    est = VCGridClassifier(iterations=10, t=0.8)
    params = est.get_params()
    assert params["iterations"] == 10 and params["t"] == 0.8
    est2 = VCGridClassifier().set_params(**params)
    assert est2.get_params() == params


def test_clone_preserves_params():
    est = VCGridClassifier(loss_form="vc-mse", beta=2.0)
    c = clone(est)
    assert c.loss_form == "vc-mse" and c.beta == 2.0


def test_fit_predict_learns_blobs():
    X, y, y_semi = blob_data()
    est = VCGridClassifier(**fast_params())
    est.fit(X, y_semi)
    acc = np.mean(est.predict(X) == y)
    assert acc > 0.9


def test_classes_preserved_with_gaps():
    X, y, y_semi = blob_data()
    y_shift = np.where(y_semi >= 0, y_semi * 2 + 3, -1)  # classes {3, 5, 7}
    est = VCGridClassifier(**fast_params())
    est.fit(X, y_shift)
    assert set(est.classes_) == {3, 5, 7}
    assert set(np.unique(est.predict(X))) <= {3, 5, 7}


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        VCGridClassifier().predict(np.zeros((2, 3)))


def test_all_unlabelled_rejected():
    X = np.random.default_rng(0).normal(size=(10, 3))
    with pytest.raises(ValueError):
        VCGridClassifier(iterations=5).fit(X, np.full(10, -1))


def test_single_class_rejected():
    X = np.random.default_rng(0).normal(size=(10, 3))
    y = np.full(10, -1)
    y[:3] = 2
    with pytest.raises(ValueError):
        VCGridClassifier(iterations=5).fit(X, y)


def test_predict_checks_feature_count():
    X, _, y_semi = blob_data()
    est = VCGridClassifier(**fast_params())
    est.fit(X, y_semi)
    with pytest.raises(ValueError):
        est.predict(X[:, :2])


def test_scene_detector_fit_predict():
    spec = SceneTaskSpec(label_budget=4, num_unlabelled=4, num_test=2, seed=0)
    task = gen_scene(spec)
    det = VCSceneDetector(iterations=10, batch_labelled=4, batch_unlabelled=4,
                          random_state=0)
    det.fit(task.labelled, unlabelled_scenes=task.unlabelled)
    preds = det.predict(task.test)
    assert len(preds) == len(task.test)
    for scene, scene_preds in zip(task.test, preds):
        assert len(scene_preds) == len(scene.units)
        for p in scene_preds:
            assert 0 <= p.cls <= det.task_spec_.bg_index
            assert p.bbox.x2 > p.bbox.x1 and p.bbox.y2 > p.bbox.y1
