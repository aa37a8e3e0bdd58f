"""Scikit-learn style front ends for the two synthetic tasks.

VCGridClassifier follows the semi-supervised convention of LabelPropagation:
pass y = -1 for unlabelled rows. VCSceneDetector keeps the parameter
management of BaseEstimator but takes scenes rather than flat arrays, since a
detection sample is a structured object.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import EmaConfig, OptimizerConfig, RunConfig, Thresholds
from .engine import (init_state, next_detection_batches, next_grid_batches,
                     predict_grid, predict_scene_boxes, train_step_detection,
                     train_step_segmentation)
from .pcset import PolicyConfig
from .synthdata import GridTask, GridTaskSpec, SceneTask, SceneTaskSpec


class VCGridClassifier(ClassifierMixin, BaseEstimator):
    """Semi-supervised unit classifier trained with virtual-category routing.

    Rows of X with y == -1 are treated as unlabelled and contribute through
    the teacher's pseudo labels and the configured confusion policy. With no
    -1 rows the fit is plain supervised training.
    """

    def __init__(self, iterations=300, policy="mutual", applies_to="both",
                 loss_form="vc-ce", weight_gen="normalized", t=0.95, t_low=0.6,
                 beta=1.0, lr=0.001, weight_decay=0.0001, momentum=0.9,
                 ema_momentum=0.9996, bn_momentum=0.9, hidden_width=32,
                 batch_labelled=32, batch_unlabelled=32, focal_gamma=None,
                 magnitude="min-weight-norm", random_state=0):
        self.iterations = iterations
        self.policy = policy
        self.applies_to = applies_to
        self.loss_form = loss_form
        self.weight_gen = weight_gen
        self.t = t
        self.t_low = t_low
        self.beta = beta
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.ema_momentum = ema_momentum
        self.bn_momentum = bn_momentum
        self.hidden_width = hidden_width
        self.batch_labelled = batch_labelled
        self.batch_unlabelled = batch_unlabelled
        self.focal_gamma = focal_gamma
        self.magnitude = magnitude
        self.random_state = random_state

    def _config(self, task: str) -> RunConfig:
        return RunConfig(
            task=task,
            policy=PolicyConfig(policy=self.policy, applies_to=self.applies_to),
            loss_form=self.loss_form,
            weight_gen=self.weight_gen,
            thresholds=Thresholds(t=self.t, t_low=self.t_low, beta=self.beta),
            ema=EmaConfig(momentum=self.ema_momentum),
            bn_momentum=self.bn_momentum,
            optimizer=OptimizerConfig(lr=self.lr, weight_decay=self.weight_decay,
                                      momentum=self.momentum),
            iterations=self.iterations,
            seed=self.random_state,
            focal_gamma=self.focal_gamma,
            magnitude=self.magnitude,
            batch_labelled=self.batch_labelled,
            batch_unlabelled=self.batch_unlabelled,
            hidden_width=self.hidden_width,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = np.asarray(y)
        labelled_mask = y != -1
        self.classes_ = np.unique(y[labelled_mask])
        if self.classes_.shape[0] < 2:
            raise ValueError("need labelled samples from at least two classes")
        self.n_features_in_ = X.shape[1]

        index = {c: i for i, c in enumerate(self.classes_)}
        labels = np.array([index[v] if v in index else -1 for v in y])
        n = X.shape[0]
        spec = GridTaskSpec(height=1, width=max(n, 1),
                            num_classes=self.classes_.shape[0],
                            feature_dim=X.shape[1], confusable_pairs=())
        task = GridTask(
            spec=spec,
            features=np.ascontiguousarray(X, dtype=np.float64),
            labels=labels,
            unit_ids=np.arange(n),
            labelled_ids=np.flatnonzero(labelled_mask),
            unlabelled_ids=np.flatnonzero(~labelled_mask),
            test_features=np.zeros((0, X.shape[1])),
            test_labels=np.zeros(0, dtype=int),
            test_unit_ids=np.zeros(0, dtype=int),
        )
        config = self._config("grid-seg")
        state = init_state(task, config)
        for _ in range(config.iterations):
            batch_l, batch_u = next_grid_batches(state, task)
            train_step_segmentation(batch_l, batch_u, state, task)
        self.state_ = state
        return self

    def predict(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.classes_[predict_grid(self.state_, X)]


class VCSceneDetector(BaseEstimator):
    """Teacher-student box classifier/regressor over structured scenes.

    fit takes labelled scenes (SceneUnit.gt_class and gt_box used as
    supervision) plus optional unlabelled scenes handled by the temporal or
    cross-model policy. predict returns, per scene, one BoxPrediction per
    unit on clean features.
    """

    def __init__(self, iterations=300, policy="temporal", iou_threshold=0.5,
                 loss_form="vc-ce", weight_gen="normalized", t=0.7, beta=4.0,
                 lr=0.01, weight_decay=0.02, momentum=0.9, ema_momentum=0.9996,
                 bn_momentum=0.9, hidden_width=32, batch_labelled=32,
                 batch_unlabelled=32, focal_gamma=2.0, magnitude=3.5,
                 t_loc=0.05, num_fg_classes=None, random_state=0):
        self.iterations = iterations
        self.policy = policy
        self.iou_threshold = iou_threshold
        self.loss_form = loss_form
        self.weight_gen = weight_gen
        self.t = t
        self.beta = beta
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.ema_momentum = ema_momentum
        self.bn_momentum = bn_momentum
        self.hidden_width = hidden_width
        self.batch_labelled = batch_labelled
        self.batch_unlabelled = batch_unlabelled
        self.focal_gamma = focal_gamma
        self.magnitude = magnitude
        self.t_loc = t_loc
        self.num_fg_classes = num_fg_classes
        self.random_state = random_state

    def fit(self, scenes, unlabelled_scenes=()):
        scenes = tuple(scenes)
        unlabelled_scenes = tuple(unlabelled_scenes)
        if not scenes:
            raise ValueError("need at least one labelled scene")
        all_units = [u for s in list(scenes) + list(unlabelled_scenes) for u in s.units]
        if not all_units:
            raise ValueError("scenes contain no units")
        feature_dim = all_units[0].features.shape[0]
        if self.num_fg_classes is not None:
            num_fg = int(self.num_fg_classes)
        else:
            # background units carry the index right after the foreground ones
            num_fg = max(int(u.gt_class) for u in all_units)
        spec = SceneTaskSpec(num_fg_classes=num_fg, feature_dim=feature_dim,
                             label_budget=len(scenes),
                             num_unlabelled=len(unlabelled_scenes), num_test=0,
                             confusable_pairs=())
        task = SceneTask(spec=spec, labelled=scenes, unlabelled=unlabelled_scenes,
                         test=())
        config = RunConfig(
            task="scene-det",
            policy=PolicyConfig(policy=self.policy, iou_threshold=self.iou_threshold),
            loss_form=self.loss_form,
            weight_gen=self.weight_gen,
            thresholds=Thresholds(t=self.t, t_low=0.0, beta=self.beta),
            ema=EmaConfig(momentum=self.ema_momentum),
            bn_momentum=self.bn_momentum,
            optimizer=OptimizerConfig(lr=self.lr, weight_decay=self.weight_decay,
                                      momentum=self.momentum),
            iterations=self.iterations,
            seed=self.random_state,
            focal_gamma=self.focal_gamma,
            magnitude=self.magnitude,
            t_loc=self.t_loc,
            batch_labelled=self.batch_labelled,
            batch_unlabelled=self.batch_unlabelled,
            hidden_width=self.hidden_width,
        )
        state = init_state(task, config)
        for _ in range(config.iterations):
            batch_l, batch_u = next_detection_batches(state, task)
            train_step_detection(batch_l, batch_u, state, task)
        self.state_ = state
        self.task_spec_ = spec
        return self

    def predict(self, scenes):
        check_is_fitted(self, "state_")
        return [predict_scene_boxes(self.state_, scene, self.task_spec_.bg_index)
                for scene in scenes]
