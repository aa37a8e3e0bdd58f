"""Virtual-category semi-supervised learning on synthetic desk-scale tasks.

The core idea: when two views of an unlabelled unit disagree about its class,
don't guess and don't throw the unit away. Collect the plausible classes into
a potential category set, append a per-unit virtual logit built from the
teacher feature, and train the unit toward that virtual slot with every
plausible class removed from the normalization, so wrong pseudo labels can't
poison the classifier while the feature still receives a useful gradient.
"""

from .boxgeom import (BBox, BoxPrediction, QualityFlags, boundary_quality, iou,
                      reg_star_loss, smooth_l1)
from .classifier import (ClassifierWeights, IgnoreMask, ce_loss, forward_logits,
                         masked_softmax, mse_targets_loss, softmax_probs)
from .config import (ConfigError, EmaConfig, OptimizerConfig, RunConfig,
                     StepMetrics, Thresholds, config_from_dict, config_to_dict,
                     default_config)
from .engine import (EngineError, ModelParams, NormStatsBank, OptState,
                     TrainAbort, TrainState, bn_update, ema_update,
                     evaluate_grid, evaluate_scenes, filter_pseudo, init_state,
                     predict_grid, predict_scene_boxes, sgd_step,
                     train_step_detection, train_step_segmentation)
from .estimators import VCGridClassifier, VCSceneDetector
from .harness import (compute_miou, evaluate_state, fd_check_leaf,
                      gradcheck_suite, make_task, run_ablation, run_experiment,
                      run_loop)
from .pcset import (BoxMatch, PolicyConfig, UnitPrediction, match_boxes,
                    pcset_crossmodel, pcset_crossmodel_unit, pcset_mutual,
                    pcset_pairwise_boxes, pcset_temporal, pcset_top2)
from .synthdata import (GridTask, GridTaskSpec, Scene, SceneTask, SceneTaskSpec,
                        SceneUnit, gen_grid, gen_scene, perturb, read_grid_jsonl,
                        read_scene_jsonl, unit_seed, write_grid_jsonl,
                        write_scene_jsonl)
from .vclearn import (AttentionGenerator, ExtendedLogits, PotentialCategorySet,
                      VCTarget, VirtualWeight, attention_vc_loss,
                      cosine_sim_loss, extend_logits,
                      make_virtual_weight_attention,
                      make_virtual_weight_normalized, neg_loss,
                      train_attention_generator_step, vc_ce_loss, vc_mse_loss)

__version__ = "0.1.0"
