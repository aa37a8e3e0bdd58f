"""Teacher-student training engine with virtual-category routing.

The student trains by gradient; the teacher is an exponential moving average
of the student and is the model that produces pseudo labels and evaluation
predictions. Both models keep two groups of normalization statistics, one fed
by pseudo-labelling forward passes (clean weak views) and one fed by training
forward passes (strong views), so the two data distributions never mix.

The backbone is a deliberately small two-hidden-layer perceptron whose
pre-activations are standardized with the running statistics of the active
phase. All heads are bias-free linear maps on the embedding.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .boxgeom import BBox, BoxPrediction, QualityFlags, boundary_quality, reg_star_loss
from .classifier import ClassifierWeights, ce_loss, softmax_probs
from .config import RunConfig, StepMetrics, Thresholds
from .pcset import match_boxes, pcset_crossmodel, pcset_mutual, pcset_temporal, pcset_top2
from .synthdata import GridTask, SceneTask, perturb, unit_seed
from .vclearn import (AttentionGenerator, cosine_sim_loss, extend_logits,
                      make_virtual_weight_attention, make_virtual_weight_normalized,
                      neg_loss, train_attention_generator_step, vc_ce_loss, vc_mse_loss)

PHASE_LABEL = "label"
PHASE_TRAIN = "train"
NORM_EPS = 1e-5
MIN_BOX_SIDE = 1.0
GEN_SAMPLES_PER_STEP = 4


class EngineError(ValueError):
    pass


class TrainAbort(RuntimeError):
    """Raised when a step produces a non-finite loss."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


# parameters ------------------------------------------------------------------

@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple
    start: int
    stop: int


def make_layout(shapes: list) -> tuple:
    entries = []
    offset = 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        entries.append(LayoutEntry(name, tuple(shape), offset, offset + size))
        offset += size
    return tuple(entries)


@dataclass
class ModelParams:
    """All trainable parameters as one flat vector plus a named layout."""

    flat: np.ndarray
    layout: tuple

    def view(self, name: str) -> np.ndarray:
        for entry in self.layout:
            if entry.name == name:
                return self.flat[entry.start:entry.stop].reshape(entry.shape)
        raise EngineError(f"no parameter named {name!r}")

    def copy(self) -> "ModelParams":
        return ModelParams(self.flat.copy(), self.layout)

    @classmethod
    def initialize(cls, layout: tuple, rng: np.random.Generator) -> "ModelParams":
        flat = np.empty(layout[-1].stop)
        params = cls(flat, layout)
        for entry in layout:
            fan_in = entry.shape[-1]
            params.flat[entry.start:entry.stop] = rng.normal(
                0.0, 1.0 / np.sqrt(fan_in), size=entry.stop - entry.start)
        return params


def ema_update(teacher: ModelParams, student: ModelParams, momentum: float) -> ModelParams:
    """teacher <- momentum * teacher + (1 - momentum) * student, in place."""
    if not 0.0 <= momentum < 1.0:
        raise EngineError("ema momentum must lie in [0, 1)")
    if teacher.flat.shape != student.flat.shape:
        raise EngineError("teacher and student parameter shapes differ")
    teacher.flat *= momentum
    teacher.flat += (1.0 - momentum) * student.flat
    return teacher


@dataclass
class OptState:
    velocity: np.ndarray


def sgd_step(params: ModelParams, grads: np.ndarray, opt: OptState,
             lr: float, weight_decay: float, momentum: float) -> ModelParams:
    """Momentum SGD with decoupled additive weight decay."""
    if not np.all(np.isfinite(grads)):
        raise EngineError("sgd_step: non-finite gradient")
    opt.velocity *= momentum
    opt.velocity += grads
    params.flat -= lr * opt.velocity
    if weight_decay != 0.0:
        params.flat -= lr * weight_decay * params.flat
    return params


# normalization statistics ------------------------------------------------------

@dataclass
class NormStatsBank:
    """Per-layer running mean and variance, kept separately per phase."""

    momentum: float
    stats: dict = field(default_factory=dict)

    @classmethod
    def create(cls, layer_dims: dict, momentum: float) -> "NormStatsBank":
        if not 0.0 < momentum <= 1.0:
            raise EngineError("bn momentum must lie in (0, 1]")
        stats = {}
        for layer, dim in layer_dims.items():
            stats[layer] = {phase: (np.zeros(dim), np.ones(dim))
                            for phase in (PHASE_LABEL, PHASE_TRAIN)}
        return cls(momentum=momentum, stats=stats)

    def get(self, layer: str, phase: str):
        return self.stats[layer][phase]

    def copy(self) -> "NormStatsBank":
        return NormStatsBank(self.momentum,
                             {layer: {phase: (m.copy(), v.copy())
                                      for phase, (m, v) in phases.items()}
                              for layer, phases in self.stats.items()})


def bn_update(bank: NormStatsBank, batch_stats: dict, phase: str) -> NormStatsBank:
    """Blend batch statistics into one phase group, leaving the other untouched.

    new = (1 - momentum) * old + momentum * batch.
    """
    if phase not in (PHASE_LABEL, PHASE_TRAIN):
        raise EngineError(f"unknown phase {phase!r}")
    m = bank.momentum
    for layer, (batch_mean, batch_var) in batch_stats.items():
        batch_var = np.asarray(batch_var, dtype=np.float64)
        if np.any(batch_var <= 0.0):
            raise EngineError(f"non-positive batch variance for layer {layer!r}")
        old_mean, old_var = bank.stats[layer][phase]
        bank.stats[layer][phase] = ((1.0 - m) * old_mean + m * np.asarray(batch_mean),
                                    (1.0 - m) * old_var + m * batch_var)
    return bank


def filter_pseudo(probs: np.ndarray, thresholds: Thresholds) -> str:
    """Confidence band of one probability vector: trusted, retained, or discarded."""
    conf = float(np.max(probs))
    if conf > thresholds.t:
        return "trusted"
    if conf < thresholds.t_low:
        return "discarded"
    return "retained"


# forward passes ----------------------------------------------------------------

def _batch_stats(z: np.ndarray):
    return z.mean(axis=0), z.var(axis=0)


def forward_numpy(params: ModelParams, bank: NormStatsBank, x: np.ndarray,
                  phase: str, update: bool = True):
    """Inference forward over a batch; returns (embeddings, logits).

    When update is set and the batch is big enough to define a variance, the
    batch statistics are blended into the bank first and the refreshed running
    statistics normalize the activations.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    h = x
    for layer, w_name in (("layer1", "w1"), ("layer2", "w2")):
        z = h @ params.view(w_name).T
        if update and z.shape[0] >= 2:
            bn_update(bank, {layer: _batch_stats(z)}, phase)
        mean, var = bank.get(layer, phase)
        h = np.maximum((z - mean) / np.sqrt(var + NORM_EPS), 0.0)
    logits = h @ params.view("wcls").T
    return h, logits


def forward_graph(param_nodes: dict, bank: NormStatsBank, x: np.ndarray,
                  phase: str, update: bool = True):
    """Differentiable per-unit forward mirroring forward_numpy exactly."""
    units = [dc.constant(row) for row in np.atleast_2d(x)]
    current = units
    for layer, w_name in (("layer1", "w1"), ("layer2", "w2")):
        z_nodes = [dc.matvec(param_nodes[w_name], u) for u in current]
        z_vals = np.stack([n.value for n in z_nodes])
        if update and z_vals.shape[0] >= 2:
            bn_update(bank, {layer: _batch_stats(z_vals)}, phase)
        mean, var = bank.get(layer, phase)
        mean_c = dc.constant(mean)
        inv_c = dc.constant(1.0 / np.sqrt(var + NORM_EPS))
        current = [dc.relu(dc.mul(dc.sub(z, mean_c), inv_c)) for z in z_nodes]
    embeddings = current
    logits = [dc.matvec(param_nodes["wcls"], f) for f in embeddings]
    return embeddings, logits


# training state ----------------------------------------------------------------

@dataclass
class TrainState:
    config: RunConfig
    student: ModelParams
    teacher: ModelParams
    student_bank: NormStatsBank
    teacher_bank: NormStatsBank
    opt: OptState
    rng: np.random.Generator
    gen: AttentionGenerator | None = None
    iteration: int = 0
    epoch: int = 0
    scene_queue: list = field(default_factory=list)
    last_preds: dict = field(default_factory=dict)
    peer: "TrainState | None" = None


def _task_dims(task):
    if isinstance(task, GridTask):
        return task.feature_dim, task.num_classes, False
    if isinstance(task, SceneTask):
        return task.feature_dim, task.num_classes, True
    raise EngineError(f"unsupported task object {type(task).__name__}")


def init_state(task, config: RunConfig, make_peer: bool = True) -> TrainState:
    in_dim, num_classes, with_reg = _task_dims(task)
    hidden = config.hidden_width
    shapes = [("w1", (hidden, in_dim)), ("w2", (hidden, hidden)),
              ("wcls", (num_classes, hidden))]
    if with_reg:
        shapes.append(("wreg", (4, hidden)))
    layout = make_layout(shapes)

    root = np.random.SeedSequence(config.seed)
    init_seq, batch_seq, gen_seq = root.spawn(3)
    student = ModelParams.initialize(layout, np.random.default_rng(init_seq))
    teacher = student.copy()
    layer_dims = {"layer1": hidden, "layer2": hidden}
    state = TrainState(
        config=config,
        student=student,
        teacher=teacher,
        student_bank=NormStatsBank.create(layer_dims, config.bn_momentum),
        teacher_bank=NormStatsBank.create(layer_dims, config.bn_momentum),
        opt=OptState(np.zeros_like(student.flat)),
        rng=np.random.default_rng(batch_seq),
        gen=(AttentionGenerator.initialize(hidden, gen_seq)
             if config.weight_gen == "attention" else None),
    )
    if config.policy.policy == "cross" and make_peer:
        peer_config = dataclasses.replace(config, seed=config.seed + 1000003)
        state.peer = init_state(task, peer_config, make_peer=False)
    return state


def _grad_flat(param_nodes: dict, params: ModelParams) -> np.ndarray:
    grads = np.zeros_like(params.flat)
    for entry in params.layout:
        node = param_nodes.get(entry.name)
        if node is not None and node.grad is not None:
            grads[entry.start:entry.stop] = node.grad.ravel()
    return grads


def _mean_loss(nodes: list):
    if not nodes:
        return None
    total = nodes[0]
    for n in nodes[1:]:
        total = dc.add(total, n)
    return dc.scale(total, 1.0 / len(nodes))


def _perturb_batch(features: np.ndarray, uids, strength: str, seed: int, step: int) -> np.ndarray:
    kind = 0 if strength == "weak" else 1
    return np.stack([perturb(features[i], strength, unit_seed(seed, step, int(uids[i]), kind))
                     for i in range(features.shape[0])])


def _make_virtual_weight(state: TrainState, f_teacher: np.ndarray,
                         weights: ClassifierWeights):
    if state.config.weight_gen == "attention":
        return make_virtual_weight_attention(state.gen, f_teacher, weights,
                                             state.config.magnitude)
    return make_virtual_weight_normalized(f_teacher, weights, state.config.magnitude)


def _vc_unit_loss(state: TrainState, f_node, logits_node, wcls_node, f_teacher, pc):
    """Loss node for one confusing unit, or None when no loss is definable.

    A unit whose teacher embedding died under the activations has no virtual
    direction, and the cosine form is undefined on a dead student embedding;
    such units contribute nothing this step rather than aborting the run.
    """
    cfg = state.config
    if cfg.loss_form == "neg":
        return neg_loss(logits_node, pc)
    if np.linalg.norm(f_teacher) == 0.0:
        return None
    weights = ClassifierWeights(state.student.view("wcls").copy())
    wv = _make_virtual_weight(state, f_teacher, weights)
    if cfg.loss_form == "vc-ce":
        ext = extend_logits(f_node, wcls_node, wv)
        return vc_ce_loss(ext, pc, focal_gamma=cfg.focal_gamma)
    if cfg.loss_form == "vc-mse":
        ext = extend_logits(f_node, wcls_node, wv)
        return vc_mse_loss(ext, pc)
    if cfg.loss_form == "cosine":
        if np.linalg.norm(f_node.value) == 0.0:
            return None
        return cosine_sim_loss(f_node, wv, wcls_node, pc)
    raise EngineError(f"loss form {cfg.loss_form!r} does not produce a VC loss")


def _confusing_outcome(cfg: RunConfig, y_teacher: int, pc):
    if cfg.loss_form == "baseline-keep":
        return ("ce", y_teacher)
    if cfg.loss_form == "baseline-discard":
        return None
    return ("vc", pc)


def _route_seg_unit(cfg: RunConfig, band: str, probs: np.ndarray, y_teacher: int,
                    y_student: int):
    """One unlabelled unit's fate: (outcome, discovered_pc).

    outcome is ('ce', label), ('vc', pc), or None; discovered_pc records what
    the policy found regardless of how the loss form routes it.
    """
    policy = cfg.policy
    if band == "discarded":
        return None, None
    if band == "trusted":
        if policy.policy == "mutual" and policy.applies_to in ("trusted", "both"):
            pc = pcset_mutual(y_teacher, y_student)
            if not pc.is_confusing:
                return ("ce", y_teacher), pc
            return _confusing_outcome(cfg, y_teacher, pc), pc
        return ("ce", y_teacher), None
    # retained band: top-2 discovery when this band is active
    top2_active = (policy.policy == "top2" and policy.applies_to in ("retained", "both")) \
        or (policy.policy == "mutual" and policy.applies_to == "both")
    if top2_active:
        pc = pcset_top2(probs)
        return _confusing_outcome(cfg, y_teacher, pc), pc
    return None, None


def train_step_segmentation(batch_l: np.ndarray, batch_u: np.ndarray,
                            state: TrainState, task: GridTask) -> StepMetrics:
    """One teacher-student step on the pixel grid task.

    batch_l and batch_u are index arrays into the task's unit arrays. The
    teacher reads the weak view, the student trains on the strong view, and
    every unlabelled unit is routed to pseudo-label cross entropy, a
    virtual-category loss, or nowhere.
    """
    cfg = state.config
    step = state.iteration
    batch_l = np.asarray(batch_l, dtype=int)
    batch_u = np.asarray(batch_u, dtype=int)
    if batch_l.size == 0:
        raise EngineError("segmentation step needs at least one labelled unit")
    use_unlabelled = cfg.thresholds.beta > 0.0 and batch_u.size > 0

    x_l = task.features[batch_l]
    y_l = task.labels[batch_l]
    uids_l = task.unit_ids[batch_l]
    weak_l = _perturb_batch(x_l, uids_l, "weak", cfg.seed, step)

    routed = []
    probs_t = np.zeros((0, task.num_classes))
    strong_u = np.zeros((0, task.feature_dim))
    f_teacher_u = np.zeros((0, cfg.hidden_width))
    bands = []
    if use_unlabelled:
        x_u = task.features[batch_u]
        uids_u = task.unit_ids[batch_u]
        weak_u = _perturb_batch(x_u, uids_u, "weak", cfg.seed, step)
        strong_u = _perturb_batch(x_u, uids_u, "strong", cfg.seed, step)

        f_teacher_u, logits_t = forward_numpy(state.teacher, state.teacher_bank,
                                              weak_u, PHASE_LABEL)
        probs_t = softmax_probs(logits_t)
        _, logits_s_weak = forward_numpy(state.student, state.student_bank,
                                         weak_u, PHASE_LABEL)
        y_s_weak = np.argmax(logits_s_weak, axis=1)
        y_t = np.argmax(probs_t, axis=1)
        bands = [filter_pseudo(probs_t[i], cfg.thresholds) for i in range(len(batch_u))]
        routed = [_route_seg_unit(cfg, bands[i], probs_t[i], int(y_t[i]), int(y_s_weak[i]))
                  for i in range(len(batch_u))]

    param_nodes = {"w1": dc.leaf(state.student.view("w1")),
                   "w2": dc.leaf(state.student.view("w2")),
                   "wcls": dc.leaf(state.student.view("wcls"))}
    train_x = np.concatenate([weak_l, strong_u]) if use_unlabelled else weak_l
    f_nodes, logit_nodes = forward_graph(param_nodes, state.student_bank,
                                         train_x, PHASE_TRAIN)

    labelled_losses = [ce_loss(logit_nodes[i], int(y_l[i])) for i in range(len(batch_l))]
    pseudo_losses = []
    vc_losses = []
    n_l = len(batch_l)
    for j, (outcome, _pc) in enumerate(routed):
        if outcome is None:
            continue
        kind, payload = outcome
        if kind == "ce":
            pseudo_losses.append(ce_loss(logit_nodes[n_l + j], int(payload)))
        else:
            vc = _vc_unit_loss(state, f_nodes[n_l + j], logit_nodes[n_l + j],
                               param_nodes["wcls"], f_teacher_u[j], payload)
            if vc is not None:
                vc_losses.append(vc)

    loss_l = _mean_loss(labelled_losses)
    total = loss_l
    unl = pseudo_losses + vc_losses
    loss_u = _mean_loss(unl)
    if loss_u is not None:
        total = dc.add(total, dc.scale(loss_u, cfg.thresholds.beta))
    if not np.isfinite(total.value):
        raise TrainAbort(step, "non-finite training loss")

    dc.backward(total)
    grads = _grad_flat(param_nodes, state.student)
    sgd_step(state.student, grads, state.opt, cfg.optimizer.lr,
             cfg.optimizer.weight_decay, cfg.optimizer.momentum)
    ema_update(state.teacher, state.student, cfg.ema.momentum)

    if state.gen is not None:
        _train_generator(state, batch_l, weak_l, f_nodes, routed, f_teacher_u, y_l)

    confusing = sum(1 for _o, pc in routed if pc is not None and pc.is_confusing)
    passing = sum(1 for b in bands if b != "discarded")
    known = [i for i, b in enumerate(bands)
             if b != "discarded" and task.labels[batch_u[i]] >= 0]
    pseudo_acc = (sum(1 for i in known
                      if int(np.argmax(probs_t[i])) == int(task.labels[batch_u[i]]))
                  / len(known)) if known else 0.0
    vc_value = float(np.mean([v.value for v in vc_losses])) if vc_losses else 0.0
    state.iteration += 1
    return StepMetrics(
        iteration=step,
        loss_labelled=float(loss_l.value),
        loss_vc=vc_value,
        confusing_ratio=confusing / passing if passing else 0.0,
        pseudo_accuracy=pseudo_acc,
        contributing_units=len(labelled_losses) + len(unl),
    )


def _train_generator(state, batch_l, weak_l, f_nodes, routed, f_teacher_u, y_l):
    """Fit the attention generator on confidently labelled units."""
    cfg = state.config
    weights = ClassifierWeights(state.student.view("wcls").copy())
    samples = []
    if len(batch_l) >= 2:
        f_t_l, _ = forward_numpy(state.teacher, state.teacher_bank, weak_l, PHASE_LABEL)
        for i in range(len(batch_l)):
            samples.append((f_nodes[i].value, f_t_l[i], int(y_l[i])))
    n_l = len(batch_l)
    for j, (outcome, _pc) in enumerate(routed):
        if outcome is not None and outcome[0] == "ce":
            samples.append((f_nodes[n_l + j].value, f_teacher_u[j], int(outcome[1])))
    for sample in samples[:GEN_SAMPLES_PER_STEP]:
        train_attention_generator_step(state.gen, sample, weights, cfg.gen_lr,
                                       cfg.magnitude)


# detection ----------------------------------------------------------------------

def _predict_scene(params: ModelParams, bank: NormStatsBank, scene, cfg: RunConfig,
                   step: int, update: bool = True):
    """One model's view of a scene: embeddings, probs, deltas, refined boxes."""
    feats = np.stack([u.features for u in scene.units])
    uids = [u.uid for u in scene.units]
    weak = _perturb_batch(feats, uids, "weak", cfg.seed, step)
    emb, logits = forward_numpy(params, bank, weak, PHASE_LABEL, update=update)
    probs = softmax_probs(logits)
    deltas = emb @ params.view("wreg").T
    boxes = []
    for i, unit in enumerate(scene.units):
        cx, cy, w, h = unit.proposal.center_form() + deltas[i]
        boxes.append(BBox.from_center_form(cx, cy, max(w, MIN_BOX_SIDE),
                                           max(h, MIN_BOX_SIDE)))
    return emb, probs, deltas, boxes


def _trusted_predictions(scene, probs, boxes, bg_index, thresholds):
    """Foreground pseudo boxes above the confidence threshold."""
    preds = []
    for i, unit in enumerate(scene.units):
        cls = int(np.argmax(probs[i]))
        conf = float(probs[i, cls])
        if cls == bg_index or conf <= thresholds.t:
            continue
        preds.append(BoxPrediction(bbox=boxes[i], cls=cls, confidence=conf, uid=unit.uid))
    return preds


def train_step_detection(batch_l, batch_u, state: TrainState, task: SceneTask,
                         advance_peer: bool = True) -> StepMetrics:
    """One teacher-student step on the box scene task.

    batch_l and batch_u are sequences of scenes. Pseudo boxes above the
    confidence threshold are compared against the reference prediction set
    (last visit for the temporal policy, the peer model for cross) to build
    potential category sets; box regression on pseudo boxes is gated per axis
    by boundary quality against the matched reference box.
    """
    cfg = state.config
    step = state.iteration
    bg = task.spec.bg_index
    use_unlabelled = cfg.thresholds.beta > 0.0 and len(batch_u) > 0

    confusing = 0
    pc_total = 0
    pseudo_correct = 0
    pseudo_known = 0

    scene_infos = []
    for scene in (batch_u if use_unlabelled else []):
        f_t, probs, deltas_t, boxes_t = _predict_scene(state.teacher, state.teacher_bank,
                                                       scene, cfg, step)
        preds = _trusted_predictions(scene, probs, boxes_t, bg, cfg.thresholds)
        if cfg.policy.policy == "temporal":
            reference_set = state.last_preds.get(scene.scene_id)
            entries = pcset_temporal(preds, reference_set, bg, cfg.policy.iou_threshold)
            state.last_preds[scene.scene_id] = preds
        else:
            reference_set = _peer_predictions(state, scene, cfg, step, bg)
            entries = pcset_crossmodel(preds, reference_set, bg, cfg.policy.iou_threshold)
        nearby = {}
        if reference_set:
            matches, _, _ = match_boxes(preds, reference_set, cfg.policy.iou_threshold)
            nearby = {id(m.box_a): m.box_b for m in matches}
        scene_infos.append((scene, f_t, deltas_t, entries, nearby))
        pc_total += len(entries)
        units_by_uid = {u.uid: u for u in scene.units}
        for p in preds:
            unit = units_by_uid[p.uid]
            if unit.gt_class >= 0:
                pseudo_known += 1
                pseudo_correct += int(p.cls == unit.gt_class)

    # student training forward over every unit of every selected scene
    param_nodes = {name: dc.leaf(state.student.view(name))
                   for name in ("w1", "w2", "wcls", "wreg")}
    blocks = []
    unit_rows = {}
    row = 0
    for scene in batch_l:
        feats = np.stack([u.features for u in scene.units])
        uids = [u.uid for u in scene.units]
        blocks.append(_perturb_batch(feats, uids, "weak", cfg.seed, step))
        for u in scene.units:
            unit_rows[u.uid] = row
            row += 1
    for scene, *_ in scene_infos:
        feats = np.stack([u.features for u in scene.units])
        uids = [u.uid for u in scene.units]
        blocks.append(_perturb_batch(feats, uids, "strong", cfg.seed, step))
        for u in scene.units:
            unit_rows[u.uid] = row
            row += 1
    if not blocks:
        raise EngineError("detection step needs at least one scene")
    train_x = np.concatenate(blocks)
    f_nodes, logit_nodes = forward_graph(param_nodes, state.student_bank,
                                         train_x, PHASE_TRAIN)

    def reg_node(uid):
        return dc.matvec(param_nodes["wreg"], f_nodes[unit_rows[uid]])

    sup_cls, sup_reg = [], []
    for scene in batch_l:
        for unit in scene.units:
            sup_cls.append(ce_loss(logit_nodes[unit_rows[unit.uid]], unit.gt_class))
            if unit.gt_class != bg:
                target = unit.gt_box.center_form() - unit.proposal.center_form()
                sup_reg.append(reg_star_loss(reg_node(unit.uid), target,
                                             QualityFlags(True, True)))
    if not sup_cls:
        raise EngineError("detection step needs at least one labelled scene")

    unl_cls, unl_reg = [], []
    vc_losses = []
    for scene, f_t, deltas_t, entries, nearby in scene_infos:
        units_by_uid = {u.uid: u for u in scene.units}
        uid_order = [u.uid for u in scene.units]
        for box, pc in entries:
            if box.uid is None or box.uid not in units_by_uid:
                continue
            r = unit_rows.get(box.uid)
            if r is None:
                continue
            if not pc.is_confusing:
                unl_cls.append(ce_loss(logit_nodes[r], int(next(iter(pc.classes)))))
            else:
                confusing += 1
                outcome = _confusing_outcome(cfg, box.cls, pc)
                if outcome is None:
                    pass
                elif outcome[0] == "ce":
                    unl_cls.append(ce_loss(logit_nodes[r], int(outcome[1])))
                else:
                    idx = uid_order.index(box.uid)
                    vc = _vc_unit_loss(state, f_nodes[r], logit_nodes[r],
                                       param_nodes["wcls"], f_t[idx], pc)
                    if vc is not None:
                        vc_losses.append(vc)
                        unl_cls.append(vc)
            ref_box = nearby.get(id(box))
            if ref_box is not None:
                flags = boundary_quality(box.bbox, ref_box.bbox, cfg.t_loc)
                if flags.q_hor or flags.q_ver:
                    idx = uid_order.index(box.uid)
                    unl_reg.append(reg_star_loss(reg_node(box.uid), deltas_t[idx], flags))

    loss_l = _mean_loss(sup_cls)
    total = loss_l
    for group, weight in ((sup_reg, 1.0), (unl_cls, cfg.thresholds.beta),
                          (unl_reg, cfg.thresholds.beta)):
        mean = _mean_loss(group)
        if mean is not None:
            total = dc.add(total, dc.scale(mean, weight))
    if not np.isfinite(total.value):
        raise TrainAbort(step, "non-finite training loss")

    dc.backward(total)
    grads = _grad_flat(param_nodes, state.student)
    sgd_step(state.student, grads, state.opt, cfg.optimizer.lr,
             cfg.optimizer.weight_decay, cfg.optimizer.momentum)
    ema_update(state.teacher, state.student, cfg.ema.momentum)

    metrics = StepMetrics(
        iteration=step,
        loss_labelled=float(loss_l.value),
        loss_vc=float(np.mean([v.value for v in vc_losses])) if vc_losses else 0.0,
        confusing_ratio=confusing / pc_total if pc_total else 0.0,
        pseudo_accuracy=pseudo_correct / pseudo_known if pseudo_known else 0.0,
        contributing_units=len(sup_cls) + len(sup_reg) + len(unl_cls) + len(unl_reg),
    )
    state.iteration += 1

    if advance_peer and state.peer is not None:
        _step_peer(state, task)
    return metrics


def _peer_predictions(state, scene, cfg, step, bg):
    peer = state.peer
    if peer is None:
        raise EngineError("cross policy needs a peer model")
    _, probs, _, boxes = _predict_scene(peer.teacher, peer.teacher_bank, scene,
                                        peer.config, step, update=False)
    return _trusted_predictions(scene, probs, boxes, bg, cfg.thresholds)


def _step_peer(state: TrainState, task: SceneTask):
    """Advance the cross-policy peer one step on its own batch order."""
    peer = state.peer
    peer.peer = state
    try:
        batch_l, batch_u = next_detection_batches(peer, task)
        train_step_detection(batch_l, batch_u, peer, task, advance_peer=False)
    finally:
        peer.peer = None


def next_detection_batches(state: TrainState, task: SceneTask):
    cfg = state.config
    n_l = len(task.labelled)
    idx = state.rng.choice(n_l, size=min(cfg.batch_labelled, n_l), replace=False)
    batch_l = [task.labelled[i] for i in np.sort(idx)]
    take = min(cfg.batch_unlabelled, len(task.unlabelled))
    batch_u = []
    while len(batch_u) < take:
        if not state.scene_queue:
            state.scene_queue = list(state.rng.permutation(len(task.unlabelled)))
            state.epoch += 1
        batch_u.append(task.unlabelled[state.scene_queue.pop(0)])
    return batch_l, batch_u


def next_grid_batches(state: TrainState, task: GridTask):
    cfg = state.config
    batch_l = state.rng.choice(task.labelled_ids, size=cfg.batch_labelled, replace=True)
    take = min(cfg.batch_unlabelled, task.unlabelled_ids.shape[0])
    batch_u = state.rng.choice(task.unlabelled_ids, size=take, replace=False) \
        if take else np.array([], dtype=int)
    return batch_l, batch_u


# evaluation ----------------------------------------------------------------------

def predict_grid(state: TrainState, features: np.ndarray) -> np.ndarray:
    """Teacher class predictions with frozen label-phase statistics."""
    _, logits = forward_numpy(state.teacher, state.teacher_bank, features,
                              PHASE_LABEL, update=False)
    return np.argmax(logits, axis=1)


def evaluate_grid(state: TrainState, task: GridTask) -> dict:
    preds = predict_grid(state, task.test_features)
    accuracy = float(np.mean(preds == task.test_labels))
    return {"accuracy": accuracy, "predictions": preds}


def predict_scene_boxes(state: TrainState, scene, bg_index: int):
    """Teacher box predictions on clean features, one per unit."""
    feats = np.stack([u.features for u in scene.units])
    emb, logits = forward_numpy(state.teacher, state.teacher_bank, feats,
                                PHASE_LABEL, update=False)
    probs = softmax_probs(logits)
    deltas = emb @ state.teacher.view("wreg").T
    preds = []
    for i, unit in enumerate(scene.units):
        cls = int(np.argmax(probs[i]))
        cx, cy, w, h = unit.proposal.center_form() + deltas[i]
        bbox = BBox.from_center_form(cx, cy, max(w, MIN_BOX_SIDE), max(h, MIN_BOX_SIDE))
        preds.append(BoxPrediction(bbox=bbox, cls=cls, confidence=float(probs[i, cls]),
                                   uid=unit.uid))
    return preds


def evaluate_scenes(state: TrainState, task: SceneTask) -> dict:
    correct = 0
    total = 0
    for scene in task.test:
        feats = np.stack([u.features for u in scene.units])
        _, logits = forward_numpy(state.teacher, state.teacher_bank, feats,
                                  PHASE_LABEL, update=False)
        preds = np.argmax(logits, axis=1)
        for i, unit in enumerate(scene.units):
            correct += int(preds[i] == unit.gt_class)
            total += 1
    return {"accuracy": correct / total if total else 0.0}
