"""Virtual-category learning: virtual weights, extended logits, and VC losses.

A confusing sample is one whose potential-category set holds more than one
class. Instead of discarding it or trusting a possibly wrong pseudo label, we
append one extra logit l_v = f . w_v to the classifier output and train the
sample toward that virtual slot while removing every potential category from
the normalization. The virtual weight w_v is built from the teacher feature
(or an attention generator) and is held constant during the student's
backward pass; the gradient path into the student feature f through l_v
stays live.

Extended logit vectors store the virtual slot first: [l_v, l_0, ..., l_{K-1}].
The slot position is carried explicitly so nothing downstream depends on the
ordering convention.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .classifier import ClassifierWeights, selection_matrix, logsumexp
from .diffcore import Node


class VCError(ValueError):
    pass


@dataclass(frozen=True)
class PotentialCategorySet:
    """Classes a sample might plausibly belong to, per the discovery policy."""

    classes: frozenset
    source_policy: str = "unspecified"

    def __post_init__(self):
        object.__setattr__(self, "classes", frozenset(int(c) for c in self.classes))
        if not self.classes:
            raise VCError("potential category set may not be empty")
        if any(c < 0 for c in self.classes):
            raise VCError("potential category indices must be non-negative")

    @property
    def is_confusing(self) -> bool:
        return len(self.classes) > 1

    def validate(self, num_classes: int) -> None:
        for c in self.classes:
            if c >= num_classes:
                raise VCError(f"potential category {c} out of range for {num_classes} classes")


@dataclass
class VirtualWeight:
    """Per-sample classifier direction for the virtual slot."""

    vector: np.ndarray
    magnitude: float
    origin: str = "normalized-teacher-feature"

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise VCError("virtual weight must be a vector")
        if self.magnitude <= 0.0:
            raise VCError("virtual weight magnitude must be positive")


@dataclass
class VCTarget:
    """Extended target: 1 at the virtual slot, 0 elsewhere, ignored inside the PC set."""

    values: np.ndarray
    ignored: frozenset

    @classmethod
    def for_pc(cls, num_classes: int, pc: PotentialCategorySet) -> "VCTarget":
        pc.validate(num_classes)
        values = np.zeros(num_classes + 1)
        values[VIRTUAL_SLOT] = 1.0
        ignored = frozenset(_extended_position(c) for c in pc.classes)
        return cls(values=values, ignored=ignored)


@dataclass
class ExtendedLogits:
    """Class logits plus the virtual slot, with the slot position made explicit."""

    node: Node
    num_classes: int
    vc_index: int = 0

    def __post_init__(self):
        if self.node.shape != (self.num_classes + 1,):
            raise VCError(
                f"extended logits must have length {self.num_classes + 1}, got {self.node.shape}")
        if self.vc_index != VIRTUAL_SLOT:
            raise VCError("the virtual slot is stored first")


VIRTUAL_SLOT = 0


def _extended_position(class_index: int) -> int:
    return class_index + 1


def resolve_magnitude(weights: ClassifierWeights, magnitude_policy) -> float:
    """Magnitude for the virtual weight: the smallest class-weight norm, or a constant."""
    if magnitude_policy == "min-weight-norm":
        return weights.min_norm()
    mag = float(magnitude_policy)
    if mag <= 0.0:
        raise VCError("constant magnitude must be positive")
    return mag


def make_virtual_weight_normalized(f_teacher, weights: ClassifierWeights,
                                   magnitude_policy="min-weight-norm") -> VirtualWeight:
    """w_v = f_t / ||f_t|| scaled to the policy magnitude."""
    f_teacher = np.asarray(f_teacher, dtype=np.float64)
    norm = float(np.linalg.norm(f_teacher))
    if norm == 0.0:
        raise VCError("cannot normalize a zero teacher feature")
    mag = resolve_magnitude(weights, magnitude_policy)
    return VirtualWeight(vector=f_teacher / norm * mag, magnitude=mag,
                         origin="normalized-teacher-feature")


@dataclass
class AttentionGenerator:
    """Single-head self-attention over the tokens [f, w_0, ..., w_{K-1}].

    There is no positional encoding, so the output at the feature-token
    position is invariant to any permutation of the weight tokens. Only the
    four projection matrices are trainable.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    def __post_init__(self):
        for name in ("wq", "wk", "wv", "wo"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise VCError(f"{name} must be a square matrix")
            setattr(self, name, m)
        if len({m.shape for m in (self.wq, self.wk, self.wv, self.wo)}) != 1:
            raise VCError("all projection matrices must share one width")

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def initialize(cls, width: int, seed: int = 0) -> "AttentionGenerator":
        rng = np.random.default_rng(seed)
        std = 1.0 / np.sqrt(width)
        return cls(*(rng.normal(0.0, std, size=(width, width)) for _ in range(4)))

    def param_items(self):
        return (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo))


def _attention_raw_node(wq: Node, wk: Node, wv: Node, wo: Node, tokens: np.ndarray) -> Node:
    """Output of the attention block at the feature-token position (row 0)."""
    t = dc.constant(tokens)
    q0 = dc.matvec(wq, dc.constant(tokens[0]))
    keys = dc.matmul(t, dc.transpose(wk))
    values = dc.matmul(t, dc.transpose(wv))
    scores = dc.scale(dc.matvec(keys, q0), 1.0 / np.sqrt(tokens.shape[1]))
    m = float(scores.value.max())
    e = dc.exp(dc.sub(scores, dc.constant(m)))
    inv_total = dc.exp(dc.scale(dc.log(dc.vsum(e)), -1.0))
    attn = dc.mul(e, inv_total)
    context = dc.matvec(dc.transpose(values), attn)
    return dc.matvec(wo, context)


def _rescale_node(raw: Node, magnitude: float) -> Node:
    inv_norm = dc.exp(dc.scale(dc.log(dc.norm2(raw)), -1.0))
    return dc.scale(dc.mul(raw, inv_norm), magnitude)


def attention_tokens(f_token, weights: ClassifierWeights) -> np.ndarray:
    f_token = np.asarray(f_token, dtype=np.float64)
    if f_token.shape != (weights.feature_dim,):
        raise VCError("feature token width must match the classifier weights")
    return np.vstack([f_token[None, :], weights.matrix])


def make_virtual_weight_attention(gen: AttentionGenerator, f_token,
                                  weights: ClassifierWeights,
                                  magnitude_policy="min-weight-norm") -> VirtualWeight:
    """Generate w_v with the attention block, rescaled to the policy magnitude."""
    tokens = attention_tokens(f_token, weights)
    raw = _attention_raw_node(dc.constant(gen.wq), dc.constant(gen.wk),
                              dc.constant(gen.wv), dc.constant(gen.wo), tokens)
    norm = float(np.linalg.norm(raw.value))
    if norm == 0.0:
        raise VCError("attention generator produced a zero vector")
    mag = resolve_magnitude(weights, magnitude_policy)
    return VirtualWeight(vector=raw.value / norm * mag, magnitude=mag,
                         origin="attention-generator")


def attention_vc_loss(params: dict, f_student, f_teacher, label: int,
                      weights: ClassifierWeights,
                      magnitude_policy="min-weight-norm") -> Node:
    """Generator objective on one confident sample, as a differentiable node.

    params maps the four projection names to nodes (leaves when training the
    generator). The classifier and both features enter as constants; the
    potential category set is the singleton {label}.
    """
    f_student = np.asarray(f_student, dtype=np.float64)
    tokens = attention_tokens(f_teacher, weights)
    raw = _attention_raw_node(params["wq"], params["wk"], params["wv"], params["wo"], tokens)
    mag = resolve_magnitude(weights, magnitude_policy)
    wv_node = _rescale_node(raw, mag)
    l_v = dc.dot(dc.constant(f_student), wv_node)
    class_logits = dc.constant(weights.matrix @ f_student)
    ext = ExtendedLogits(dc.concat([l_v, class_logits]), weights.num_classes)
    return vc_ce_loss(ext, PotentialCategorySet(frozenset([int(label)]), "confident"))


def train_attention_generator_step(gen: AttentionGenerator, confident_sample,
                                   weights: ClassifierWeights, lr: float,
                                   magnitude_policy="min-weight-norm"):
    """One descent step of the generator on a confidently labelled sample.

    confident_sample is (f_student, f_teacher, label). Only the four
    projection matrices move.
    """
    f_student, f_teacher, label = confident_sample
    params = {name: dc.leaf(value) for name, value in gen.param_items()}
    loss = attention_vc_loss(params, f_student, f_teacher, label, weights,
                             magnitude_policy)
    dc.backward(loss)
    for name, node in params.items():
        setattr(gen, name, getattr(gen, name) - lr * node.grad)
    return gen, float(loss.value)


def extend_logits(f, weights, wv: VirtualWeight) -> ExtendedLogits:
    """[l_v, l_0, ..., l_{K-1}] with the virtual weight entering as a constant."""
    f_node = f if isinstance(f, Node) else dc.constant(np.asarray(f, dtype=np.float64))
    if isinstance(weights, ClassifierWeights):
        k = weights.num_classes
        w_node = dc.constant(weights.matrix)
    elif isinstance(weights, Node):
        k = weights.shape[0]
        w_node = weights
    else:
        mat = np.asarray(weights, dtype=np.float64)
        k = mat.shape[0]
        w_node = dc.constant(mat)
    l_v = dc.dot(f_node, dc.constant(wv.vector))
    class_logits = dc.matvec(w_node, f_node)
    return ExtendedLogits(dc.concat([l_v, class_logits]), k)


def _surviving_positions(ext: ExtendedLogits, pc: PotentialCategorySet) -> list[int]:
    pc.validate(ext.num_classes)
    removed = {_extended_position(c) for c in pc.classes}
    return [i for i in range(ext.num_classes + 1) if i not in removed]


def vc_ce_loss(ext: ExtendedLogits, pc: PotentialCategorySet,
               focal_gamma: float | None = None) -> Node:
    """log sum over surviving slots of exp(l_i - l_v).

    Equivalently the negative log masked-softmax probability of the virtual
    slot. Potential categories are removed from the computation entirely, so
    their logits receive exactly zero gradient. When the PC set covers every
    class only the virtual slot survives and the loss is identically zero.
    Setting focal_gamma multiplies by (1 - p_v)^gamma with p_v the surviving
    softmax probability of the virtual slot.
    """
    kept = _surviving_positions(ext, pc)
    if len(kept) == 1:
        return dc.constant(0.0)
    n = ext.num_classes + 1
    sel = selection_matrix(kept, n)
    picked = dc.matvec(dc.constant(sel), ext.node)

    m = float(picked.value.max())
    e = dc.exp(dc.sub(picked, dc.constant(m)))
    total = dc.vsum(e)
    lse = dc.add(dc.log(total), dc.constant(m))

    onehot_v = np.zeros(n)
    onehot_v[ext.vc_index] = 1.0
    l_v = dc.dot(ext.node, dc.constant(onehot_v))
    plain = dc.sub(lse, l_v)
    if focal_gamma is None or focal_gamma == 0.0:
        return plain
    if focal_gamma < 0.0:
        raise VCError("focal_gamma must be non-negative")

    # (1 - p_v) computed as the off-slot share of the surviving mass, which
    # avoids cancellation when p_v is close to 1
    v_row = kept.index(ext.vc_index)
    others = [i for i in range(len(kept)) if i != v_row]
    e_others = dc.matvec(dc.constant(selection_matrix(others, len(kept))), e)
    off_share = dc.mul(dc.vsum(e_others), dc.exp(dc.scale(dc.log(total), -1.0)))
    factor = dc.exp(dc.scale(dc.log(off_share), float(focal_gamma)))
    return dc.mul(factor, plain)


def vc_mse_loss(ext: ExtendedLogits, pc: PotentialCategorySet) -> Node:
    """Sum over surviving slots of (sigmoid(l_i) - t_i)^2 with t = 1 only at the virtual slot."""
    kept = _surviving_positions(ext, pc)
    n = ext.num_classes + 1
    sel = selection_matrix(kept, n)
    picked = dc.matvec(dc.constant(sel), ext.node)
    targets = np.zeros(len(kept))
    targets[kept.index(ext.vc_index)] = 1.0
    diff = dc.sub(dc.sigmoid(picked), dc.constant(targets))
    return dc.vsum(dc.mul(diff, diff))


def neg_loss(logits: Node, pc: PotentialCategorySet) -> Node:
    """Negatives-only objective on plain class logits: sum of sigmoid(l_i)^2 off the PC set."""
    k = logits.shape[0]
    pc.validate(k)
    kept = [i for i in range(k) if i not in pc.classes]
    if not kept:
        raise VCError("neg_loss needs at least one class outside the potential category set")
    picked = dc.matvec(dc.constant(selection_matrix(kept, k)), logits)
    s = dc.sigmoid(picked)
    return dc.vsum(dc.mul(s, s))


def cosine_sim_loss(f: Node, wv: VirtualWeight, weights, pc: PotentialCategorySet) -> Node:
    """(1 - cos(f, w_v)) plus hinged cosine similarity to the surviving class weights."""
    if isinstance(weights, ClassifierWeights):
        k = weights.num_classes
        w_node = dc.constant(weights.matrix)
    else:
        w_node = weights
        k = w_node.shape[0]
    pc.validate(k)
    if float(np.linalg.norm(f.value)) == 0.0:
        raise VCError("cosine similarity undefined for a zero feature")

    norm_f = dc.norm2(f)
    wv_norm = float(np.linalg.norm(wv.vector))
    cos_v = dc.mul(dc.dot(f, dc.constant(wv.vector)),
                   _inv(dc.scale(norm_f, wv_norm)))
    total = dc.sub(dc.constant(1.0), cos_v)
    for i in range(k):
        if i in pc.classes:
            continue
        w_i = dc.row(w_node, i)
        cos_i = dc.mul(dc.dot(f, w_i), _inv(dc.mul(norm_f, dc.norm2(w_i))))
        total = dc.add(total, dc.relu(cos_i))
    return total


def _inv(x: Node) -> Node:
    return dc.exp(dc.scale(dc.log(x), -1.0))
