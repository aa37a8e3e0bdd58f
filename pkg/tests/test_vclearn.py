"""Virtual-slot losses, virtual weight construction, and the attention generator."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import vcforge.diffcore as dc
from vcforge.classifier import ClassifierWeights
from vcforge.vclearn import (
    VIRTUAL_SLOT,
    AttentionGenerator,
    ExtendedLogits,
    PotentialCategorySet,
    VCError,
    VCTarget,
    attention_vc_loss,
    cosine_sim_loss,
    extend_logits,
    make_virtual_weight_attention,
    make_virtual_weight_normalized,
    neg_loss,
    resolve_magnitude,
    train_attention_generator_step,
    vc_ce_loss,
    vc_mse_loss,
)


def small_instance(seed=0, num_classes=5, dim=8):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=dim)
    f_t = rng.normal(size=dim)
    W = ClassifierWeights(rng.normal(size=(num_classes, dim)))
    return f, f_t, W


# potential category sets --------------------------------------------------------

def test_pc_set_rejects_empty_and_negative():
    with pytest.raises(VCError):
        PotentialCategorySet(frozenset())
    with pytest.raises(VCError):
        PotentialCategorySet(frozenset({-1, 2}))


def test_pc_set_confusing_iff_multiple():
    assert not PotentialCategorySet(frozenset({3})).is_confusing
    assert PotentialCategorySet(frozenset({1, 2})).is_confusing


def test_pc_set_validate_range():
    pc = PotentialCategorySet(frozenset({0, 4}))
    pc.validate(5)
    with pytest.raises(VCError):
        pc.validate(4)


def test_vc_target_marks_pc_ignored():
    pc = PotentialCategorySet(frozenset({1, 3}))
    tgt = VCTarget.for_pc(5, pc)
    # extended layout: slot 0 is the virtual category, class c sits at c + 1
    assert tgt.values[VIRTUAL_SLOT] == 1.0
    assert set(tgt.ignored) == {2, 4}


# virtual weight -----------------------------------------------------------------

def test_virtual_weight_norm_equals_magnitude():
    f, f_t, W = small_instance()
    wv = make_virtual_weight_normalized(f_t, W, 2.25)
    np.testing.assert_allclose(np.linalg.norm(wv.vector), 2.25, atol=1e-12)
    # direction preserved
    cos = np.dot(wv.vector, f_t) / (np.linalg.norm(wv.vector) * np.linalg.norm(f_t))
    np.testing.assert_allclose(cos, 1.0, atol=1e-12)


def test_virtual_weight_crafted_values():
    W = ClassifierWeights(np.eye(2) * 5.0)
    wv = make_virtual_weight_normalized(np.array([3.0, 4.0]), W, 3.5)
    np.testing.assert_allclose(wv.vector, [2.1, 2.8], atol=1e-12)


def test_virtual_weight_zero_feature_rejected():
    _, _, W = small_instance()
    with pytest.raises(VCError):
        make_virtual_weight_normalized(np.zeros(8), W)


def test_resolve_magnitude_policies():
    W = ClassifierWeights(np.array([[3.0, 4.0], [0.6, 0.8]]))
    assert resolve_magnitude(W, "min-weight-norm") == pytest.approx(1.0)
    assert resolve_magnitude(W, 7.5) == 7.5
    with pytest.raises(VCError):
        resolve_magnitude(W, -1.0)


# extended logits ----------------------------------------------------------------

def test_extend_logits_layout():
    f, f_t, W = small_instance()
    wv = make_virtual_weight_normalized(f_t, W)
    ext = extend_logits(dc.leaf(f), dc.constant(W.matrix), wv)
    assert ext.vc_index == VIRTUAL_SLOT
    assert ext.node.value.shape == (W.num_classes + 1,)
    np.testing.assert_allclose(ext.node.value[0], np.dot(f, wv.vector), atol=1e-12)
    np.testing.assert_allclose(ext.node.value[1:], W.matrix @ f, atol=1e-12)


def test_extended_logits_requires_virtual_first():
    with pytest.raises(VCError):
        ExtendedLogits(dc.leaf(np.zeros(6)), num_classes=5, vc_index=2)


# deletion oracle ----------------------------------------------------------------

def deleted_ce(ext_values, pc):
    """Plain numpy cross entropy on the logit vector with PC entries removed,
    target = the virtual slot."""
    kept = [0] + [c + 1 for c in range(len(ext_values) - 1) if c not in pc.classes]
    z = ext_values[kept]
    return -np.log(np.exp(z[0]) / np.sum(np.exp(z)))


def test_vc_ce_matches_deletion_oracle():
    for seed in range(20):
        f, f_t, W = small_instance(seed)
        rng = np.random.default_rng(seed + 100)
        pc_size = int(rng.integers(2, 5))
        pc = PotentialCategorySet(frozenset(rng.choice(5, size=pc_size, replace=False).tolist()))
        wv = make_virtual_weight_normalized(f_t, W)
        ext = extend_logits(dc.leaf(f), dc.constant(W.matrix), wv)
        loss = vc_ce_loss(ext, pc)
        assert abs(loss.value - deleted_ce(ext.node.value, pc)) < 1e-10


def test_vc_ce_degenerate_full_cover_is_zero():
    f, f_t, W = small_instance()
    pc = PotentialCategorySet(frozenset(range(5)))
    wv = make_virtual_weight_normalized(f_t, W)
    ext = extend_logits(dc.leaf(f), dc.constant(W.matrix), wv)
    loss = vc_ce_loss(ext, pc)
    assert loss.value == 0.0


def test_vc_ce_focal_gamma_zero_matches_plain():
    f, f_t, W = small_instance(3)
    pc = PotentialCategorySet(frozenset({0, 2}))
    wv = make_virtual_weight_normalized(f_t, W)
    ext = extend_logits(dc.leaf(f), dc.constant(W.matrix), wv)
    plain = vc_ce_loss(ext, pc)
    ext2 = extend_logits(dc.leaf(f), dc.constant(W.matrix), wv)
    focal0 = vc_ce_loss(ext2, pc, focal_gamma=0.0)
    np.testing.assert_allclose(plain.value, focal0.value, atol=1e-12)


def test_vc_ce_focal_downweights():
    f, f_t, W = small_instance(4)
    pc = PotentialCategorySet(frozenset({1, 3}))
    wv = make_virtual_weight_normalized(f_t, W)
    ext = extend_logits(dc.leaf(f), dc.constant(W.matrix), wv)
    plain = vc_ce_loss(ext, pc).value
    ext2 = extend_logits(dc.leaf(f), dc.constant(W.matrix), wv)
    focal = vc_ce_loss(ext2, pc, focal_gamma=2.0).value
    assert 0.0 <= focal <= plain


# exact-zero gradients for removed classes ---------------------------------------

@pytest.mark.parametrize("form", ["ce", "mse"])
def test_pc_class_gradients_exactly_zero(form):
    for seed in range(50):
        f, f_t, W = small_instance(seed)
        rng = np.random.default_rng(seed + 999)
        pc = PotentialCategorySet(frozenset(rng.choice(5, size=2, replace=False).tolist()))
        w_node = dc.leaf(W.matrix)
        wv = make_virtual_weight_normalized(f_t, W)
        ext = extend_logits(dc.leaf(f), w_node, wv)
        loss = vc_ce_loss(ext, pc) if form == "ce" else vc_mse_loss(ext, pc)
        dc.backward(loss)
        for c in pc.classes:
            assert np.all(w_node.grad[c] == 0.0), "removed class received gradient"
        live = [c for c in range(5) if c not in pc.classes]
        assert np.any(w_node.grad[live] != 0.0)


# other loss forms ---------------------------------------------------------------

def test_vc_mse_value():
    f, f_t, W = small_instance(5)
    pc = PotentialCategorySet(frozenset({0, 1}))
    wv = make_virtual_weight_normalized(f_t, W)
    ext = extend_logits(dc.leaf(f), dc.constant(W.matrix), wv)
    loss = vc_mse_loss(ext, pc)
    ext_v = ext.node.value
    kept = [0] + [c + 1 for c in range(5) if c not in pc.classes]
    sig = 1 / (1 + np.exp(-ext_v[kept]))
    target = np.zeros(len(kept)); target[0] = 1.0
    np.testing.assert_allclose(loss.value, np.sum((sig - target) ** 2), atol=1e-12)


def test_neg_loss_value_and_full_cover_error():
    f, _, W = small_instance(6)
    logits = dc.leaf(W.matrix @ f)
    pc = PotentialCategorySet(frozenset({0, 3}))
    loss = neg_loss(logits, pc)
    sig = 1 / (1 + np.exp(-(W.matrix @ f)))
    keep = [c for c in range(5) if c not in pc.classes]
    np.testing.assert_allclose(loss.value, np.sum(sig[keep] ** 2), atol=1e-12)
    with pytest.raises(VCError):
        neg_loss(dc.leaf(W.matrix @ f), PotentialCategorySet(frozenset(range(5))))


def test_cosine_loss_components():
    f, f_t, W = small_instance(7)
    pc = PotentialCategorySet(frozenset({2}))
    wv = make_virtual_weight_normalized(f_t, W)
    loss = cosine_sim_loss(dc.leaf(f), wv, dc.constant(W.matrix), pc)
    cos_v = np.dot(f, wv.vector) / (np.linalg.norm(f) * np.linalg.norm(wv.vector))
    cos_w = W.matrix @ f / (np.linalg.norm(W.matrix, axis=1) * np.linalg.norm(f))
    expected = (1 - cos_v) + sum(max(c, 0.0) for i, c in enumerate(cos_w) if i != 2)
    np.testing.assert_allclose(loss.value, expected, atol=1e-10)


def test_cosine_loss_zero_feature_rejected():
    _, f_t, W = small_instance(8)
    wv = make_virtual_weight_normalized(f_t, W)
    with pytest.raises(VCError):
        cosine_sim_loss(dc.leaf(np.zeros(8)), wv, dc.constant(W.matrix), PotentialCategorySet(frozenset({0})))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_property_vc_ce_nonnegative(seed):
    f, f_t, W = small_instance(seed)
    rng = np.random.default_rng(seed)
    size = int(rng.integers(1, 5))
    pc = PotentialCategorySet(frozenset(rng.choice(5, size=size, replace=False).tolist()))
    wv = make_virtual_weight_normalized(f_t, W)
    ext = extend_logits(dc.leaf(f), dc.constant(W.matrix), wv)
    assert vc_ce_loss(ext, pc).value >= 0.0


# attention generator ------------------------------------------------------------

def test_attention_generator_shapes_and_magnitude():
    _, f_t, W = small_instance(9)
    gen = AttentionGenerator.initialize(8, seed=0)
    wv = make_virtual_weight_attention(gen, f_t, W, 3.0)
    assert wv.vector.shape == (8,)
    np.testing.assert_allclose(np.linalg.norm(wv.vector), 3.0, atol=1e-10)


def test_attention_generator_training_reduces_loss():
    rng = np.random.default_rng(11)
    W = ClassifierWeights(rng.normal(size=(5, 8)))
    gen = AttentionGenerator.initialize(8, seed=1)
    f = rng.normal(size=8)
    losses = []
    for _ in range(40):
        gen, loss = train_attention_generator_step(gen, (f, f, 2), W, lr=0.05)
        losses.append(loss)
    assert losses[-1] < losses[0]


def test_attention_vc_loss_matches_training_objective():
    rng = np.random.default_rng(12)
    W = ClassifierWeights(rng.normal(size=(5, 8)))
    gen = AttentionGenerator.initialize(8, seed=2)
    f = rng.normal(size=8)
    params = {name: dc.leaf(mat) for name, mat in gen.param_items()}
    node = attention_vc_loss(params, f, f, 1, W)
    assert np.isfinite(node.value) and node.value >= 0.0
    dc.backward(node)
    assert all(params[n].grad is not None for n in ("wq", "wk", "wv", "wo"))
