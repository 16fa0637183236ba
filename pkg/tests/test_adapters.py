import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmadapter import errors
from mmadapter.adapters import (
    ClipAdapter,
    IdentityClip,
    Linear,
    MMAConfig,
    MaskedMultiHeadAttention,
    MultiModalAdapter,
    blend_and_logits,
    build_adapter,
    build_input_sequence,
    load_checkpoint,
    make_mask,
    parameter_count,
    parameter_names,
    save_checkpoint,
)
from mmadapter.tensor import MASK_NEG_INF, Tensor, backward, split
from oracles import (
    central_difference,
    mask_allowed_by_cases,
    masked_attention_rows,
    relative_error,
    sample_coords,
)

TOY = MMAConfig(emb_dim=16, down_factor=4, mid_factor=16, heads=1)
# Gradient checks run at a moderate temperature and a bottleneck width
# of at least 4: central differences at h=1e-5 lose digits both to the
# cubed logit scale and to l2-normalization of near-zero adapted rows,
# which a single-unit bottleneck produces readily at init.
GRAD_CFG = MMAConfig(emb_dim=32, down_factor=4, mid_factor=8, heads=2, logit_scale=10.0)


def unit_rows(rng, shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def grad_check_model(model, text, images, labels, n_coords=120, tol=1e-4):
    from mmadapter.tensor import cross_entropy

    params = model.parameters()

    def loss_value():
        return float(cross_entropy(model.logits(text, images), labels).data)

    loss = cross_entropy(model.logits(text, images), labels)
    backward(loss)
    arrays = [p.tensor.data for p in params]
    coords = sample_coords(arrays, n_coords, np.random.default_rng(99))
    numeric = central_difference(loss_value, arrays, coords)
    worst = 0.0
    for (ai, fi), num in numeric.items():
        ana = params[ai].tensor.grad.flat[fi]
        err = relative_error(ana, num)
        worst = max(worst, err)
        assert err <= tol, f"{params[ai].name}[{fi}]: analytic {ana} vs numeric {num} (rel {err:.2e})"
    return worst


# ---------------------------------------------------------------------------
# mask


def test_mask_single_prompt_single_image():
    m = make_mask(1, 1).matrix
    np.testing.assert_array_equal(m, [[MASK_NEG_INF, 0.0], [0.0, MASK_NEG_INF]])


def test_mask_two_prompts_one_image():
    m = make_mask(2, 1).matrix
    open_positions = {(0, 2), (1, 2), (2, 0), (2, 1)}
    for i in range(3):
        for j in range(3):
            expected = 0.0 if (i, j) in open_positions else MASK_NEG_INF
            assert m[i, j] == expected, (i, j)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6))
def test_mask_matches_case_enumeration_and_open_count(p, i):
    mask = make_mask(p, i)
    allowed = mask.matrix == 0.0
    np.testing.assert_array_equal(allowed, mask_allowed_by_cases(p, i))
    assert allowed.sum() == 2 * p * i
    # symmetric as a set of allowed positions
    np.testing.assert_array_equal(allowed, allowed.T)


def test_mask_rejects_empty_sides():
    with pytest.raises(errors.ConfigError):
        make_mask(0, 1)


# ---------------------------------------------------------------------------
# input sequence


def test_sequence_direct_construction():
    text = np.array([[1.0, 0.0], [0.0, 1.0]])
    img = np.array([[0.5, 0.5]])
    seq = build_input_sequence(text, img).data
    assert seq.shape == (3, 1, 2)
    np.testing.assert_array_equal(seq[0, 0], text[0])
    np.testing.assert_array_equal(seq[1, 0], text[1])
    np.testing.assert_array_equal(seq[2, 0], img[0])


def test_sequence_broadcasts_text_across_batch():
    rng = np.random.default_rng(0)
    text, images = rng.standard_normal((3, 8)), rng.standard_normal((4, 8))
    seq = build_input_sequence(text, images).data
    assert seq.shape == (4, 4, 8)
    for b in range(4):
        np.testing.assert_array_equal(seq[:3, b], text)
        np.testing.assert_array_equal(seq[3, b], images[b])


def test_sequence_round_trips_through_split():
    rng = np.random.default_rng(1)
    text, images = rng.standard_normal((5, 6)), rng.standard_normal((3, 6))
    seq = build_input_sequence(text, images)
    text_rows, image_row = split(seq, [5, 1], axis=0)
    for b in range(3):
        np.testing.assert_array_equal(text_rows.data[:, b, :], text)
    np.testing.assert_array_equal(image_row.data[0], images)


def test_sequence_dim_mismatch():
    with pytest.raises(errors.ShapeError):
        build_input_sequence(np.zeros((2, 4)), np.zeros((1, 5)))


# ---------------------------------------------------------------------------
# masked attention


def test_attention_routing_is_forced_by_mask():
    rng = np.random.default_rng(2)
    attn = MaskedMultiHeadAttention(8, 2, rng, "t")
    x = Tensor(rng.standard_normal((2, 3, 8)))  # P=1, I=1, batch of 3
    probs = attn.attention_probs(x, make_mask(1, 1))
    np.testing.assert_array_equal(probs[:, :, 0, :], np.broadcast_to([0.0, 1.0], probs[:, :, 0, :].shape))
    np.testing.assert_array_equal(probs[:, :, 1, :], np.broadcast_to([1.0, 0.0], probs[:, :, 1, :].shape))


def test_attention_image_row_matches_hand_oracle():
    # single head, width 2, identity projections: attention reduces to
    # softmax(q . k / sqrt(2)) over the permitted value rows
    rng = np.random.default_rng(3)
    attn = MaskedMultiHeadAttention(2, 1, rng, "t")
    for lin in (attn.q, attn.k, attn.v, attn.out):
        lin.weight.tensor.data = np.eye(2)
        lin.bias.tensor.data = np.zeros(2)
    rows = np.array([[0.3, -0.7], [1.1, 0.4], [-0.2, 0.9]])  # t0, t1, img
    x = Tensor(rows.reshape(3, 1, 2))
    out = attn(x, make_mask(2, 1)).data[:, 0, :]
    expected = masked_attention_rows(rows, rows, rows, mask_allowed_by_cases(2, 1))
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_attention_is_independent_per_batch_element():
    rng = np.random.default_rng(4)
    attn = MaskedMultiHeadAttention(4, 2, rng, "t")
    mask = make_mask(2, 1)
    xs = rng.standard_normal((2, 3, 1, 4))
    together = attn(Tensor(np.concatenate(xs, axis=1)), mask).data
    alone = [attn(Tensor(x), mask).data for x in xs]
    np.testing.assert_allclose(together[:, 0, :], alone[0][:, 0, :], atol=1e-12)
    np.testing.assert_allclose(together[:, 1, :], alone[1][:, 0, :], atol=1e-12)


def test_attention_projection_gradients():
    rng = np.random.default_rng(5)
    attn = MaskedMultiHeadAttention(4, 2, rng, "t")
    x = rng.standard_normal((3, 2, 4))
    w = rng.standard_normal((3, 2, 4))
    params = attn.parameters()

    def build():
        return (attn(Tensor(x), make_mask(2, 1)) * Tensor(w)).sum()

    loss = build()
    backward(loss)
    arrays = [p.tensor.data for p in params]
    coords = sample_coords(arrays, 60, np.random.default_rng(6))
    numeric = central_difference(lambda: float(build().data), arrays, coords)
    for (ai, fi), num in numeric.items():
        assert relative_error(params[ai].tensor.grad.flat[fi], num) <= 1e-4


# ---------------------------------------------------------------------------
# multi-modal adapter forward


def test_zeroed_output_layer_gives_zero_adaptation():
    model = MultiModalAdapter(TOY, seed=0)
    model.up2.weight.tensor.data[:] = 0.0
    model.up2.bias.tensor.data[:] = 0.0
    rng = np.random.default_rng(7)
    at, ai = model.forward_adapted(unit_rows(rng, (3, 16)), unit_rows(rng, (2, 16)))
    assert np.all(at.data == 0.0) and np.all(ai.data == 0.0)


def test_adapted_output_shapes():
    model = MultiModalAdapter(TOY, seed=1)
    rng = np.random.default_rng(8)
    for p, b in [(1, 1), (4, 2), (7, 5)]:
        at, ai = model.forward_adapted(unit_rows(rng, (p, 16)), unit_rows(rng, (b, 16)))
        assert at.shape == (p, b, 16) and ai.shape == (b, 16)


def test_mma_full_forward_gradients():
    rng = np.random.default_rng(9)
    model = MultiModalAdapter(GRAD_CFG, seed=2)
    text, images = unit_rows(rng, (3, 32)), unit_rows(rng, (4, 32))
    grad_check_model(model, text, images, np.array([0, 2, 1, 0]))


def test_mma_variant_forwards_and_gradients():
    rng = np.random.default_rng(10)
    text, images = unit_rows(rng, (2, 32)), unit_rows(rng, (3, 32))
    labels = np.array([0, 1, 1])
    for attention in ("mha", "transformer_block"):
        for updown in ("linear", "mlp"):
            cfg = MMAConfig(
                emb_dim=32, down_factor=4, mid_factor=8, heads=2, logit_scale=10.0,
                variant_attention=attention, variant_updown=updown,
            )
            model = MultiModalAdapter(cfg, seed=3)
            assert model.logits(text, images).shape == (3, 2)
            grad_check_model(model, text, images, labels, n_coords=40)


def test_class_permutation_permutes_logit_columns():
    rng = np.random.default_rng(11)
    model = MultiModalAdapter(TOY, seed=4)
    text, images = unit_rows(rng, (5, 16)), unit_rows(rng, (3, 16))
    perm = np.array([3, 0, 4, 1, 2])
    base = model.logits(text, images).data
    permuted = model.logits(text[perm], images).data
    np.testing.assert_allclose(permuted, base[:, perm], atol=1e-10)


# ---------------------------------------------------------------------------
# blend and logits


def test_lambda_one_reproduces_zero_shot_exactly():
    rng = np.random.default_rng(12)
    cfg = MMAConfig(emb_dim=16, down_factor=4, mid_factor=16, heads=2, lambda_blend=1.0)
    model = MultiModalAdapter(cfg, seed=5)
    text, images = unit_rows(rng, (4, 16)), unit_rows(rng, (6, 16))
    zero_shot = IdentityClip(cfg).logits(text, images).data
    np.testing.assert_array_equal(model.logits(text, images).data, zero_shot)


def test_lambda_zero_with_adapted_copies_collapses_to_zero_shot():
    rng = np.random.default_rng(13)
    cfg = MMAConfig(emb_dim=8, down_factor=4, mid_factor=8, heads=1, lambda_blend=0.0)
    text, images = unit_rows(rng, (3, 8)), unit_rows(rng, (2, 8))
    adapted_text = Tensor(np.broadcast_to(text[:, None, :], (3, 2, 8)).copy())
    logits = blend_and_logits(text, images, adapted_text, Tensor(images.copy()), cfg)
    zero_shot = blend_and_logits(text, images, None, None, cfg)
    np.testing.assert_allclose(logits.data, zero_shot.data, atol=1e-12)


def test_hand_cosine_logits():
    cfg = MMAConfig(emb_dim=2, down_factor=1, mid_factor=1, heads=1, lambda_blend=1.0, logit_scale=1.0)
    text = np.array([[1.0, 0.0], [0.0, 1.0]])
    image = np.array([[1.0, 0.0]])
    logits = blend_and_logits(text, image, None, None, cfg).data
    np.testing.assert_allclose(logits, [[1.0, 0.0]], atol=1e-15)


def test_adapt_text_off_keeps_original_prompts():
    rng = np.random.default_rng(14)
    cfg_on = MMAConfig(emb_dim=16, down_factor=4, mid_factor=16, heads=2, adapt_text=True)
    cfg_off = MMAConfig(emb_dim=16, down_factor=4, mid_factor=16, heads=2, adapt_text=False)
    text, images = unit_rows(rng, (3, 16)), unit_rows(rng, (2, 16))
    on, off = MultiModalAdapter(cfg_on, seed=6), MultiModalAdapter(cfg_off, seed=6)
    # same parameters, so the adapted tensors agree; only the blend differs
    assert not np.array_equal(on.logits(text, images).data, off.logits(text, images).data)
    # with text adaptation off, scaling adapted text has no effect on logits
    off2 = MultiModalAdapter(cfg_off, seed=6)
    adapted_text, adapted_image = off2.forward_adapted(text, images)
    direct = blend_and_logits(text, images, adapted_text, adapted_image, cfg_off)
    np.testing.assert_array_equal(direct.data, off.logits(text, images).data)


def test_lambda_out_of_range_rejected():
    with pytest.raises(errors.ConfigError):
        MMAConfig(lambda_blend=1.5).validate()
    with pytest.raises(errors.ConfigError):
        MMAConfig(lambda_text=-0.1).validate()


# ---------------------------------------------------------------------------
# clip-adapter baseline


def test_clip_adapter_lambda_one_is_zero_shot():
    rng = np.random.default_rng(15)
    cfg = MMAConfig(emb_dim=32, down_factor=4, mid_factor=16, heads=2, lambda_blend=1.0)
    model = ClipAdapter(cfg, seed=0)
    text, images = unit_rows(rng, (4, 32)), unit_rows(rng, (3, 32))
    np.testing.assert_array_equal(
        model.logits(text, images).data, IdentityClip(cfg).logits(text, images).data
    )


def test_clip_adapter_zero_weights_hit_normalization_guard():
    rng = np.random.default_rng(16)
    model = ClipAdapter(TOY, seed=8)
    for lin in (model.text_up, model.image_up):
        lin.weight.tensor.data[:] = 0.0
        lin.bias.tensor.data[:] = 0.0
    with pytest.raises(errors.NormalizationError):
        model.logits(unit_rows(rng, (2, 16)), unit_rows(rng, (2, 16)))


def test_clip_adapter_gradients():
    rng = np.random.default_rng(17)
    model = ClipAdapter(GRAD_CFG, seed=9)
    grad_check_model(model, unit_rows(rng, (3, 32)), unit_rows(rng, (4, 32)), np.array([1, 0, 2, 2]))


# ---------------------------------------------------------------------------
# parameter accounting and checkpoints


def test_identity_has_no_parameters():
    assert parameter_count(IdentityClip(MMAConfig())) == 0


def test_toy_mma_parameter_count_matches_enumeration():
    # C=16, down 4, mid 16, 1 head, biases everywhere:
    # down 16*4+4=68, q/k/v/out 4*(4*4+4)=80, up1 4*1+1=5, up2 1*16+16=32
    model = MultiModalAdapter(TOY, seed=10)
    assert parameter_count(model) == 68 + 80 + 5 + 32 == 185


def test_default_mma_parameter_count_closed_form():
    model = MultiModalAdapter(MMAConfig(), seed=11)
    c, d, m = 512, 128, 32
    expected = (c * d + d) + 4 * (d * d + d) + (d * m + m) + (m * c + c)
    assert parameter_count(model) == expected == 152736


def test_parameter_count_equals_flattened_vector_length():
    rng = np.random.default_rng(18)
    for kind in ("identity_clip", "clip_adapter", "mma"):
        model = build_adapter(kind, TOY, seed=12)
        flat = np.concatenate([p.tensor.data.ravel() for p in model.parameters()] or [np.array([])])
        assert parameter_count(model) == flat.size


def test_parameter_names_are_unique():
    for kind in ("clip_adapter", "mma"):
        names = parameter_names(build_adapter(kind, TOY, seed=13))
        assert len(names) == len(set(names))


def test_same_seed_same_init_different_seed_different_init():
    a = MultiModalAdapter(TOY, seed=14)
    b = MultiModalAdapter(TOY, seed=14)
    c = MultiModalAdapter(TOY, seed=15)
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.tensor.data, pb.tensor.data)
    assert any(
        not np.array_equal(pa.tensor.data, pc.tensor.data)
        for pa, pc in zip(a.parameters(), c.parameters())
    )


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    model = MultiModalAdapter(TOY, seed=16)
    first = tmp_path / "ckpt1"
    second = tmp_path / "ckpt2"
    save_checkpoint(model, first)
    reloaded = load_checkpoint(first)
    save_checkpoint(reloaded, second)
    assert (first / "manifest.json").read_bytes() == (second / "manifest.json").read_bytes()
    assert (first / "params.f64").read_bytes() == (second / "params.f64").read_bytes()
    for p, q in zip(model.parameters(), reloaded.parameters()):
        np.testing.assert_array_equal(p.tensor.data, q.tensor.data)


def test_linear_layer_matches_manual_affine():
    rng = np.random.default_rng(19)
    lin = Linear(3, 2, rng, "t")
    x = rng.standard_normal((5, 3))
    np.testing.assert_allclose(
        lin(Tensor(x)).data, x @ lin.weight.tensor.data + lin.bias.tensor.data, atol=1e-15
    )
