from types import SimpleNamespace

import numpy as np
import pytest

from crosskd.errors import ConfigError, DimensionError
from crosskd.gradcheck import check_gradients
from crosskd.models import patchify
from crosskd.projectors import (
    GwlProjector,
    PcaProjector,
    apply_mask,
    draw_mask,
    flatten_grid,
    partial_mask,
    pc_attention,
    proj1_loss,
    proj2_loss,
    quadrant_members,
)
from crosskd.tensor import Tensor


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def _teacher(rng, b=2, n=16, d=8):
    return SimpleNamespace(
        queries=T(rng.normal(size=(b, n, d))),
        keys=T(rng.normal(size=(b, n, d))),
        values=T(rng.normal(size=(b, n, d))),
        attn=T(rng.normal(size=(b, n, d))),
        tokens=T(rng.normal(size=(b, n, d))),
    )


# ---- PCA projector


def test_qkv_shapes(rng):
    pca = PcaProjector(24, 8, seed=0)
    q, k, v = pca.qkv(T(rng.normal(size=(2, 24, 4, 4))))
    assert q.shape == k.shape == v.shape == (2, 16, 8)


def test_qkv_zero_input_zero_bias():
    pca = PcaProjector(24, 8, seed=0)
    for conv in (pca.conv_q, pca.conv_k, pca.conv_v):
        conv.bias.data[:] = 0.0
    for t in pca.qkv(T(np.zeros((2, 24, 4, 4)))):
        assert np.array_equal(t.data, np.zeros((2, 16, 8)))


def test_qkv_center_tap_token_order(rng):
    pca = PcaProjector(3, 3, seed=0)
    for conv in (pca.conv_q, pca.conv_k, pca.conv_v):
        conv.weight.data[:] = 0.0
        conv.weight.data[:, :, 1, 1] = np.eye(3)
        conv.bias.data[:] = 0.0
    fmap = rng.normal(size=(1, 3, 4, 4))
    q, _, _ = pca.qkv(T(fmap))
    for t in range(16):
        assert np.array_equal(q.data[0, t], fmap[0, :, t // 4, t % 4])


def test_qkv_channel_mismatch():
    with pytest.raises(DimensionError):
        PcaProjector(24, 8).qkv(T(np.zeros((1, 16, 4, 4))))


def test_flatten_grid_matches_patchify_order(rng):
    fmap = rng.normal(size=(2, 3, 4, 4))
    channels_last = fmap.transpose(0, 2, 3, 1)
    # patch size 1 turns every grid cell into one token, in patchify order
    assert np.array_equal(flatten_grid(T(fmap)).data, patchify(T(channels_last), 1).data)


def test_mask_boundaries(rng):
    s, t = T(rng.normal(size=(2, 4, 3))), T(rng.normal(size=(2, 4, 3)))
    assert np.array_equal(partial_mask(s, t, 0.0, rng).data, s.data)
    assert np.array_equal(partial_mask(s, t, 1.0, rng).data, t.data)


def test_mask_teacher_fraction():
    rng = np.random.default_rng(3)
    out = partial_mask(T(np.zeros((1, 100, 100))), T(np.ones((1, 100, 100))), 0.5, rng)
    assert abs(out.data.mean() - 0.5) <= 4 * np.sqrt(0.25 / 1e4)


def test_mask_reproducible_and_fresh():
    a = draw_mask((50,), 0.5, np.random.default_rng(9))
    b = draw_mask((50,), 0.5, np.random.default_rng(9))
    assert np.array_equal(a, b)
    rng = np.random.default_rng(9)
    assert not np.array_equal(draw_mask((50,), 0.5, rng), draw_mask((50,), 0.5, rng))


@pytest.mark.parametrize("p", [-0.1, 1.1])
def test_mask_probability_range(p, rng):
    with pytest.raises(ConfigError):
        partial_mask(T(np.zeros(3)), T(np.ones(3)), p, rng)
    with pytest.raises(ConfigError):
        PcaProjector(4, 4, mask_p=p)


def test_mask_gradient_semantics():
    s = T(np.arange(6.0).reshape(1, 2, 3), grad=True)
    t = T(np.full((1, 2, 3), -1.0), grad=True)
    mask = np.array([[[True, False, True], [False, False, True]]])
    apply_mask(s, t, mask).sum().backward()
    assert np.array_equal(s.grad, (~mask).astype(float))
    assert t.grad is None


def test_pca_masks_drawn_independently_for_qkv(rng):
    pca = PcaProjector(4, 4, mask_p=0.5, dropout=0.0, seed=2)
    fmap = T(rng.normal(size=(1, 4, 4, 4)))
    teacher = _teacher(rng, b=1, d=4)
    teacher.queries = teacher.keys = teacher.values = T(np.full((1, 16, 4), 123.0))
    original = pca.rng
    seen = []

    class Spy:
        def random(self, shape):
            out = original.random(shape)
            seen.append(out)
            return out

    pca.rng = Spy()
    pca(fmap, teacher)
    masks = [m < 0.5 for m in seen]
    assert len(masks) == 3
    assert not (np.array_equal(masks[0], masks[1]) and np.array_equal(masks[1], masks[2]))


def test_pc_attention_uniform_when_scores_zero(rng):
    v = rng.normal(size=(2, 5, 3))
    out = pc_attention(T(np.zeros((2, 5, 3))), T(np.zeros((2, 5, 3))), T(v))
    assert np.allclose(out.data, np.broadcast_to(v.mean(axis=1, keepdims=True), v.shape), atol=1e-15)


def test_pc_attention_single_token(rng):
    q, k, v = (rng.normal(size=(2, 1, 4)) for _ in range(3))
    assert np.allclose(pc_attention(T(q), T(k), T(v)).data, v, atol=1e-15)


def test_pc_attention_hand_example():
    out = pc_attention(T([[[1.0], [0.0]]]), T([[[1.0], [0.0]]]), T([[[2.0], [4.0]]]))
    assert out.data[0, 0, 0] == pytest.approx(2.5378, abs=1e-4)
    assert out.data[0, 1, 0] == pytest.approx(3.0, abs=1e-12)


def test_pc_attention_scaling(rng):
    q, k, v = (rng.normal(size=(1, 3, 4)) for _ in range(3))
    s = q[0] @ k[0].T / 2.0
    w = np.exp(s) / np.exp(s).sum(1, keepdims=True)
    assert np.allclose(pc_attention(T(q), T(k), T(v)).data[0], w @ v[0], atol=1e-14)


def test_proj1_cases(rng):
    a, v = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3))
    assert proj1_loss(T(a), T(v), T(a), T(v)).item() == 0.0
    assert proj1_loss(T(a + 1.0), T(v), T(a), T(v)).item() == pytest.approx(1.0, abs=1e-12)
    assert proj1_loss(T(a), T(-v), T(a), T(v)).item() == 0.0


def test_proj1_value_term_oracle(rng):
    a, v1, v2 = (rng.normal(size=(1, 2, 4)) for _ in range(3))
    expected = ((v1 * v1 / 2.0 - v2 * v2 / 2.0) ** 2).mean()
    assert proj1_loss(T(a), T(v1), T(a), T(v2)).item() == pytest.approx(expected, abs=1e-14)


def test_proj1_shape_error():
    with pytest.raises(DimensionError):
        proj1_loss(T(np.zeros((1, 2, 3))), T(np.zeros((1, 2, 3))), T(np.zeros((1, 2, 4))), T(np.zeros((1, 2, 3))))


def test_pca_loss_zero_when_teacher_copies_everything(rng):
    # p = 1: every attention input is the teacher's, and V_s is matched by construction
    pca = PcaProjector(4, 4, mask_p=1.0, dropout=0.0, seed=0)
    fmap = T(rng.normal(size=(2, 4, 4, 4)))
    teacher = _teacher(rng, d=4)
    out = pca(fmap, teacher)
    teacher.values = T(out.values.data)
    teacher.attn = T(pc_attention(teacher.queries, teacher.keys, teacher.values).data)
    assert pca.loss(fmap, teacher).item() == pytest.approx(0.0, abs=1e-24)


# ---- GWL projector


def test_quadrant_membership_g4():
    assert quadrant_members(4) == {
        "TL": [0, 1, 4, 5],
        "TR": [2, 3, 6, 7],
        "BL": [8, 9, 12, 13],
        "BR": [10, 11, 14, 15],
    }


def _identity_gwl(c, g):
    gwl = GwlProjector(c, c, g, dropout=0.0)
    gwl.weight.data[...] = np.eye(c)
    gwl.bias.data[...] = 0.0
    return gwl


@pytest.mark.parametrize("g", [2, 4, 6])
def test_gwl_identity_reassembly_is_raster_order(g, rng):
    c = 3
    fmap = rng.normal(size=(2, c, g, g))
    out = _identity_gwl(c, g)(T(fmap)).data
    for i in range(g * g):
        assert np.array_equal(out[:, i, :], fmap[:, :, i // g, i % g])


def test_gwl_bias_only():
    gwl = GwlProjector(5, 3, 4, dropout=0.0)
    gwl.weight.data[...] = 0.0
    gwl.bias.data[...] = [1.0, -2.0, 0.5]
    out = gwl(T(np.random.default_rng(0).normal(size=(2, 5, 4, 4)))).data
    assert np.array_equal(out, np.broadcast_to([1.0, -2.0, 0.5], (2, 16, 3)))


def test_gwl_weights_shared_across_quadrants(rng):
    gwl = GwlProjector(4, 3, 4, dropout=0.0, seed=1)
    fmap = rng.normal(size=(1, 4, 4, 4))
    out = gwl(T(fmap)).data
    for i in range(16):
        cell = fmap[0, :, i // 4, i % 4]
        assert np.allclose(out[0, i], cell @ gwl.weight.data + gwl.bias.data, atol=1e-14)


def test_gwl_odd_grid_rejected():
    with pytest.raises(ConfigError):
        GwlProjector(4, 4, 3)


def test_gwl_shape_mismatch():
    with pytest.raises(DimensionError):
        GwlProjector(4, 4, 4)(T(np.zeros((1, 4, 2, 2))))


def test_gwl_dropout_only_in_training(rng):
    gwl = GwlProjector(4, 3, 4, dropout=0.4, seed=0)
    x = T(rng.normal(size=(1, 4, 4, 4)))
    gwl.eval()
    assert np.array_equal(gwl(x).data, gwl(x).data)
    gwl.train()
    assert not np.array_equal(gwl(x).data, gwl(x).data)


def test_proj2_cases(rng):
    h = rng.normal(size=(2, 4, 3))
    assert proj2_loss(T(h), T(h)).item() == 0.0
    assert proj2_loss(T(h + 1.0), T(h)).item() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(DimensionError):
        proj2_loss(T(h), T(h[:, :2]))


def test_proj2_loop_oracle(rng):
    a, b = rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 2, 2))
    total = 0.0
    for i in range(2):
        for j in range(2):
            for k in range(2):
                total += (a[i, j, k] - b[i, j, k]) ** 2
    assert proj2_loss(T(a), T(b)).item() == pytest.approx(total / 8, abs=1e-12)


# ---- gradients through the projectors


@pytest.mark.parametrize("seed", range(3))
def test_projector_gradients_with_fixed_mask(seed):
    rng = np.random.default_rng(seed)
    fmap = T(rng.normal(size=(2, 3, 4, 4)), grad=True)
    teacher = _teacher(rng, d=4)
    pca = PcaProjector(3, 4, mask_p=0.5, dropout=0.2, seed=seed)
    gwl = GwlProjector(3, 4, 4, dropout=0.4, seed=seed)

    def loss():
        pca.rng = np.random.default_rng(100 + seed)
        gwl.rng = np.random.default_rng(200 + seed)
        return pca.loss(fmap, teacher) + gwl.loss(fmap, teacher)

    params = [("fmap", fmap)] + list(pca.named_parameters("pca.")) + list(gwl.named_parameters("gwl."))
    errs = check_gradients(loss, params)
    assert max(errs.values()) < 1e-4, errs
