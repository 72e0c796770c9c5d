import numpy as np
import pytest

from mmrec import autodiff as ad
from mmrec import encoders as enc
from mmrec.encoders import ModelConfig
from mmrec.model import RecModel


@pytest.fixture
def model():
    cfg = ModelConfig(d=8, n_heads=2, ffn_mult=2, vocab_size=20, p_max=4,
                      q=16, patch_dim=12, text_blocks=2, vision_blocks=2,
                      user_blocks=1, L_max=6)
    return RecModel.init(cfg, seed=0)


def test_text_output_shapes(model):
    ids = np.array([[1, 2, 3, 0], [4, 5, 0, 0]])
    mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=float)
    cls, hid = model.encode_text(ids, mask)
    assert cls.shape == (2, 8)
    assert hid.shape == (2, 4, 8)


def test_text_padded_content_irrelevant(model):
    ids = np.array([[1, 2, 3, 0]])
    mask = np.array([[1.0, 1.0, 1.0, 0.0]])
    cls1, hid1 = model.encode_text(ids, mask)
    ids2 = ids.copy()
    ids2[0, 3] = 17  # different id in the padded slot
    cls2, hid2 = model.encode_text(ids2, mask)
    np.testing.assert_array_equal(cls1.data, cls2.data)
    np.testing.assert_array_equal(hid1.data[:, :3], hid2.data[:, :3])


def test_text_rejects_out_of_vocab(model):
    ids = np.array([[1, 99, 3, 0]])
    mask = np.ones((1, 4))
    with pytest.raises(ValueError, match="vocabulary"):
        model.encode_text(ids, mask)


def fd_check_param(model, param, loss_fn, step=1e-5, tol=1e-4):
    """Central-difference check of loss_fn's gradient w.r.t. one parameter."""
    model.zero_grad()
    loss_fn().backward()
    analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    aflat = analytic.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            denom = max(abs(aflat[i]), abs(numeric), 1e-3)
            assert abs(aflat[i] - numeric) / denom <= tol


def test_text_cls_gradient_matches_finite_differences(model):
    ids = np.array([[1, 2, 3, 4], [5, 6, 7, 8]])
    mask = np.ones((2, 4))
    readout = np.random.default_rng(0).normal(size=8)

    def loss():
        cls, _hid = model.encode_text(ids, mask)
        return ad.tsum(ad.matmul(cls, readout))

    fd_check_param(model, model.groups["text_encoder"]["tok_emb"], loss)


def test_vision_output_shapes(model):
    rng = np.random.default_rng(0)
    patches = rng.normal(size=(3, 16, 12))
    cls, hid = model.encode_vision(patches)
    assert cls.shape == (3, 8)
    assert hid.shape == (3, 16, 8)


def test_vision_rejects_wrong_patch_grid(model):
    with pytest.raises(ValueError, match="patches"):
        model.encode_vision(np.zeros((1, 5, 12)))
    with pytest.raises(ValueError, match="patches"):
        model.encode_vision(np.zeros((1, 16, 3)))


def test_vision_deterministic(model):
    patches = np.random.default_rng(1).normal(size=(2, 16, 12))
    a, _ = model.encode_vision(patches)
    b, _ = model.encode_vision(patches)
    np.testing.assert_array_equal(a.data, b.data)


def test_vision_patch_order_matters(model):
    rng = np.random.default_rng(2)
    patches = rng.normal(size=(1, 16, 12))
    cls1, _ = model.encode_vision(patches)
    cls2, _ = model.encode_vision(patches[:, ::-1])
    assert not np.allclose(cls1.data, cls2.data)


def test_fusion_shape_and_position_count(model):
    rng = np.random.default_rng(3)
    t_hid = ad.Tensor(rng.normal(size=(2, 4, 8)))
    v_hid = ad.Tensor(rng.normal(size=(2, 16, 8)))
    mask = np.ones((2, 4))
    e = model.fuse(t_hid, v_hid, mask)
    assert e.shape == (2, 8)


def test_fusion_ignores_masked_text(model):
    rng = np.random.default_rng(4)
    t_hid = ad.Tensor(rng.normal(size=(1, 4, 8)))
    v_hid = ad.Tensor(rng.normal(size=(1, 16, 8)))
    mask = np.zeros((1, 4))
    e1 = model.fuse(t_hid, v_hid, mask)
    t_hid2 = ad.Tensor(rng.normal(size=(1, 4, 8)))  # perturb masked hiddens
    e2 = model.fuse(t_hid2, v_hid, mask)
    np.testing.assert_array_equal(e1.data, e2.data)


def test_fusion_rejects_dimension_mismatch(model):
    with pytest.raises(ValueError, match="dimension"):
        model.fuse(ad.Tensor(np.zeros((1, 4, 5))),
                   ad.Tensor(np.zeros((1, 16, 8))), np.ones((1, 4)))


def test_fusion_gradient_wrt_mm_cls(model):
    rng = np.random.default_rng(5)
    t_hid = ad.Tensor(rng.normal(size=(1, 4, 8)))
    v_hid = ad.Tensor(rng.normal(size=(1, 16, 8)))
    mask = np.ones((1, 4))
    readout = rng.normal(size=8)

    def loss():
        e = model.fuse(t_hid, v_hid, mask)
        return ad.tsum(ad.matmul(e, readout))

    fd_check_param(model, model.groups["fusion"]["mm_cls"], loss)


def test_frozen_blocks_receive_zero_gradient(model):
    model.set_trainable_top_blocks(1)
    ids = np.array([[1, 2, 3, 4]])
    mask = np.ones((1, 4))
    model.zero_grad()
    cls, _ = model.encode_text(ids, mask)
    ad.tsum(ad.mul(cls, cls)).backward()
    te = model.groups["text_encoder"]
    assert te["b0.wq"].grad is None  # frozen bottom block
    assert te["tok_emb"].grad is None  # embeddings freeze with the bottom
    assert te["b1.wq"].grad is not None  # trainable top block
    model.set_trainable_top_blocks("all")
    assert te["b0.wq"].requires_grad


def test_trainable_top_blocks_bounds(model):
    with pytest.raises(ValueError, match="trainable_top_blocks"):
        model.set_trainable_top_blocks(3)
    with pytest.raises(ValueError, match="trainable_top_blocks"):
        model.set_trainable_top_blocks(0)


def test_config_rejects_bad_head_split():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(d=10, n_heads=4)
