import numpy as np
import pytest

from conftest import random_frames
from slamformer.attention import FrameLayout, KVCache, MaskKind, build_mask
from slamformer.errors import ConfigError, ContractError, DataIOError, DimensionError
from slamformer.model import (
    ImageFrame, MapTokens, ModelConfig, SlamFormer, fold_patches, load_checkpoint, parameter_shapes,
    reenter_map_tokens, save_checkpoint, unfold_patches,
)
from slamformer.tensor import Tensor


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(image_hw=(30, 32))
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, heads=4)
    cfg = ModelConfig()
    assert cfg.tokens_per_frame == 16 + 2 and cfg.d_head == 16


def test_image_frame_validation():
    with pytest.raises(ConfigError):
        ImageFrame(np.full((4, 4, 3), 1.5))
    with pytest.raises(DimensionError):
        ImageFrame(np.zeros((4, 4)))


def test_fold_unfold_roundtrip():
    cfg = ModelConfig(patch=4, image_hw=(8, 12), d_model=16, heads=2)
    img = np.random.default_rng(0).random((8, 12, 3))
    rows = fold_patches(img, 4)
    assert rows.shape == (6, 48)
    back = unfold_patches(Tensor(rows, dtype=np.float64), cfg, 3).data
    assert np.array_equal(back, img)


def test_decode_output_contract(toy_model):
    frames = random_frames(2)
    outs, blocks = toy_model.forward([toy_model.encode(f) for f in frames],
                                     build_mask(MaskKind.CAUSAL_FULL2, FrameLayout(18, 2)))
    assert len(blocks) == 4 and blocks[0][0][0].shape == (18, 4, 16)
    p = toy_model.decode(outs[1], 1)
    assert p.pointmap.shape == (32, 32, 3) and p.confidence.shape == (32, 32)
    assert np.all(p.depth > 0) and np.all(p.confidence > 1)
    assert abs(np.linalg.norm(p.pose.rotation) - 1) < 1e-6


def test_fresh_pose_head_is_near_identity(toy_model):
    f = random_frames(1)[0]
    out, _ = toy_model.forward([toy_model.encode(f)], build_mask(MaskKind.FULL, FrameLayout(18, 1)))
    g = toy_model.decode_pose(out[0])
    assert abs(g.rotation[3]) > 0.9


def test_seed_determinism():
    a = SlamFormer(seed=7).params
    b = SlamFormer(seed=7).params
    c = SlamFormer(seed=8).params
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_checkpoint_roundtrip(tmp_path, toy_model):
    p = tmp_path / "w.sfwt"
    save_checkpoint(toy_model, p)
    back = load_checkpoint(p)
    assert back.cfg == toy_model.cfg
    assert all(np.array_equal(back.params[k], toy_model.params[k]) for k in toy_model.params)
    raw = p.read_bytes()
    p.write_bytes(raw + b"\0")
    with pytest.raises(DataIOError):
        load_checkpoint(p)
    p.write_bytes(raw[:100])
    with pytest.raises(DataIOError):
        load_checkpoint(p)


def test_frozen_pose_head_not_trainable():
    m = SlamFormer(ModelConfig(freeze_pose_head=True))
    assert not any(n.startswith("pose_head.") for n in m.trainable())
    w = m.weights(requires_grad=True)
    assert not w["pose_head.w1"].requires_grad and w["pmap_head.w1"].requires_grad


def test_parameter_mismatch_rejected():
    params = SlamFormer().params
    params.pop("type_embed")
    with pytest.raises(ConfigError):
        SlamFormer(params=params)


def test_reentry_identity_without_type_embedding():
    cfg = ModelConfig(token_type_embedding=False)
    m = SlamFormer(cfg)
    tok = Tensor(np.ones((cfg.tokens_per_frame, cfg.d_model)))
    assert reenter_map_tokens(MapTokens(tok, 0), cfg, m.weights()) is tok
    with_type = SlamFormer(ModelConfig())
    assert not np.array_equal(with_type.reenter(MapTokens(tok, 0)).data, tok.data)


def test_wrong_image_size_rejected(toy_model):
    with pytest.raises(ConfigError):
        toy_model.encode(ImageFrame(np.zeros((16, 16, 3))))


def test_cache_layer_mismatch_rejected(toy_model):
    f = random_frames(1)[0]
    with pytest.raises(ContractError):
        toy_model.forward([toy_model.encode(f)], build_mask(MaskKind.FULL, FrameLayout(18, 1)), KVCache.empty(2))


def test_parameter_count_scales_with_layers():
    small = sum(int(np.prod(s)) for s in parameter_shapes(ModelConfig(layers=1)).values())
    big = sum(int(np.prod(s)) for s in parameter_shapes(ModelConfig(layers=2)).values())
    assert big > small
