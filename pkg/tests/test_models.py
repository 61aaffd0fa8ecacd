"""Architecture contracts: shapes, counts, determinism, gradients."""

from __future__ import annotations

import numpy as np
import pytest

import scenedistill.tensor as T
from scenedistill.errors import ConfigError, ContractError
from scenedistill.models import (
    BackboneHeadConfig,
    StudentModel,
    VanillaCNNConfig,
    ViTConfig,
    backbone_head_forward,
    build_backbone_head,
    build_vanilla_cnn,
    build_vit,
    cnn_forward,
    conv_head,
    decoder_block,
    encoder_block,
    param_count,
    set_frozen,
    vit_forward,
)
from scenedistill.tensor import Tape, Tensor, backward, mse_loss_masked, parameter

from conftest import gradcheck


SMALL_VIT = ViTConfig(image_h=32, image_w=32, patch_size=16, latent_dim=16, num_blocks=1,
                      num_heads=4, mlp_ratio=2.0, dropout_p=0.0, head_channels=4)


def vit_count_formula(cfg: ViTConfig) -> int:
    """Closed-form parameter count, derived independently from the layer list."""
    d = cfg.latent_dim
    tokens = (cfg.image_h // cfg.patch_size) * (cfg.image_w // cfg.patch_size)
    patch_dim = 3 * cfg.patch_size**2
    hidden = int(round(cfg.mlp_ratio * d))
    total = patch_dim * d + d  # patch embedding
    total += d  # class token
    total += (tokens + 1) * d  # positional table
    per_block = (
        2 * d  # ln1
        + 4 * (d * d + d)  # q, k, v, o projections with biases
        + 2 * d  # ln2
        + d * hidden + hidden  # mlp in
        + hidden * d + d  # mlp out
    )
    total += 2 * cfg.num_blocks * per_block  # encoders + decoders
    expand = cfg.patch_size**2 * cfg.head_channels
    total += d * expand + expand  # token expansion (1x1 conv)
    total += cfg.head_channels * 64 * 9 + 64  # head conv1
    total += 64 * 32 * 9 + 32  # head conv2
    total += 32 * 3 * 9 + 3  # head conv3
    return total


def cnn_count_formula(cfg: VanillaCNNConfig) -> int:
    total = 0
    prev = 3
    for c in cfg.channels:
        total += prev * c * 9 + c
        prev = c
    for w in cfg.head_widths:
        total += prev * w + w
        prev = w
    total += prev * 3 + 3
    return total


def backbone_count_formula(cfg: BackboneHeadConfig) -> int:
    total = 0
    prev = 3
    for c in cfg.backbone_channels:
        total += prev * c * 16 + c  # 4x4 kernels
        prev = c
    ds = 2 ** len(cfg.backbone_channels)
    expand = ds * ds * cfg.head_channels
    total += prev * expand + expand
    total += cfg.head_channels * 64 * 9 + 64
    total += 64 * 32 * 9 + 32
    total += 32 * 3 * 9 + 3
    return total


class TestBuildVit:
    def test_token_count_and_positional_rows(self):
        cfg = ViTConfig(image_h=64, image_w=64, patch_size=16, latent_dim=64,
                        num_blocks=2, num_heads=4)
        model = build_vit(cfg, np.random.default_rng(0))
        assert cfg.token_count == 16
        assert model.params["pos_embed"].shape == (17, 64)
        assert model.params["cls_token"].shape == (1, 1, 64)

    def test_same_seed_bitwise_identical(self):
        cfg = SMALL_VIT
        m1 = build_vit(cfg, np.random.default_rng(5))
        m2 = build_vit(cfg, np.random.default_rng(5))
        assert m1.params.keys() == m2.params.keys()
        for name in m1.params:
            assert np.array_equal(m1.params[name].data, m2.params[name].data), name

    def test_best_paper_config_param_count_matches_formula(self):
        cfg = ViTConfig(image_h=128, image_w=128, patch_size=32, latent_dim=256,
                        num_blocks=6, num_heads=4)
        model = build_vit(cfg, np.random.default_rng(0))
        assert param_count(model) == vit_count_formula(cfg)

    def test_invariant_violations_rejected(self):
        with pytest.raises(ConfigError):
            build_vit(ViTConfig(image_h=60, image_w=64, patch_size=16), np.random.default_rng(0))
        with pytest.raises(ConfigError):
            build_vit(ViTConfig(latent_dim=30, num_heads=4), np.random.default_rng(0))


class TestTransformerBlocks:
    def test_residual_identity_with_zero_projections(self, rng):
        cfg = SMALL_VIT
        model = build_vit(cfg, np.random.default_rng(0), dtype=np.float64)
        for name in ("enc0.attn.wo", "enc0.attn.bo", "enc0.mlp.w2", "enc0.mlp.b2"):
            model.params[name].data = np.zeros_like(model.params[name].data)
        x = Tensor(rng.standard_normal((2, 5, 16)))
        out = encoder_block(x, model.params, cfg, prefix="enc0.")
        assert np.array_equal(out.data, x.data)

    def test_single_token_attention_weight_is_one(self, rng):
        cfg = ViTConfig(image_h=16, image_w=16, patch_size=16, latent_dim=8, num_blocks=1,
                        num_heads=1, dropout_p=0.0, head_channels=2)
        model = build_vit(cfg, np.random.default_rng(0), dtype=np.float64)
        x = Tensor(rng.standard_normal((1, 1, 8)))
        _, attn = encoder_block(x, model.params, cfg, prefix="enc0.", return_attn=True)
        assert attn.shape == (1, 1, 1, 1)
        assert attn.data[0, 0, 0, 0] == 1.0

    @pytest.mark.parametrize("block,prefix", [(encoder_block, "enc0."), (decoder_block, "dec0.")])
    def test_block_gradients(self, rng, block, prefix):
        cfg = SMALL_VIT
        model = build_vit(cfg, np.random.default_rng(2), dtype=np.float64)
        x = parameter(rng.standard_normal((2, 4, 16)))
        names = [n for n in model.params if n.startswith(prefix)]
        tensors = {n: model.params[n] for n in names}
        tensors["x"] = x

        def loss():
            out = block(x, model.params, cfg, prefix=prefix)
            return T.reduce_sum(T.mul(out, out))

        gradcheck(loss, tensors, n_coords=6)

    def test_shape_preserved(self, rng):
        cfg = SMALL_VIT
        model = build_vit(cfg, np.random.default_rng(0), dtype=np.float64)
        x = Tensor(rng.standard_normal((3, 5, 16)))
        assert encoder_block(x, model.params, cfg, prefix="enc0.").shape == (3, 5, 16)
        assert decoder_block(x, model.params, cfg, prefix="dec0.").shape == (3, 5, 16)


class TestConvHead:
    def test_output_shape_for_paper_config(self):
        cfg = ViTConfig(image_h=128, image_w=128, patch_size=32, latent_dim=256,
                        num_blocks=6, num_heads=4)
        model = build_vit(cfg, np.random.default_rng(0))
        grid = Tensor(np.random.default_rng(1).standard_normal((2, 256, 4, 4)).astype(np.float32))
        out = conv_head(grid, model.params, 32)
        assert out.shape == (2, 3, 128, 128)

    def test_zero_final_layer_gives_constant_bias(self, rng):
        cfg = SMALL_VIT
        model = build_vit(cfg, np.random.default_rng(0), dtype=np.float64)
        model.params["head.conv3.w"].data = np.zeros_like(model.params["head.conv3.w"].data)
        model.params["head.conv3.b"].data = np.array([1.5, -2.0, 0.25])
        grid = Tensor(rng.standard_normal((1, 16, 2, 2)))
        out = conv_head(grid, model.params, 16)
        for c, v in enumerate([1.5, -2.0, 0.25]):
            assert np.allclose(out.data[0, c], v)

    def test_gradients(self, rng):
        cfg = SMALL_VIT
        model = build_vit(cfg, np.random.default_rng(3), dtype=np.float64)
        grid = parameter(rng.standard_normal((1, 16, 2, 2)))
        tensors = {n: model.params[n] for n in model.params if n.startswith("head.")}
        tensors["grid"] = grid

        def loss():
            out = conv_head(grid, model.params, 16)
            return T.reduce_sum(T.mul(out, out))

        gradcheck(loss, tensors, n_coords=6)


class TestVitForward:
    def test_output_shape(self, rng):
        model = build_vit(SMALL_VIT, np.random.default_rng(0))
        x = Tensor(rng.random((2, 3, 32, 32)).astype(np.float32))
        assert vit_forward(model, x).shape == (2, 3, 32, 32)

    def test_resolution_mismatch_rejected(self, rng):
        model = build_vit(SMALL_VIT, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            vit_forward(model, Tensor(rng.random((1, 3, 16, 16)).astype(np.float32)))

    def test_eval_mode_is_pure(self, rng):
        cfg = ViTConfig(image_h=32, image_w=32, patch_size=16, latent_dim=16, num_blocks=1,
                        num_heads=4, dropout_p=0.3, head_channels=4)
        model = build_vit(cfg, np.random.default_rng(0))
        x = Tensor(rng.random((1, 3, 32, 32)).astype(np.float32))
        out1 = vit_forward(model, x, training=False)
        out2 = vit_forward(model, x, training=False)
        assert np.array_equal(out1.data, out2.data)

    def test_dropout_needs_rng_in_training(self, rng):
        cfg = ViTConfig(image_h=32, image_w=32, patch_size=16, latent_dim=16, num_blocks=1,
                        num_heads=4, dropout_p=0.3, head_channels=4)
        model = build_vit(cfg, np.random.default_rng(0))
        x = Tensor(rng.random((1, 3, 32, 32)).astype(np.float32))
        with pytest.raises(ContractError):
            vit_forward(model, x, training=True)

    def test_full_gradcheck_small(self, rng):
        model = build_vit(SMALL_VIT, np.random.default_rng(4), dtype=np.float64)
        x = rng.random((1, 3, 32, 32))
        y = rng.random((1, 3, 32, 32))
        mask = np.ones((1, 1, 32, 32))

        def loss():
            pred = vit_forward(model, Tensor(x.copy()))
            return mse_loss_masked(pred, Tensor(y.copy()), Tensor(mask.copy()))

        gradcheck(loss, model.params, n_coords=4)


class TestVanillaCnn:
    def test_shape_preserved(self, rng):
        cfg = VanillaCNNConfig(image_h=64, image_w=64, channels=(8, 8, 8, 8, 8, 8),
                               head_widths=(16,))
        model = build_vanilla_cnn(cfg, np.random.default_rng(0))
        x = Tensor(rng.random((2, 3, 64, 64)).astype(np.float32))
        assert cnn_forward(model, x).shape == (2, 3, 64, 64)

    def test_default_schedule_param_count(self):
        cfg = VanillaCNNConfig()
        model = build_vanilla_cnn(cfg, np.random.default_rng(0))
        assert param_count(model) == cnn_count_formula(cfg)

    def test_six_stages_enforced(self):
        with pytest.raises(ConfigError):
            build_vanilla_cnn(VanillaCNNConfig(channels=(8, 8, 8)), np.random.default_rng(0))

    def test_gradcheck_small(self, rng):
        cfg = VanillaCNNConfig(image_h=16, image_w=16, channels=(4, 4, 6, 6, 8, 8),
                               head_widths=(8,))
        model = build_vanilla_cnn(cfg, np.random.default_rng(5), dtype=np.float64)
        x = rng.random((1, 3, 16, 16))
        y = rng.random((1, 3, 16, 16))
        mask = np.ones((1, 1, 16, 16))

        def loss():
            pred = cnn_forward(model, Tensor(x.copy()))
            return mse_loss_masked(pred, Tensor(y.copy()), Tensor(mask.copy()))

        gradcheck(loss, model.params, n_coords=4)


class TestBackboneHead:
    def test_shape_and_count(self, rng):
        cfg = BackboneHeadConfig(image_h=64, image_w=64)
        model = build_backbone_head(cfg, rng=np.random.default_rng(0))
        x = Tensor(rng.random((2, 3, 64, 64)).astype(np.float32))
        assert backbone_head_forward(model, x).shape == (2, 3, 64, 64)
        assert param_count(model) == backbone_count_formula(cfg)

    def test_seeded_init_deterministic(self):
        cfg = BackboneHeadConfig(image_h=64, image_w=64)
        m1 = build_backbone_head(cfg, rng=np.random.default_rng(9))
        m2 = build_backbone_head(cfg, rng=np.random.default_rng(9))
        for name in m1.params:
            assert np.array_equal(m1.params[name].data, m2.params[name].data)

    def test_frozen_config_freezes_backbone(self):
        cfg = BackboneHeadConfig(image_h=64, image_w=64, frozen=True)
        model = build_backbone_head(cfg, rng=np.random.default_rng(0))
        for name, t in model.params.items():
            expected = not name.startswith("backbone.")
            assert t.requires_grad == expected, name

    def test_gradcheck_small(self, rng):
        cfg = BackboneHeadConfig(image_h=32, image_w=32, backbone_channels=(4, 6, 8),
                                 head_channels=4)
        model = build_backbone_head(cfg, rng=np.random.default_rng(6), dtype=np.float64)
        x = rng.random((1, 3, 32, 32))
        y = rng.random((1, 3, 32, 32))
        mask = np.ones((1, 1, 32, 32))

        def loss():
            pred = backbone_head_forward(model, Tensor(x.copy()))
            return mse_loss_masked(pred, Tensor(y.copy()), Tensor(mask.copy()))

        gradcheck(loss, model.params, n_coords=4)


class TestIntrospection:
    def test_empty_model_has_zero_params(self):
        model = StudentModel(arch="vit", config=SMALL_VIT, params={})
        assert param_count(model) == 0

    def test_single_conv_count(self):
        params = {
            "conv.w": parameter(np.zeros((16, 3, 3, 3), dtype=np.float32)),
            "conv.b": parameter(np.zeros(16, dtype=np.float32)),
        }
        model = StudentModel(arch="vanilla-cnn", config=VanillaCNNConfig(), params=params)
        assert param_count(model) == 448

    def test_set_frozen_toggles_by_prefix(self):
        cfg = BackboneHeadConfig(image_h=64, image_w=64)
        model = build_backbone_head(cfg, rng=np.random.default_rng(0))
        set_frozen(model, "backbone.", True)
        assert not model.params["backbone.conv0.w"].requires_grad
        assert model.params["head.expand.w"].requires_grad
        set_frozen(model, "backbone.", False)
        assert model.params["backbone.conv0.w"].requires_grad

    def test_unknown_prefix_rejected(self):
        model = build_vit(SMALL_VIT, np.random.default_rng(0))
        with pytest.raises(ContractError):
            set_frozen(model, "nonexistent.", True)
