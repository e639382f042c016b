import numpy as np
import pytest
import torch

from mradnet.config import ConfigError, ModelConfig, tiny_model_config
from mradnet.model import (
    AttentionMixer,
    MetaFormerBlock,
    MRadNet,
    OutputHead,
    SepConvMixer,
    ShapeError,
    SkipFusion,
    TokenEmbed,
    TokenMerging,
    TokenSplitting,
    build_model,
    count_params,
    init_parameters,
    rearrange_2x2,
    unarrange_2x2,
)

from util import expected_stage_shapes, random_legal_config


def test_config_rejects_bad_divisibility():
    with pytest.raises(ConfigError):
        ModelConfig(height=100).validate()  # not divisible by 2^4
    with pytest.raises(ConfigError):
        ModelConfig(num_frames=3).validate()
    with pytest.raises(ConfigError):
        tiny_model_config(stage_mixers=("sepconv", "pooling"))
    with pytest.raises(ConfigError):
        tiny_model_config(stage_channels=(8, 6), attn_heads=4)  # 6 % 4 != 0


class TestTokenEmbed:
    def test_full_size_shape(self):
        cfg = ModelConfig().validate()
        embed = TokenEmbed(cfg)
        x = torch.zeros(4, 16, 4, 128, 128, 2)
        assert embed(x).shape == (4, 8, 64, 64, cfg.stage_channels[0])

    def test_minimal_legal_input(self):
        cfg = ModelConfig(num_frames=2, height=2, width=2, stage_channels=(8, 8))
        embed = TokenEmbed(cfg)
        assert embed(torch.zeros(1, 2, 4, 2, 2, 2)).shape == (1, 1, 1, 1, 8)

    def test_zero_input_zero_biases_gives_zero_tokens(self):
        cfg = tiny_model_config()
        embed = TokenEmbed(cfg)
        embed.apply(init_parameters)  # zero biases
        out = embed(torch.zeros(2, 4, 4, 8, 8, 2))
        assert torch.all(out == 0)

    def test_shape_error_names_axis(self):
        cfg = tiny_model_config()
        embed = TokenEmbed(cfg)
        with pytest.raises(ShapeError, match="chirps"):
            embed(torch.zeros(1, 4, 3, 8, 8, 2))
        with pytest.raises(ShapeError, match="'H'"):
            embed(torch.zeros(1, 4, 4, 6, 8, 2))

    def test_pool_variant_shape(self):
        cfg = tiny_model_config(embed_kind="pool")
        out = TokenEmbed(cfg)(torch.randn(1, 4, 4, 8, 8, 2))
        assert out.shape == (1, 2, 4, 4, 8)


class TestSepConvMixer:
    def test_shape_preserved(self):
        mixer = SepConvMixer(16, (3, 3, 3))
        assert mixer(torch.randn(1, 4, 8, 8, 16)).shape == (1, 4, 8, 8, 16)

    def test_zero_input_zero_biases_gives_zero(self):
        mixer = SepConvMixer(16, (3, 3, 3))
        mixer.apply(init_parameters)
        assert torch.all(mixer(torch.zeros(1, 4, 8, 8, 16)) == 0)

    def test_single_voxel_support_confined_to_kernel_neighborhood(self):
        torch.manual_seed(0)
        mixer = SepConvMixer(4, (3, 3, 3))
        mixer.apply(init_parameters)
        x = torch.zeros(1, 5, 7, 7, 4)
        x[0, 2, 3, 3, :] = 1.0
        out = mixer(x)
        nz = out.abs().sum(dim=-1)[0] > 0
        support = torch.zeros_like(nz)
        support[1:4, 2:5, 2:5] = True  # +-1 around the voxel per 3x3x3 kernel
        assert torch.all(nz <= support)
        assert nz.any()


class TestAttentionMixer:
    def test_single_token_is_value_then_output_projection(self):
        torch.manual_seed(1)
        mixer = AttentionMixer(8, num_heads=2)
        x = torch.randn(1, 1, 1, 1, 8)
        token = x.reshape(1, 8)
        v = token @ mixer.qkv.weight[16:24].T + mixer.qkv.bias[16:24]
        expected = v @ mixer.proj.weight.T + mixer.proj.bias
        got = mixer(x).reshape(1, 8)
        assert torch.allclose(got, expected, atol=1e-6)

    def test_permutation_equivariance(self):
        torch.manual_seed(2)
        mixer = AttentionMixer(16, num_heads=4)
        x = torch.randn(2, 2, 4, 4, 16)
        n = 2 * 4 * 4
        perm = torch.randperm(n)
        flat = x.reshape(2, n, 16)
        permuted = flat[:, perm].reshape(2, 2, 4, 4, 16)
        out_direct = mixer(permuted).reshape(2, n, 16)
        out_permuted = mixer(x).reshape(2, n, 16)[:, perm]
        assert torch.allclose(out_direct, out_permuted, atol=1e-5)

    def test_shape_preserved(self):
        mixer = AttentionMixer(16, num_heads=4)
        assert mixer(torch.randn(1, 2, 4, 4, 16)).shape == (1, 2, 4, 4, 16)

    def test_heads_must_divide_channels(self):
        with pytest.raises(ShapeError):
            AttentionMixer(10, num_heads=4)


class TestMetaFormerBlock:
    @pytest.mark.parametrize("mixer_kind", ["sepconv", "attention"])
    def test_zeroed_residual_projections_give_bitwise_identity(self, mixer_kind):
        torch.manual_seed(3)
        cfg = tiny_model_config()
        block = MetaFormerBlock(8, mixer_kind, cfg)
        with torch.no_grad():
            out_proj = block.mixer.pw2 if mixer_kind == "sepconv" else block.mixer.proj
            out_proj.weight.zero_()
            out_proj.bias.zero_()
            block.mlp.fc2.weight.zero_()
            block.mlp.fc2.bias.zero_()
        x = torch.randn(2, 2, 4, 4, 8)
        out = block(x)
        assert torch.equal(out, x)

    def test_shape_and_finiteness(self):
        torch.manual_seed(4)
        cfg = tiny_model_config()
        block = MetaFormerBlock(8, "sepconv", cfg)
        block.apply(init_parameters)
        out = block(torch.randn(1, 4, 8, 8, 8))
        assert out.shape == (1, 4, 8, 8, 8)
        assert torch.isfinite(out).all()


class TestTokenMerging:
    def test_shape(self):
        merge = TokenMerging(8, 16)
        assert merge(torch.randn(1, 8, 64, 64, 8)).shape == (1, 8, 32, 32, 16)

    def test_rearrangement_order_is_documented(self):
        # 2x2 grid of constant tokens a,b,c,d -> concat(a,b,c,d)
        a, b, c, d = (torch.full((3,), float(v)) for v in (1, 2, 3, 4))
        x = torch.zeros(1, 1, 2, 2, 3)
        x[0, 0, 0, 0] = a
        x[0, 0, 0, 1] = b
        x[0, 0, 1, 0] = c
        x[0, 0, 1, 1] = d
        merged = rearrange_2x2(x)
        assert merged.shape == (1, 1, 1, 1, 12)
        assert torch.equal(merged[0, 0, 0, 0], torch.cat([a, b, c, d]))

    def test_rearrangement_is_parameter_free_and_bitwise_invertible(self):
        torch.manual_seed(5)
        x = torch.randn(2, 3, 8, 6, 5)
        assert torch.equal(unarrange_2x2(rearrange_2x2(x)), x)

    def test_temporal_axis_unchanged(self):
        torch.manual_seed(6)
        for t in (1, 3, 8):
            x = torch.randn(1, t, 4, 4, 4)
            assert rearrange_2x2(x).shape[1] == t
            assert TokenMerging(4, 8)(x).shape[1] == t

    def test_odd_spatial_extent_rejected(self):
        with pytest.raises(ShapeError):
            TokenMerging(4, 8)(torch.randn(1, 2, 5, 4, 4))

    def test_conv_variant_shape(self):
        merge = TokenMerging(8, 16, kind="conv")
        assert merge(torch.randn(1, 2, 8, 8, 8)).shape == (1, 2, 4, 4, 16)


class TestTokenSplitting:
    def test_shape(self):
        split = TokenSplitting(8, 4)
        assert split(torch.randn(1, 8, 16, 16, 8)).shape == (1, 8, 32, 32, 4)

    def test_merge_then_split_restores_spatial_shape(self):
        torch.manual_seed(7)
        x = torch.randn(1, 4, 8, 8, 8)
        merged = TokenMerging(8, 16)(x)
        restored = TokenSplitting(16, 8)(merged)
        assert restored.shape == x.shape

    def test_single_token_maps_to_2x2_neighborhood(self):
        torch.manual_seed(8)
        split = TokenSplitting(4, 4)
        split.apply(init_parameters)
        x = torch.zeros(1, 2, 4, 4, 4)
        x[0, 1, 2, 3, :] = 1.0
        out = split(x)
        nz = out.abs().sum(dim=-1)[0] > 0
        support = torch.zeros_like(nz)
        support[1, 4:6, 6:8] = True
        assert torch.all(nz <= support)
        assert nz.any()


class TestSkipFusion:
    def test_projects_back_to_stage_width(self):
        fuse = SkipFusion(32)
        out = fuse(torch.randn(1, 8, 32, 32, 32), torch.randn(1, 8, 32, 32, 32))
        assert out.shape == (1, 8, 32, 32, 32)

    def test_zero_encoder_leaves_decoder_projection(self):
        torch.manual_seed(9)
        fuse = SkipFusion(8)
        dec = torch.randn(1, 2, 4, 4, 8)
        out = fuse(dec, torch.zeros_like(dec))
        expected = dec @ fuse.proj.weight[:, :8].T + fuse.proj.bias
        assert torch.allclose(out, expected, atol=1e-6)

    def test_spatial_mismatch_rejected(self):
        fuse = SkipFusion(8)
        with pytest.raises(ShapeError, match="H'"):
            fuse(torch.randn(1, 2, 4, 4, 8), torch.randn(1, 2, 8, 4, 8))


class TestOutputHead:
    def test_shape(self):
        head = OutputHead(48, 3)
        assert head(torch.randn(1, 8, 64, 64, 48)).shape == (1, 16, 3, 128, 128)

    def test_constant_field_gives_constant_map(self):
        torch.manual_seed(10)
        head = OutputHead(8, 2)
        out = head(torch.ones(1, 2, 4, 4, 8))
        for c in range(2):
            vals = out[0, :, c]
            assert torch.allclose(vals, vals.flatten()[0].expand_as(vals), atol=1e-6)

    def test_outputs_in_unit_interval(self):
        torch.manual_seed(11)
        head = OutputHead(8, 2)
        out = head(torch.randn(2, 2, 4, 4, 8) * 100)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestForward:
    def test_full_size_output_shape(self):
        cfg = ModelConfig().validate()
        model = build_model(cfg, seed=0)
        with torch.no_grad():
            out = model(torch.randn(1, 16, 4, 128, 128, 2))
        assert out.shape == (1, 16, 3, 128, 128)
        assert torch.isfinite(out).all()

    def test_forward_is_deterministic_bitwise(self):
        cfg = tiny_model_config()
        model = build_model(cfg, seed=1)
        x = torch.randn(2, 4, 4, 8, 8, 2)
        with torch.no_grad():
            assert torch.equal(model(x), model(x))

    def test_seeded_builds_are_identical(self):
        cfg = tiny_model_config()
        m1, m2 = build_model(cfg, seed=5), build_model(cfg, seed=5)
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(p1, p2)

    def test_randomized_configs_match_shape_algebra(self):
        rng = np.random.default_rng(123)
        for _ in range(10):
            cfg = random_legal_config(rng)
            model = build_model(cfg, seed=0)
            batch = 1
            shapes = expected_stage_shapes(cfg, batch)
            seen = {}
            hooks = []

            def grab(name):
                def hook(_m, _i, out):
                    seen[name] = tuple(out.shape)
                return hook

            hooks.append(model.embed.register_forward_hook(grab("embed")))
            for i, merge in enumerate(model.merges):
                hooks.append(merge.register_forward_hook(grab(f"merge{i}")))
            for j, blocks in enumerate(model.decoder_stages):
                if len(blocks):
                    hooks.append(blocks[-1].register_forward_hook(grab(f"dec{j}")))
            x = torch.randn(batch, cfg.num_frames, cfg.num_chirps, cfg.height, cfg.width, 2)
            with torch.no_grad():
                out = model(x)
            for h in hooks:
                h.remove()
            assert tuple(out.shape) == shapes["out"]
            for name, shape in seen.items():
                assert shape == shapes[name], f"{name}: {shape} != {shapes[name]}"


class TestParamCounting:
    def test_empty_module_counts_zero(self):
        assert count_params(torch.nn.Sequential()) == 0

    def test_single_param_counts_its_elements(self):
        lin = torch.nn.Linear(6, 4, bias=False)
        assert count_params(lin) == 24

    def test_model_parameters_have_hierarchical_paths_and_grad_slots(self):
        model = build_model(tiny_model_config(), seed=0)
        names = [n for n, _ in model.named_parameters()]
        assert any(n.startswith("embed.") for n in names)
        assert any(n.startswith("encoder_stages.0.") for n in names)
        assert any(n.startswith("head.") for n in names)
        loss = model(torch.randn(1, 4, 4, 8, 8, 2)).sum()
        loss.backward()
        assert all(p.grad is not None for p in model.parameters())
