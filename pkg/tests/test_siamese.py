"""Twin embedding networks, merge head and parameter accounting."""
import numpy as np
import pytest

from oracles import desk_model, model_gradient_error
from scalosiam import autodiff as ad
from scalosiam.siamese import (
    ConvSiameseConfig,
    ResidualSiameseConfig,
    build_model,
    conv_param_count,
    load_model,
    param_count,
    residual_param_count,
    save_model,
)

CANONICAL_CONV = 420_646_209


class TestParameterCounts:
    def test_canonical_conv_closed_form(self):
        assert conv_param_count(ConvSiameseConfig()) == CANONICAL_CONV

    def test_canonical_conv_built(self):
        model = build_model("conv", ConvSiameseConfig(), np.random.default_rng(0))
        assert param_count(model) == CANONICAL_CONV
        assert model.params["embed.weight"].shape == (102400, 4096)

    def test_residual_budget(self):
        n = residual_param_count(ResidualSiameseConfig())
        assert 20e6 <= n <= 30e6
        assert CANONICAL_CONV / n >= 10

    def test_residual_built_matches_formula(self):
        model = build_model("residual", ResidualSiameseConfig(), np.random.default_rng(0))
        assert param_count(model) == residual_param_count(ResidualSiameseConfig())

    @pytest.mark.parametrize("arch", ["conv", "residual"])
    def test_desk_formula(self, arch):
        model = desk_model(arch, 0)
        formula = conv_param_count if arch == "conv" else residual_param_count
        assert param_count(model) == formula(model.config)

    def test_merge_head_has_dim_plus_one(self):
        model = build_model("conv", ConvSiameseConfig(), np.random.default_rng(0))
        merge = model.params["merge.weight"].size + model.params["merge.bias"].size
        assert merge == 4097

    def test_residual_out_of_budget_rejected(self):
        with pytest.raises(ValueError):
            ResidualSiameseConfig(stages=(("conv", 256, 3),)).validate()


class TestConfigValidation:
    def test_channels_multiple_of_16(self):
        with pytest.raises(ValueError):
            ConvSiameseConfig.desk(conv_blocks=((10, 16), (7, 20), (4, 16))).validate()

    def test_kernel_steps(self):
        with pytest.raises(ValueError):
            ConvSiameseConfig.desk(conv_blocks=((10, 16), (5, 16), (4, 16))).validate()
        ConvSiameseConfig.desk(conv_blocks=((10, 16), (7, 16), (7, 16)), pool_after=(True, True, False)).validate()

    def test_input_too_small(self):
        with pytest.raises(ValueError):
            ConvSiameseConfig.desk(input_shape=(16, 16, 3)).validate()


class TestMergeHead:
    def test_self_pair_gives_sigmoid_of_bias(self):
        model = desk_model("conv", 1)
        model.merge_bias.data[:] = 0.37
        rng = np.random.default_rng(2)
        for _ in range(10):
            x = rng.random(model.input_shape)
            assert model.predict_pair(x, x).p == 1 / (1 + np.exp(-0.37))

    @pytest.mark.parametrize("arch", ["conv", "residual"])
    def test_pair_symmetry_bit_exact(self, arch):
        model = desk_model(arch, 3, dtype=np.float32)
        rng = np.random.default_rng(4)
        for _ in range(5):
            a, b = rng.random(model.input_shape), rng.random(model.input_shape)
            assert model.predict_pair(a, b).p == model.predict_pair(b, a).p

    def test_hand_computed_two_dim_head(self):
        model = build_model("conv", ConvSiameseConfig.desk(embedding_dim=2), np.random.default_rng(0), np.float64)
        model.merge_weights.data[:] = [[0.7], [-1.2]]
        model.merge_bias.data[:] = 0.3
        e1, e2 = ad.Tensor(np.array([0.9, 0.2])), ad.Tensor(np.array([0.4, 0.6]))
        p, d = model.merge(e1, e2)
        expected = 1 / (1 + np.exp(-(0.7 * 0.5 - 1.2 * 0.4 + 0.3)))
        np.testing.assert_allclose(p.data, [expected], rtol=1e-14)
        np.testing.assert_allclose(d.data, [0.5, 0.4], rtol=1e-14)

    def test_batched_and_cached_paths_agree(self):
        model = desk_model("conv", 5, dtype=np.float64)
        rng = np.random.default_rng(6)
        q = rng.random(model.input_shape)
        support = [rng.random(model.input_shape) for _ in range(3)]
        direct = [model.predict_pair(q, s).p for s in support]
        emb = model.embed_many(np.stack([q, *support]))
        cached = model.merge_probabilities(emb[0], emb[1:])
        np.testing.assert_allclose(cached, direct, rtol=1e-12)

    def test_wrong_input_shape_rejected(self):
        model = desk_model("conv", 0)
        with pytest.raises(ValueError):
            model.predict_pair(np.zeros((32, 32, 3)), np.zeros((32, 32, 3)))


class TestWeightSharing:
    def test_twins_are_one_network(self):
        model = desk_model("conv", 0)
        assert model.twin_1 == model.twin_2
        x = np.random.default_rng(1).random(model.input_shape)
        np.testing.assert_array_equal(model.embed(x).data, model.twin_2(ad.Tensor(x)).data)

    def test_update_changes_both_twins(self):
        model = desk_model("conv", 0)
        before = model.parameter_digest()
        model.params["conv0.bias"].data += 0.01
        assert model.parameter_digest() != before
        x = np.random.default_rng(1).random(model.input_shape)
        # self-pair stays at sigma(bias): both twins saw the same update
        assert model.predict_pair(x, x).p == pytest.approx(0.5, abs=0)

    def test_seeded_build_is_bit_identical(self):
        assert desk_model("residual", 7).parameter_digest() == desk_model("residual", 7).parameter_digest()
        assert desk_model("residual", 7).parameter_digest() != desk_model("residual", 8).parameter_digest()


class TestResidualBlocks:
    def _zeroed_identity(self):
        model = desk_model("residual", 0)
        for name, t in model.params.items():
            if name.startswith("stage1.0.b."):
                t.data[:] = 0
        return model

    def test_identity_block_passes_input_when_branch_is_zero(self):
        model = self._zeroed_identity()
        x = ad.Tensor(np.random.default_rng(0).random((2, 12, 12, 16)), requires_grad=True)
        out = model.embedding.block(x, "stage1.0", "identity")
        np.testing.assert_array_equal(out.data, x.data)

    def test_identity_block_gradient_is_identity(self):
        model = self._zeroed_identity()
        x = ad.Tensor(np.random.default_rng(0).random((1, 8, 8, 16)), requires_grad=True)
        g = np.random.default_rng(1).normal(size=x.shape)
        model.embedding.block(x, "stage1.0", "identity").backward(g)
        np.testing.assert_allclose(x.grad, g, rtol=1e-12)

    def test_projection_block_changes_channels(self):
        model = build_model("residual", ResidualSiameseConfig.desk(stages=(("conv", 32, 1),)),
                            np.random.default_rng(0), np.float64)
        x = ad.Tensor(np.random.default_rng(0).random((1, 10, 10, 16)))
        assert model.embedding.block(x, "stage0.0", "conv").shape == (1, 10, 10, 32)


class TestModelGradients:
    @pytest.mark.parametrize("arch", ["conv", "residual"])
    def test_gradient_check_desk_model(self, arch):
        for seed in range(5):
            assert model_gradient_error(arch, seed) <= 1e-5


class TestSaveLoad:
    @pytest.mark.parametrize("arch", ["conv", "residual"])
    def test_round_trip(self, tmp_path, arch):
        model = desk_model(arch, 2, dtype=np.float32)
        save_model(model, tmp_path / "ckpt")
        back = load_model(tmp_path / "ckpt")
        assert back.architecture == arch
        assert back.config == model.config
        assert back.parameter_digest() == model.parameter_digest()
