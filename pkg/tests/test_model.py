"""Architecture contracts: shapes, weight sharing, mixing variants, parameter counts."""

import numpy as np
import pytest

from tinycd import Tensor, grad_check, ops
from tinycd.errors import CheckpointCompatibilityError, ConfigurationError, ValidationError
from tinycd.model import MaskBlock, MixBlock, ModelConfig, PixelMLP, TinyCDModel, UpBlock, param_count


def rnd(shape, seed=0, dtype=np.float32):
    return Tensor(np.random.default_rng(seed).standard_normal(shape), dtype=dtype)


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------


def test_backbone_feature_shapes():
    config = ModelConfig(backbone_widths=(8, 16), backbone_strides=(2, 2))
    model = TinyCDModel(config, seed=0)
    features, embedding = model.backbone_forward(rnd((1, 3, 32, 32)))
    assert [f.shape for f in features] == [(1, 8, 16, 16), (1, 16, 8, 8)]
    assert embedding is features[-1]


def test_backbone_shares_weights_between_branches(tiny_model):
    image = rnd((1, 3, 16, 16), seed=3)
    f1, _ = tiny_model.backbone_forward(image)
    f2, _ = tiny_model.backbone_forward(image)
    for a, b in zip(f1, f2):
        np.testing.assert_array_equal(a.data, b.data)


def test_backbone_rejects_non_divisible_input():
    config = ModelConfig(backbone_widths=(8, 16), backbone_strides=(2, 2))
    model = TinyCDModel(config, seed=0)
    with pytest.raises(ConfigurationError, match="divisible by the cumulative stride 4"):
        model.backbone_forward(rnd((1, 3, 30, 30)))


def test_encoder_parameters_exist_once():
    model = TinyCDModel(ModelConfig(), seed=0)
    names = [name for name, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    encoder_weights = [n for n in names if n.startswith("encoder.") and n.endswith(".weight")]
    assert len(encoder_weights) == len(model.config.backbone_widths)


# ---------------------------------------------------------------------------
# mixing block
# ---------------------------------------------------------------------------


def test_mix_subtraction_init_reproduces_difference():
    rng = np.random.default_rng(1)
    block = MixBlock(6, "interleave_grouped", rng, np.float64)
    block.set_subtraction_init()
    x = rnd((2, 6, 8, 8), seed=5, dtype=np.float64)
    y = rnd((2, 6, 8, 8), seed=6, dtype=np.float64)
    pre = block.pre_activation(x, y)
    np.testing.assert_allclose(pre.data, x.data - y.data, atol=1e-6)


def test_mix_weight_counts_by_strategy():
    rng = np.random.default_rng(0)
    grouped = MixBlock(4, "interleave_grouped", rng, np.float32)
    full = MixBlock(4, "concat_conv", rng, np.float32)
    sub = MixBlock(4, "subtraction", rng, np.float32)
    assert grouped.conv_weight_count == 4 * 2 * 3 * 3 == 72
    assert full.conv_weight_count == 4 * (2 * 4) * 3 * 3 == 288
    assert sub.conv_weight_count == 0
    assert grouped.param_count() == 72 + 4 + 4  # weights + biases + prelu slopes


def test_mix_subtraction_of_equal_inputs_is_zero_pre_norm():
    block = MixBlock(3, "subtraction", np.random.default_rng(0), np.float32)
    x = rnd((1, 3, 4, 4), seed=2)
    np.testing.assert_array_equal(block.pre_activation(x, x).data, 0.0)


@pytest.mark.parametrize("strategy", ["interleave_grouped", "subtraction", "concat_conv"])
def test_mix_output_shape_preserved(strategy):
    block = MixBlock(5, strategy, np.random.default_rng(0), np.float32)
    out = block.forward(rnd((2, 5, 6, 6), seed=1), rnd((2, 5, 6, 6), seed=2))
    assert out.shape == (2, 5, 6, 6)


def no_inorm_bias(block, skip=("bias", "mix.bias")):
    # biases consumed directly by instance norm have exactly zero gradient
    # (the norm is shift-invariant), which coordinate-wise finite differences
    # cannot resolve against the 1e-8 denominator floor; they are covered by
    # the invariance test below instead
    return [p for name, p in block.named_parameters() if name not in skip]


def test_mix_gradients_all_strategies():
    for strategy in ("interleave_grouped", "subtraction", "concat_conv"):
        block = MixBlock(3, strategy, np.random.default_rng(4), np.float64)
        x = Tensor(np.random.default_rng(7).standard_normal((1, 3, 4, 4)), requires_grad=True, dtype=np.float64)
        r = Tensor(np.random.default_rng(8).standard_normal((1, 3, 4, 4)), dtype=np.float64)
        inputs = [x] + no_inorm_bias(block)
        err = grad_check(lambda *a: (block.forward(a[0], a[0] * 0.5) * r).sum(), inputs, eps=1e-4)
        assert err <= 1e-4, strategy


def test_bias_before_instance_norm_is_exactly_inert():
    block = MixBlock(3, "interleave_grouped", np.random.default_rng(4), np.float64)
    x = rnd((1, 3, 4, 4), seed=7, dtype=np.float64)
    y = rnd((1, 3, 4, 4), seed=8, dtype=np.float64)
    base = block.forward(x, y).data.copy()
    block.bias.data = block.bias.data + 3.7
    np.testing.assert_allclose(block.forward(x, y).data, base, atol=1e-12)
    out = block.forward(x, y).sum()
    out.backward()
    assert np.abs(block.bias.grad).max() <= 1e-12


# ---------------------------------------------------------------------------
# pixel MLP
# ---------------------------------------------------------------------------


def test_pixel_mlp_spatial_permutation_equivariance():
    rng = np.random.default_rng(0)
    mlp = PixelMLP(6, 1, hidden_layers=2, final_activation="prelu", rng=rng, dtype=np.float64)
    x = np.random.default_rng(1).standard_normal((1, 6, 4, 5))
    perm = np.random.default_rng(2).permutation(4 * 5)
    direct = mlp.forward(Tensor(x, dtype=np.float64)).data
    shuffled = x.reshape(1, 6, -1)[:, :, perm].reshape(1, 6, 4, 5)
    out_shuffled = mlp.forward(Tensor(shuffled, dtype=np.float64)).data
    np.testing.assert_array_equal(out_shuffled.reshape(1, 1, -1), direct.reshape(1, 1, -1)[:, :, perm])


def test_pixel_mlp_sigmoid_head_stays_in_unit_interval():
    mlp = PixelMLP(4, 1, hidden_layers=1, final_activation="sigmoid", rng=np.random.default_rng(0), dtype=np.float32)
    out = mlp.forward(rnd((2, 4, 5, 5), seed=9)).data
    assert out.min() > 0.0 and out.max() < 1.0


def test_pixel_mlp_constructed_channel_mean():
    c = 4
    mlp = PixelMLP(c, 1, hidden_layers=2, final_activation="prelu", rng=np.random.default_rng(0), dtype=np.float64)
    eye = np.eye(c).reshape(c, c, 1, 1)
    for layer in mlp.hidden:
        layer.weight.data = eye.copy()
        layer.bias.data = np.zeros(c)
    mlp.final_weight.data = np.full((1, c, 1, 1), 1.0 / c)
    mlp.final_bias.data = np.zeros(1)
    x = np.random.default_rng(3).random((2, c, 3, 3))  # non-negative, so prelu is identity
    out = mlp.forward(Tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(out[:, 0], x.mean(axis=1), rtol=1e-10)


def test_pixel_mlp_requires_hidden_layer():
    with pytest.raises(ConfigurationError):
        PixelMLP(4, 1, hidden_layers=0, final_activation="prelu", rng=np.random.default_rng(0), dtype=np.float32)


# ---------------------------------------------------------------------------
# mask block / up block
# ---------------------------------------------------------------------------


def test_mask_block_output_is_single_channel():
    block = MaskBlock(5, "interleave_grouped", 2, np.random.default_rng(0), np.float32)
    mask = block.forward(rnd((2, 5, 6, 6), seed=1), rnd((2, 5, 6, 6), seed=2))
    assert mask.shape == (2, 1, 6, 6)


def test_mask_block_equal_inputs_with_subtraction_gives_constant_mask():
    block = MaskBlock(4, "subtraction", 1, np.random.default_rng(0), np.float64)
    x = rnd((1, 4, 6, 6), seed=3, dtype=np.float64)
    mask = block.forward(x, x).data
    # x - x = 0 -> instance norm 0 -> the MLP sees the same vector at every pixel
    assert np.ptp(mask) <= 1e-12


def test_mask_block_gradients():
    block = MaskBlock(3, "interleave_grouped", 1, np.random.default_rng(2), np.float64)
    x = Tensor(np.random.default_rng(5).standard_normal((1, 3, 4, 4)), requires_grad=True, dtype=np.float64)
    y = Tensor(np.random.default_rng(6).standard_normal((1, 3, 4, 4)), requires_grad=True, dtype=np.float64)
    r = Tensor(np.random.default_rng(7).standard_normal((1, 1, 4, 4)), dtype=np.float64)
    err = grad_check(lambda *a: (block.forward(a[0], a[1]) * r).sum(), [x, y] + no_inorm_bias(block), eps=1e-4)
    assert err <= 1e-4


def test_up_block_all_ones_mask_equals_no_mask():
    block = UpBlock(6, 4, np.random.default_rng(0), np.float32)
    u = rnd((1, 6, 8, 8), seed=4)
    ones = Tensor(np.ones((1, 1, 16, 16), dtype=np.float32))
    gated = block.forward(u, ones)
    plain = block.forward(u, None)
    np.testing.assert_array_equal(gated.data, plain.data)
    assert gated.shape == (1, 4, 16, 16)


def test_up_block_mask_resolution_mismatch():
    block = UpBlock(6, 4, np.random.default_rng(0), np.float32)
    with pytest.raises(Exception, match="resolution"):
        block.forward(rnd((1, 6, 8, 8)), Tensor(np.ones((1, 1, 8, 8))))


def test_up_block_gradients_through_upsample_mask_conv():
    block = UpBlock(3, 2, np.random.default_rng(1), np.float64)
    u = Tensor(np.random.default_rng(2).standard_normal((1, 3, 3, 3)), requires_grad=True, dtype=np.float64)
    m = Tensor(np.random.default_rng(3).standard_normal((1, 1, 6, 6)), requires_grad=True, dtype=np.float64)
    r = Tensor(np.random.default_rng(4).standard_normal((1, 2, 6, 6)), dtype=np.float64)
    err = grad_check(lambda *a: (block.forward(a[0], a[1]) * r).sum(), [u, m] + no_inorm_bias(block), eps=1e-4)
    assert err <= 1e-4


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


def test_forward_output_shape_and_range(tiny_model):
    i1 = rnd((2, 3, 16, 16), seed=1)
    i2 = rnd((2, 3, 16, 16), seed=2)
    out = tiny_model.forward(i1, i2)
    assert out.shape == (2, 1, 16, 16)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_forward_rejects_mismatched_pair(tiny_model):
    with pytest.raises(ValidationError, match="pair"):
        tiny_model.forward(rnd((1, 3, 16, 16)), rnd((1, 3, 32, 32)))


def test_forward_is_deterministic_for_fixed_seed(tiny_config):
    i1 = rnd((1, 3, 16, 16), seed=1)
    i2 = rnd((1, 3, 16, 16), seed=2)
    out1 = TinyCDModel(tiny_config, seed=42).forward(i1, i2).data
    out2 = TinyCDModel(tiny_config, seed=42).forward(i1, i2).data
    np.testing.assert_array_equal(out1, out2)


def test_forward_with_masks_resolutions(tiny_model):
    _, masks = tiny_model.forward_with_masks(rnd((1, 3, 16, 16), 1), rnd((1, 3, 16, 16), 2))
    assert [(stride, m.shape[2]) for stride, m in masks] == [(2, 8), (1, 16)]
    for _, m in masks:
        assert m.shape[1] == 1


def test_no_skip_variant_has_no_mask_blocks():
    config = ModelConfig(use_skip_connections=False)
    model = TinyCDModel(config, seed=0)
    assert not any(name.startswith("masks.") for name, _ in model.named_parameters())
    out, masks = model.forward_with_masks(rnd((1, 3, 32, 32), 1), rnd((1, 3, 32, 32), 2))
    assert out.shape == (1, 1, 32, 32)
    assert masks == []


def test_param_count_mixing_block_example():
    block = MixBlock(4, "interleave_grouped", np.random.default_rng(0), np.float32)
    assert block.weight.size + block.bias.size == 76  # c*(2*k*k) weights + c biases


def test_param_count_ordering_across_strategies():
    for width in (2, 4, 8, 16):
        counts = {}
        for strategy in ("subtraction", "interleave_grouped", "concat_conv"):
            config = ModelConfig(
                backbone_widths=(width,),
                backbone_strides=(2,),
                mixing_strategy_bottleneck=strategy,
                mixing_strategy_skip=strategy,
            )
            counts[strategy] = TinyCDModel(config, seed=0).param_count()
        assert counts["subtraction"] < counts["interleave_grouped"] < counts["concat_conv"]


def test_default_model_under_100k_parameters():
    model = TinyCDModel(ModelConfig(), seed=0)
    assert param_count(model) < 100_000


def test_mixing_weight_counts_match_formula():
    model = TinyCDModel(ModelConfig(backbone_widths=(8, 12), backbone_strides=(2, 2)), seed=0)
    counts = model.mixing_weight_counts()
    assert counts["bottleneck"] == 12 * 2 * 9
    assert counts["skip_stride2"] == 8 * 2 * 9
    assert counts["skip_stride1"] == 3 * 2 * 9


def test_bottleneck_and_skip_strategies_can_differ():
    config = ModelConfig(
        mixing_strategy_bottleneck="concat_conv",
        mixing_strategy_skip="subtraction",
        backbone_widths=(6, 8),
        backbone_strides=(2, 2),
    )
    model = TinyCDModel(config, seed=0)
    assert model.bottleneck.strategy == "concat_conv"
    assert all(model.masks[i].mix.strategy == "subtraction" for i in range(len(model.masks)))
    out = model.forward(rnd((1, 3, 16, 16), 1), rnd((1, 3, 16, 16), 2))
    assert out.shape == (1, 1, 16, 16)


def test_stride1_level_is_preferred_skip_source():
    config = ModelConfig(backbone_widths=(8, 12, 16), backbone_strides=(1, 2, 2))
    model = TinyCDModel(config, seed=0)
    plan = model.skip_plan
    assert [(s.level, s.stride) for s in plan] == [(2, 2), (1, 1)]
    out = model.forward(rnd((1, 3, 16, 16), 1), rnd((1, 3, 16, 16), 2))
    assert out.shape == (1, 1, 16, 16)


def test_direct_sigmoid_classifier_variant():
    config = ModelConfig(classifier="direct_sigmoid")
    model = TinyCDModel(config, seed=0)
    out = model.forward(rnd((1, 3, 32, 32), 1), rnd((1, 3, 32, 32), 2))
    assert out.shape == (1, 1, 32, 32)
    assert 0.0 <= out.data.min() and out.data.max() <= 1.0
    mlp_variant = TinyCDModel(ModelConfig(), seed=0)
    assert model.param_count() < mlp_variant.param_count()


def test_load_state_rejects_mismatched_architecture(tiny_config):
    model = TinyCDModel(tiny_config, seed=0)
    other = TinyCDModel(ModelConfig(backbone_widths=(8, 6), backbone_strides=(2, 2), mamb_hidden_layers=1), seed=0)
    state = {name: p.data for name, p in other.named_parameters()}
    with pytest.raises(CheckpointCompatibilityError):
        model.load_state(state)


def test_model_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(backbone_widths=(8,), backbone_strides=(2, 2))
    with pytest.raises(ConfigurationError):
        ModelConfig(backbone_strides=(3, 2, 2))
    with pytest.raises(ConfigurationError):
        ModelConfig(classifier="nope")
    with pytest.raises(ConfigurationError):
        ModelConfig(mixing_strategy_skip="mean")
    roundtrip = ModelConfig.from_dict(ModelConfig().to_dict())
    assert roundtrip == ModelConfig()
    with pytest.raises(ConfigurationError, match="unknown"):
        ModelConfig.from_dict({"widths": [1]})
