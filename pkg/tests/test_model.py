import numpy as np
import pytest

from vesselnet import tensor as T
from vesselnet.checks import check_function
from vesselnet.decoder import BFDecoder, DecodeStage, FuseTop
from vesselnet.encoder import ConfigurationError, ConvBlock, HiEncoder, TextureAwareLayer, crop_to, pad_to_multiple
from vesselnet.model import ABLATIONS, ModelConfig, SegModel
from vesselnet.tensor import DimensionError, Tensor

RNG = np.random.default_rng


# -- encoder -------------------------------------------------------------------

def test_conv_block_zero_propagation():
    blk = ConvBlock(3, 3, rng=RNG(0))
    blk.conv.weight.data[...] = 0.0
    out = blk(Tensor(RNG(0).normal(size=(1, 3, 5, 5)).astype(np.float32)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_conv_block_same_padding():
    assert ConvBlock(4, 4, rng=RNG(1))(Tensor(np.ones((1, 4, 9, 9)))).shape == (1, 4, 9, 9)


def test_conv_block_literal_residual_formula():
    blk = ConvBlock(2, 2, rng=RNG(2), dtype=np.float64)
    x = Tensor(RNG(2).normal(size=(1, 2, 4, 4)))
    plain = ConvBlock(2, 2, residual="none", rng=RNG(2), dtype=np.float64)(x).data
    lrelu = np.where(plain > 0, plain, 0.01 * plain)
    np.testing.assert_allclose(blk(x).data, lrelu + plain, rtol=1e-14)


def test_conv_block_gradient():
    blocks = {dt: ConvBlock(2, 2, rng=RNG(3), dtype=dt) for dt in (np.float32, np.float64)}
    x = RNG(3).normal(size=(1, 2, 5, 5))
    assert check_function(lambda t: blocks[t.dtype.type](t), [x], "float32") < 1e-3


def test_downsample_halves_and_doubles():
    layer = TextureAwareLayer(4, rng=RNG(4))
    skip, down = layer(Tensor(RNG(4).normal(size=(1, 4, 16, 16)).astype(np.float32)))
    assert skip.shape == (1, 4, 16, 16) and down.shape == (1, 8, 8, 8)


def test_downsample_window_sum_pre_norm():
    layer = TextureAwareLayer(1, rng=RNG(5), dtype=np.float64)
    conv = layer.down.conv
    conv.weight.data[...] = 1.0
    conv.bias.data[...] = 0.0
    pre = conv(Tensor(np.full((1, 1, 6, 6), 2.5))).data
    np.testing.assert_array_equal(pre, np.full((1, 2, 3, 3), 10.0))


def test_three_downsamples_on_cube():
    x = Tensor(RNG(6).normal(size=(1, 48, 64, 64, 64)).astype(np.float32))
    enc = HiEncoder(1, depth=3, base_width=48, nd=3, rng=RNG(6))
    shapes = []
    for layer in enc.layers:
        x = layer.down(x)
        shapes.append(x.shape)
    assert shapes == [(1, 96, 32, 32, 32), (1, 192, 16, 16, 16), (1, 384, 8, 8, 8)]


def test_encoder_ladder_2d():
    enc = HiEncoder(3, depth=4, base_width=48, rng=RNG(7))
    out = enc(Tensor(RNG(7).normal(size=(1, 3, 64, 64)).astype(np.float32)))
    assert [s.shape for s in out.skips] == [(1, 48, 64, 64), (1, 96, 32, 32), (1, 192, 16, 16), (1, 384, 8, 8)]
    assert out.bottom.shape == (1, 768, 4, 4)


def test_encoder_depth_zero_is_stem_only():
    enc = HiEncoder(2, depth=0, base_width=4, rng=RNG(8), dtype=np.float64)
    x = Tensor(RNG(8).normal(size=(1, 2, 5, 5)))
    out = enc(x)
    assert out.skips == []
    np.testing.assert_array_equal(out.bottom.data, enc.stem(x).data)


def encoder_param_count(c_in, w, depth, nd):
    k3, k2 = 3 ** nd, 2 ** nd
    total = c_in * w * k3 + w
    for i in range(depth):
        c = w * 2 ** i
        total += c * c * k3 + c + 2 * c  # block conv + norm affine
        total += c * 2 * c * k2 + 2 * c + 2 * 2 * c  # down conv + norm affine
    return total


@pytest.mark.parametrize("nd", [2, 3])
def test_encoder_parameter_count_closed_form(nd):
    enc = HiEncoder(1, depth=3, base_width=6, nd=nd, rng=RNG(9))
    assert enc.num_parameters() == encoder_param_count(1, 6, 3, nd)
    assert enc.stem.weight.shape[2:] == (3,) * nd


def test_encoder_3d_dispatch():
    enc = HiEncoder(1, depth=2, base_width=4, nd=3, rng=RNG(10))
    out = enc(Tensor(np.zeros((1, 1, 8, 8, 8), np.float32)))
    assert out.bottom.shape == (1, 16, 2, 2, 2)


def test_encoder_input_errors():
    enc = HiEncoder(1, depth=2, base_width=4)
    with pytest.raises(ConfigurationError, match="pad by"):
        enc(Tensor(np.zeros((1, 1, 10, 12), np.float32)))
    with pytest.raises(ConfigurationError):
        enc(Tensor(np.zeros((1, 1, 8, 8, 8), np.float32)))
    with pytest.raises(DimensionError):
        enc(Tensor(np.zeros((1, 8, 8), np.float32)))


def test_pad_and_crop_roundtrip():
    x = RNG(11).normal(size=(1, 2, 10, 13))
    padded, spatial = pad_to_multiple(x, 8)
    assert padded.shape == (1, 2, 16, 16)
    np.testing.assert_array_equal(crop_to(padded, spatial), x)


# -- decoder -------------------------------------------------------------------

def test_fuse_top_zero_global_is_projected_skip():
    top = FuseTop(4, rng=RNG(12), dtype=np.float64)
    f = Tensor(RNG(12).normal(size=(1, 4, 8, 8)))
    out = top(Tensor(np.zeros((1, 8, 4, 4))), f)
    np.testing.assert_allclose(out.data, top.proj(f).data, rtol=1e-14)


def test_fuse_top_channel_bookkeeping():
    top = FuseTop(384, rng=RNG(13))
    out = top(Tensor(np.zeros((1, 768, 4, 4), np.float32)), Tensor(np.zeros((1, 384, 8, 8), np.float32)))
    assert out.shape == (1, 384, 8, 8)


def test_fuse_top_gradient_reaches_both_inputs():
    top = FuseTop(3, rng=RNG(14), dtype=np.float64)
    g = Tensor(RNG(14).normal(size=(1, 6, 2, 2)), requires_grad=True)
    f = Tensor(RNG(15).normal(size=(1, 3, 4, 4)), requires_grad=True)
    (top(g, f) * top(g, f)).sum().backward()
    assert np.abs(g.grad).sum() > 0 and np.abs(f.grad).sum() > 0


def test_decode_stage_doubles_extent():
    st = DecodeStage(4, rng=RNG(16))
    out = st(Tensor(np.ones((1, 8, 8, 8), np.float32)), Tensor(np.ones((1, 4, 16, 16), np.float32)))
    assert out.shape == (1, 4, 16, 16)


def test_decode_stage_zero_skip_still_nonzero():
    st = DecodeStage(3, rng=RNG(17), dtype=np.float64)
    out = st(Tensor(RNG(17).normal(size=(1, 6, 4, 4))), Tensor(np.zeros((1, 3, 8, 8))))
    assert np.abs(out.data).max() > 0


def test_decoder_full_ladder():
    dec = BFDecoder(depth=4, base_width=48, rng=RNG(18))
    assert dec.stage_channels() == [384, 192, 96, 48]
    skips = [Tensor(np.zeros((1, 48 * 2 ** k, 64 // 2 ** k, 64 // 2 ** k), np.float32)) for k in range(4)]
    out = dec(Tensor(np.zeros((1, 768, 4, 4), np.float32)), skips)
    assert out.shape == (1, 48, 64, 64)


def test_decoder_wrong_skip_count():
    dec = BFDecoder(depth=2, base_width=4)
    with pytest.raises(DimensionError):
        dec(Tensor(np.zeros((1, 16, 2, 2), np.float32)), [Tensor(np.zeros((1, 4, 8, 8), np.float32))])


# -- assembled model -----------------------------------------------------------

def test_semantic_default_model_contract():
    model = SegModel(ModelConfig(in_channels=3))
    out = model(np.random.default_rng(19).normal(size=(1, 3, 64, 64)))
    assert out.shape == (1, 2, 64, 64)


def test_instance_heads_contract():
    model = SegModel(ModelConfig(mode="instance", num_types=4, depth=2, base_width=4, n_blocks=1, d_state=4))
    np_, hv, nt = model(np.random.default_rng(20).normal(size=(2, 1, 16, 16)))
    assert np_.shape == (2, 2, 16, 16) and hv.shape == (2, 2, 16, 16) and nt.shape == (2, 4, 16, 16)
    assert np.all(np.abs(hv.data) <= 1.0)


@pytest.mark.parametrize("name", sorted(ABLATIONS))
@pytest.mark.parametrize("dims", [2, 3])
def test_ablation_matrix_shapes(name, dims):
    cfg = ModelConfig.variant(name, dims=dims, depth=2, base_width=4, n_blocks=1, d_state=4)
    model = SegModel(cfg)
    out = model(np.zeros((1, 1) + (8,) * dims))
    assert out.shape == (1, 2) + (8,) * dims
    ta, mb, bf = ABLATIONS[name]
    assert bool(model.bottleneck.layers) == mb
    assert (model.decoder.top is not None) == bf


def test_config_validation_and_roundtrip():
    with pytest.raises(ConfigurationError):
        ModelConfig(dims=4).validate()
    with pytest.raises(ConfigurationError):
        ModelConfig(mode="instance", num_types=1).validate()
    cfg = ModelConfig.variant("mamba", depth=3)
    back = ModelConfig.from_dict({k: str(v) for k, v in cfg.to_dict().items()})
    assert back == cfg


def test_model_seed_determinism():
    a = SegModel(ModelConfig(depth=2, base_width=4, n_blocks=1, d_state=4, seed=3))
    b = SegModel(ModelConfig(depth=2, base_width=4, n_blocks=1, d_state=4, seed=3))
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))


def test_model_float64_mode():
    model = SegModel(ModelConfig(depth=1, base_width=2, n_blocks=1, d_state=2, dtype="float64"))
    assert model(np.zeros((1, 1, 4, 4))).dtype == np.float64
    assert T.get_default_dtype() == np.float32
