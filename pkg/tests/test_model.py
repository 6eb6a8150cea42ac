import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timae import tensor as T
from timae.errors import ConfigError, ContractError, ParameterError, ShapeError
from timae.model import (
    MASK_STRATEGIES,
    ModelConfig,
    TiMaeModel,
    full_visible,
    make_mask,
    n_masked_for,
    positional_encoding,
)
from timae.tensor import Tensor


def runs_of(masked_idx):
    """Lengths of maximal consecutive runs in a sorted index array."""
    if masked_idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(masked_idx) != 1)
    edges = np.concatenate([[-1], breaks, [masked_idx.size - 1]])
    return np.diff(edges).tolist()


def small(**kw):
    base = dict(window_len=16, d_model=8, d_decoder=4, n_heads=2, enc_layers=1, dec_layers=1, dropout_p=0.0)
    base.update(kw)
    return ModelConfig(**base)


# --------------------------------------------------------------- config
def test_default_config_matches_table_defaults():
    c = ModelConfig()
    assert (c.d_model, c.d_decoder, c.n_heads, c.enc_layers, c.dec_layers) == (64, 32, 4, 2, 2)
    assert (c.mask_ratio, c.dropout_p, c.conv_kernel, c.norm) == (0.75, 0.1, 3, "pre")


@pytest.mark.parametrize("kw", [dict(n_heads=3), dict(mask_ratio=1.0), dict(norm="mid"), dict(d_model=0)])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_config_dict_round_trip():
    c = small(norm="post", use_encoder_pe=False)
    assert ModelConfig.from_dict(c.to_dict()) == c


# --------------------------------------------------------------- masking
def test_zero_ratio_masks_nothing():
    m = make_mask(10, "random", 0.0, np.random.default_rng(0))
    assert m.n_masked == 0 and m.n_visible == 10


def test_random_mask_counts():
    m = make_mask(100, "random", 0.75, np.random.default_rng(0))
    assert (m.n_masked, m.n_visible) == (75, 25)


def test_periodic_mask_three_runs():
    m = make_mask(16, "periodic", 0.75, np.random.default_rng(0))
    assert m.n_masked == 12
    assert runs_of(m.masked_idx) == [4, 4, 4]
    starts = m.masked_idx[[0, 4, 8]]
    assert np.diff(starts).tolist() == [5, 5]


def test_continuous_masks_tail():
    m = make_mask(10, "continuous", 0.3, np.random.default_rng(0))
    assert m.masked_idx.tolist() == [7, 8, 9]


def test_split_alternates_by_draw():
    rng = np.random.default_rng(0)
    assert make_mask(10, "split", 0.3, rng, draw=0).masked_idx.tolist() == [7, 8, 9]
    assert make_mask(10, "split", 0.3, rng, draw=1).masked_idx.tolist() == [0, 1, 2]


def test_mask_everything_rejected():
    with pytest.raises(ParameterError):
        make_mask(4, "random", 0.9, np.random.default_rng(0))


def test_unknown_strategy():
    with pytest.raises(ParameterError):
        make_mask(8, "blocky", 0.5, np.random.default_rng(0))


def test_half_up_rounding():
    assert n_masked_for(10, 0.25) == 3
    assert n_masked_for(10, 0.35) == 4


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 400), st.floats(0.0, 0.95), st.sampled_from(MASK_STRATEGIES), st.integers(0, 2**31))
def test_mask_partition(L, r, strategy, seed):
    n = n_masked_for(L, r)
    if n >= L:
        return
    m = make_mask(L, strategy, r, np.random.default_rng(seed))
    assert m.n_masked == n
    assert np.array_equal(np.union1d(m.visible_idx, m.masked_idx), np.arange(L))
    assert np.intersect1d(m.visible_idx, m.masked_idx).size == 0
    assert np.all(np.diff(m.visible_idx) > 0) and np.all(np.diff(m.masked_idx) > 0)


# --------------------------------------------------------- positional enc
def test_pe_values():
    pe = positional_encoding(50, 16)
    assert np.all(pe[0, 0::2] == 0) and np.all(pe[0, 1::2] == 1)
    assert pe[1, 0] == pytest.approx(0.841471, abs=1e-6)
    assert np.all(np.abs(pe) <= 1)


def test_pe_odd_width():
    with pytest.raises(ConfigError):
        positional_encoding(4, 5)


# ---------------------------------------------------------------- embed
def test_embed_keeps_length():
    model = TiMaeModel(small(), np.random.default_rng(0))
    assert model.embed(np.zeros((2, 16, 1))).shape == (2, 16, 8)


def test_embed_zero_conv_gives_pe():
    model = TiMaeModel(small(), np.random.default_rng(0), dtype=np.float64)
    model.params["embed.kernel"].data[...] = 0
    model.params["embed.bias"].data[...] = 0
    out = model.embed(np.random.default_rng(1).normal(size=(3, 16, 1))).data
    assert np.array_equal(out, np.broadcast_to(positional_encoding(16, 8), out.shape))
    model_nope = TiMaeModel(small(use_encoder_pe=False), np.random.default_rng(0))
    model_nope.params["embed.kernel"].data[...] = 0
    model_nope.params["embed.bias"].data[...] = 0
    assert np.all(model_nope.embed(np.ones((1, 16, 1))).data == 0)


def test_embed_channel_mismatch():
    with pytest.raises(ShapeError):
        TiMaeModel(small(), np.random.default_rng(0)).embed(np.zeros((1, 16, 2)))


# --------------------------------------------------------------- encoder
def _zero_residual_branches(model, prefix):
    for name, p in model.params.items():
        if name.startswith(prefix) and (".attn.o." in name or ".mlp.fc2." in name):
            p.data[...] = 0


def test_encode_with_identity_blocks_is_gather():
    model = TiMaeModel(small(), np.random.default_rng(0), dtype=np.float64)
    _zero_residual_branches(model, "encoder")
    tokens = model.embed(np.random.default_rng(1).normal(size=(2, 16, 1)))
    mask = make_mask(16, "random", 0.75, np.random.default_rng(2))
    assert np.array_equal(model.encode(tokens, mask).data, tokens.data[:, mask.visible_idx])


def test_encode_shape_defaults():
    model = TiMaeModel(ModelConfig(window_len=100), np.random.default_rng(0))
    mask = make_mask(100, "random", 0.75, np.random.default_rng(0))
    with T.no_grad():
        assert model.encode(model.embed(np.zeros((2, 100, 1))), mask).shape == (2, 25, 64)


def test_encode_is_permutation_equivariant_without_pe():
    model = TiMaeModel(small(use_encoder_pe=False), np.random.default_rng(0), dtype=np.float64)
    tokens = model.embed(np.random.default_rng(1).normal(size=(1, 16, 1)))
    a = model.encode(tokens, np.array([2, 5, 9, 11])).data
    b = model.encode(tokens, np.array([2, 9, 5, 11])).data
    assert np.allclose(a[:, [0, 2, 1, 3]], b, atol=1e-12)


def test_encode_needs_visible_tokens():
    model = TiMaeModel(small(), np.random.default_rng(0))
    with pytest.raises(ContractError):
        model.encode(model.embed(np.zeros((1, 16, 1))), np.zeros((1, 0), dtype=int))


# --------------------------------------------------------------- decoder
@pytest.mark.parametrize("ratio", [0.0, 0.25, 0.75, 0.9])
def test_decode_shape(ratio):
    model = TiMaeModel(small(), np.random.default_rng(0))
    mask = make_mask(16, "random", ratio, np.random.default_rng(0))
    assert model.reconstruct(np.zeros((3, 16, 1)), mask).shape == (3, 16, 1)


def test_decode_to_fewer_channels():
    model = TiMaeModel(small(in_channels=7, out_channels=1), np.random.default_rng(0))
    mask = make_mask(16, "random", 0.75, np.random.default_rng(0))
    assert model.reconstruct(np.zeros((2, 16, 7)), mask).shape == (2, 16, 1)


def test_zeroed_decoder_outputs_projection_bias():
    model = TiMaeModel(small(out_channels=2, in_channels=2), np.random.default_rng(0), dtype=np.float64)
    for name, p in model.params.items():
        if name.startswith("decoder."):
            p.data[...] = 0
    model.params["decoder.proj.bias"].data[...] = [0.5, -1.5]
    out = model.reconstruct(np.random.default_rng(1).normal(size=(2, 16, 2)), make_mask(16, "random", 0.5, np.random.default_rng(0)))
    assert np.allclose(out.data, [0.5, -1.5], atol=1e-12)


def test_reconstruct_full_shape():
    model = TiMaeModel(ModelConfig(window_len=96, in_channels=7, out_channels=7), np.random.default_rng(0))
    mask = make_mask(96, "random", 0.75, np.random.default_rng(0))
    with T.no_grad():
        assert model.reconstruct(np.zeros((2, 96, 7)), mask).shape == (2, 96, 7)


def test_inference_is_deterministic():
    model = TiMaeModel(small(dropout_p=0.3), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(2, 16, 1))
    mask = make_mask(16, "random", 0.75, np.random.default_rng(0))
    assert np.array_equal(model.reconstruct(x, mask).data, model.reconstruct(x, mask).data)


def test_full_visible_mask():
    m = full_visible(5)
    assert m.n_visible == 5 and m.n_masked == 0


def test_parameter_count_default():
    model = TiMaeModel(ModelConfig(), np.random.default_rng(0))
    assert model.num_parameters() == 127_777


def test_mask_token_starts_at_zero():
    model = TiMaeModel(ModelConfig(), np.random.default_rng(0))
    assert np.all(model.params["decoder.mask_token"].data == 0)


def test_set_parameter_shape_guard():
    model = TiMaeModel(small(), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        model.set_parameter("embed.bias", Tensor(np.zeros(3)))
