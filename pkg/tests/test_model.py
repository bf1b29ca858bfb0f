from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from acrnet import model as M
from acrnet import tensor as T
from acrnet.errors import ConfigurationError, ShapeError
from acrnet.layers import PReLU
from acrnet.tensor import Tensor

from oracles import branch_sum


def small(**kw):
    base = dict(na=8, nt=8, eta=Fraction(1, 4))
    base.update(kw)
    return M.ModelConfig(**base)


@pytest.mark.parametrize("text,expect", [("1/4", Fraction(1, 4)), ("0.125", Fraction(1, 8)),
                                         ("512", Fraction(1, 4)), (Fraction(1, 16), Fraction(1, 16))])
def test_parse_eta(text, expect):
    assert M.parse_eta(text) == expect


@pytest.mark.parametrize("kw", [dict(expansion=0), dict(eta="3/2"), dict(eta="1/3"),
                                dict(quant_bits=0), dict(quant_bits=17), dict(activation="tanh"),
                                dict(na=0), dict(eta="abc")])
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        M.ModelConfig(**kw)


def test_config_derived_fields_and_dict_roundtrip():
    cfg = M.ModelConfig(expansion=3, eta="1/8", quant_bits=4)
    assert cfg.feature_dim == 256 and cfg.group_factor == 12 and cfg.feedback_bits == 1024
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.replace(expansion=1).expansion == 1
    assert "ACRNet-3x" in cfg.label()


def test_output_shapes_and_range(rng):
    m = M.build(small(quant_bits=3), seed=1)
    x = rng.uniform(0, 1, (5, 2, 8, 8)).astype(np.float32)
    v = M.encode(m, x)
    assert v.shape == (5, 32) and v.min() > 0 and v.max() < 1
    assert M.decode(m, v).shape == (5, 2, 8, 8)
    assert M.encode(m, x[0]).shape == (32,)
    with pytest.raises(ShapeError):
        M.encode(m, np.zeros((1, 2, 8, 7)))


def test_untrained_model_outputs_midpoint(rng):
    m = M.build(small(expansion=2), seed=3)
    out = M.reconstruct(m, rng.uniform(0, 1, (4, 2, 8, 8)))
    np.testing.assert_array_equal(out, 0.5)


def test_residual_blocks_start_as_identity(rng):
    m = M.build(small(), seed=0)
    x = Tensor(rng.standard_normal((3, 2, 8, 8)).astype(np.float32))
    with M.inference(m):
        for block in list(m.encoder.blocks) + list(m.decoder.blocks):
            np.testing.assert_array_equal(block(x).data, x.data)


def _randomise(model, rng):
    for name, p in model.named_parameters():
        p.data[...] = rng.uniform(-0.5, 0.5, p.shape)
    for name, buf in model.named_buffers():
        buf[...] = rng.uniform(0.5, 1.5, buf.shape) if "var" in name else rng.uniform(-0.2, 0.2, buf.shape)


@pytest.mark.parametrize("k", [1, 2])
@pytest.mark.parametrize("activation", ["prelu", "sprelu", "lrelu"])
def test_decoder_block_matches_branch_oracle(rng, k, activation):
    m = M.build(small(expansion=k, activation=activation), seed=k)
    _randomise(m, rng)
    x = rng.standard_normal((2, 2, 8, 8)).astype(np.float32)
    for block in m.decoder.blocks:
        block.eval()
        got = block(Tensor(x)).data
        np.testing.assert_allclose(got, branch_sum(block, x), atol=1e-5)


def test_inference_restores_training_mode():
    m = M.build(small())
    assert m.training
    with M.inference(m):
        assert not m.decoder.head.bn.training
        assert not T.grad_enabled()
    assert m.decoder.head.bn.training and T.grad_enabled()


def test_freeze_slopes():
    m = M.build(small())
    m.freeze_slopes(0.3)
    slopes = [mod for mod in m.modules() if isinstance(mod, PReLU)]
    assert slopes and all(not s.alphas.requires_grad for s in slopes)


def test_reconstruct_quant_override(rng):
    m = M.build(small(quant_bits=2), seed=0)
    _randomise(m, rng)
    x = rng.uniform(0, 1, (3, 2, 8, 8)).astype(np.float32)
    with M.inference(m):
        direct = m(Tensor(x)).data
    np.testing.assert_allclose(M.reconstruct(m, x, batch=2), direct, rtol=1e-6)
    plain = M.reconstruct(m, x, quant_bits=0)
    with M.inference(m):
        unq = m.decoder(m.encoder(Tensor(x))).data
    np.testing.assert_allclose(plain, unq, rtol=1e-6)


def test_same_seed_same_weights():
    a, b = M.build(small(), seed=5), M.build(small(), seed=5)
    for (na, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(pa.data, pb.data, err_msg=na)


@given(k=st.integers(1, 4), seed=st.integers(0, 100))
def test_decoder_width_scales_with_expansion(k, seed):
    m = M.build(small(expansion=k), seed=seed)
    for block in m.decoder.blocks:
        assert block.conv7x7.conv.weight.shape == (8 * k, 2, 7, 7)
    assert m.encoder.blocks[0].conv1x9.conv.weight.shape == (2, 2, 1, 9)


def test_single_pixel_perturbation_reaches_output(rng):
    m = M.build(small(), seed=3)
    _randomise(m, rng)
    x = rng.uniform(0, 1, (1, 2, 8, 8)).astype(np.float32)
    y = x.copy()
    y[0, 1, 4, 2] += 0.2
    assert not np.array_equal(M.reconstruct(m, x), M.reconstruct(m, y))


def test_quantised_decoder_centres_features(rng):
    m = M.build(small(quant_bits=4), seed=5)
    _randomise(m, rng)
    mid = np.full((1, m.config.feature_dim), 0.5, np.float32)
    before = M.decode(m, mid)
    m.decoder.fc.weight.data[...] = rng.uniform(-1, 1, m.decoder.fc.weight.shape)
    np.testing.assert_array_equal(M.decode(m, mid), before)
