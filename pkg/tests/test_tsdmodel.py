import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mmtsd.errors import ConfigurationError, InputError
from mmtsd.tsdmodel import (PROB_EPS, ModelConfig, TSDModel, bce_loss, bce_with_logits,
                            build_decoder_mask, predict_tracks)

from oracles import bce_loop, sigmoid_loop

SMALL = ModelConfig(d_a=4, d_model=16, n_heads=4, d_ff=32, enc_layers=2, dec_layers=2, dropout=0.0)


def test_mask_examples():
    assert np.array_equal(build_decoder_mask([1, 1, 1]), np.eye(3, dtype=bool))
    m = build_decoder_mask([2, 1])
    assert {tuple(ij) for ij in np.argwhere(m)} == {(0, 0), (0, 1), (1, 0), (1, 1), (2, 2)}
    assert build_decoder_mask([1, 2, 1]).sum() == 6
    assert build_decoder_mask([1]).tolist() == [[True]]
    with pytest.raises(ConfigurationError):
        build_decoder_mask([3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 2), min_size=1, max_size=12))
def test_mask_is_block_diagonal(groups):
    m = build_decoder_mask(groups)
    assert m.diagonal().all() and np.array_equal(m, m.T)
    assert m.sum() == sum(g * g for g in groups)


def test_predict_tracks_examples():
    mem = torch.randn(5, 8, dtype=torch.float64)
    assert torch.equal(predict_tracks(torch.zeros(2, 8, dtype=torch.float64), mem).probs,
                       torch.full((2, 5), 0.5, dtype=torch.float64))
    big = predict_tracks(1e3 * mem[:1], mem).probs[0, 0]
    assert big > 1 - 1e-12 and big < 1.0


def test_predict_tracks_matches_scalar_loop():
    g = torch.Generator().manual_seed(0)
    dec = torch.randn(3, 7, generator=g, dtype=torch.float64)
    mem = torch.randn(5, 7, generator=g, dtype=torch.float64)
    expected = torch.tensor(sigmoid_loop(dec.tolist(), mem.tolist()), dtype=torch.float64)
    assert (predict_tracks(dec, mem).probs - expected).abs().max() < 1e-7


def test_bce_examples():
    y = torch.tensor([[1.0, 0.0, 1.0, 1.0]])
    assert bce_loss(torch.full((1, 4), 0.5), y).item() == pytest.approx(math.log(2), abs=1e-7)
    perfect = bce_loss(y.double(), y.double()).item()
    assert perfect <= -math.log(1 - PROB_EPS) + 1e-15
    with pytest.raises(InputError):
        bce_loss(torch.full((1, 3), 0.5), y)


def test_bce_matches_direct_formula():
    g = torch.Generator().manual_seed(1)
    p = torch.rand(2, 8, generator=g, dtype=torch.float64)
    y = (torch.rand(2, 8, generator=g) < 0.5).double()
    assert abs(bce_loss(p, y).item() - bce_loop(p.tolist(), y.tolist())) < 1e-9


def test_logit_loss_agrees_with_probability_loss():
    g = torch.Generator().manual_seed(2)
    z = torch.randn(3, 10, generator=g, dtype=torch.float64)
    y = (torch.rand(3, 10, generator=g) < 0.5).double()
    torch.testing.assert_close(bce_with_logits(z, y), bce_loss(torch.sigmoid(z), y))


def test_encoder_shape_and_errors():
    model = TSDModel(ModelConfig(d_a=4)).eval()
    for T in (1, 7, 30):
        assert model.encode_speech(torch.randn(T, 4)).shape == (T, 192)
    with pytest.raises(InputError):
        model.encode_speech(torch.randn(5, 3))


def test_default_architecture():
    cfg = ModelConfig()
    model = TSDModel(cfg)
    assert len(model.encoder) == 4 and len(model.decoder) == 4
    assert model.encoder[0].self_attn.n_heads == 8
    assert cfg.d_ff == 768 and cfg.d_model == 192


def test_permutation_equivariance_without_positions():
    model = TSDModel(ModelConfig(**{**SMALL.__dict__, "use_positions": False})).double().eval()
    x = torch.randn(6, 4, dtype=torch.float64)
    perm = torch.tensor([1, 0, 2, 3, 5, 4])
    torch.testing.assert_close(model.encode_speech(x[perm]), model.encode_speech(x)[perm])


def test_single_prompt_and_determinism():
    torch.manual_seed(0)
    model = TSDModel(SMALL).eval()
    x, e = torch.randn(9, 4), torch.randn(1, 16)
    a = model(x, e, build_decoder_mask([1])).probs
    b = model(x, e, build_decoder_mask([1])).probs
    assert a.shape == (1, 9) and torch.equal(a, b)
    assert ((a > 0) & (a < 1)).all()


def test_mask_shape_checked():
    model = TSDModel(SMALL).eval()
    mem = model.encode_speech(torch.randn(4, 4))
    with pytest.raises(InputError):
        model.decode_prompts(torch.randn(3, 16), mem, build_decoder_mask([1, 1]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 20))
def test_singleton_independent_of_other_prompts(seed, T):
    torch.manual_seed(seed)
    model = TSDModel(SMALL).eval()
    x = torch.randn(T, 4)
    e = torch.randn(4, 16)
    mask = build_decoder_mask([1, 2, 1])
    base = model(x, e, mask).probs
    e2 = e.clone()
    e2[1:] = torch.randn(3, 16)
    assert torch.equal(model(x, e2, mask).probs[0], base[0])


def test_pair_members_interact():
    torch.manual_seed(0)
    model = TSDModel(SMALL).eval()
    x = torch.randn(8, 4)
    e = torch.randn(2, 16)
    mask = build_decoder_mask([2])
    mem = model.encode_speech(x)
    d1 = model.decode_prompts(e, mem, mask)
    e[0] = torch.randn(16)
    d2 = model.decode_prompts(e, mem, mask)
    assert (d1[1] - d2[1]).norm() > 0


def test_batched_equals_unbatched():
    torch.manual_seed(0)
    model = TSDModel(SMALL).double().eval()
    x = torch.randn(2, 7, 4, dtype=torch.float64)
    e = torch.randn(2, 3, 16, dtype=torch.float64)
    mask = build_decoder_mask([1, 2])
    both = model(x, e, mask).probs
    for b in range(2):
        torch.testing.assert_close(both[b], model(x[b], e[b], mask).probs)


def test_uneven_heads_rejected():
    with pytest.raises(ConfigurationError):
        TSDModel(ModelConfig(d_model=10, n_heads=3))
