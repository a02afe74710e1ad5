# -*- coding: utf-8 -*-
import numpy as np
import pytest

from src.core import numerics as F
from src.core.errors import ContractViolation
from src.core.nn import (AdaptiveRMSNorm, MultiHeadAttention, SwiGLU, Transformer, adaptive_rmsnorm,
                         bidirectional_attention, pad_sequences, rope_rotate, sinusoidal_features, swiglu_ffn)
from src.core.numerics import Rng, Tensor, gradient_check
from src.models import TransformerConfig

DIM = 16


def _param(rng, *shape):
    return Tensor(rng.normal(shape), requires_grad=True)


# ---------- 梯度校验（dim 16） ----------

def test_attention_gradient_check():
    rng = Rng(21)
    q, k, v = _param(rng, 1, 2, 3, 8), _param(rng, 1, 2, 3, 8), _param(rng, 1, 2, 3, 8)
    w = rng.normal((1, 2, 3, 8))
    fn = lambda: (bidirectional_attention(q, k, v)[0] * w).sum()
    assert gradient_check(fn, [q, k, v]) <= 1e-2


def test_multi_head_attention_with_rope_gradient_check():
    rng = Rng(22)
    attn = MultiHeadAttention(DIM, 2, rng)
    x = _param(rng, 1, 3, DIM)
    w = rng.normal((1, 3, DIM))
    positions = np.array([0.5, 1.5, 2.5])
    fn = lambda: (attn(x, positions) * w).sum()
    assert gradient_check(fn, [x, attn.wq.weight, attn.wk.weight]) <= 1e-2


def test_rope_gradient_check():
    rng = Rng(23)
    x = _param(rng, 1, 2, 3, 8)
    w = rng.normal((1, 2, 3, 8))
    fn = lambda: (rope_rotate(x, np.array([0.5, 3.0, 7.25])) * w).sum()
    assert gradient_check(fn, [x]) <= 1e-2


def test_swiglu_gradient_check():
    rng = Rng(24)
    ffn = SwiGLU(DIM, 32, rng)
    x = _param(rng, 2, DIM)
    w = rng.normal((2, DIM))
    fn = lambda: (ffn(x) * w).sum()
    assert gradient_check(fn, [x, ffn.w_gate.weight, ffn.w_up.weight, ffn.w_down.weight]) <= 1e-2


def test_swiglu_zero_input_and_shape():
    rng = Rng(25)
    ffn = SwiGLU(DIM, 32, rng)
    np.testing.assert_array_equal(ffn(Tensor(np.zeros((3, DIM)))).data, 0.0)
    x = Tensor(rng.normal((2, 5, DIM)))
    out = swiglu_ffn(x, ffn.w_gate.weight, ffn.w_up.weight, ffn.w_down.weight)
    assert out.shape == x.shape
    np.testing.assert_array_equal(out.data, ffn(x).data)


def test_adaptive_rmsnorm_gradient_check():
    rng = Rng(25)
    x = _param(rng, 2, 3, DIM)
    scale, shift = _param(rng, 2, 1, DIM), _param(rng, 2, 1, DIM)
    w = rng.normal((2, 3, DIM))
    fn = lambda: (adaptive_rmsnorm(x, scale, shift) * w).sum()
    assert gradient_check(fn, [x, scale, shift]) <= 1e-2


def test_adaptive_rmsnorm_module_gradient_check():
    rng = Rng(26)
    norm = AdaptiveRMSNorm(DIM, rng)
    x, cond = _param(rng, 2, 3, DIM), _param(rng, 2, DIM)
    w = rng.normal((2, 3, DIM))
    fn = lambda: (norm(x, cond) * w).sum()
    assert gradient_check(fn, [x, cond, norm.proj.weight]) <= 1e-2


# ---------- RoPE ----------

def test_rope_rejects_odd_head_dim():
    with pytest.raises(ContractViolation) as err:
        rope_rotate(Tensor(np.zeros((1, 1, 2, 7))), np.arange(2))
    assert err.value.code == "E_SHAPE"


def test_rope_preserves_norm():
    x = Tensor(Rng(27).normal((1, 1, 4, 8)))
    rotated = rope_rotate(x, np.array([0.5, 1.5, 10.0, 100.0]))
    np.testing.assert_allclose(np.linalg.norm(rotated.data, axis=-1), np.linalg.norm(x.data, axis=-1), rtol=1e-5)


def test_rope_scores_depend_on_relative_position_only():
    rng = Rng(28)
    q, k = Tensor(rng.normal((1, 1, 3, 8))), Tensor(rng.normal((1, 1, 3, 8)))
    pos = np.array([0.5, 2.0, 4.5])

    def scores(shift):
        qr, kr = rope_rotate(q, pos + shift), rope_rotate(k, pos + shift)
        return (qr @ kr.swapaxes(-1, -2)).data

    np.testing.assert_allclose(scores(0.0), scores(3.7), atol=1e-4)


def test_rope_accepts_per_example_positions():
    x = Tensor(Rng(29).normal((2, 2, 3, 8)))
    per_row = rope_rotate(x, np.array([[0.5, 1.5, 2.5], [3.5, 4.5, 5.5]]))
    np.testing.assert_allclose(per_row.data[0], rope_rotate(x, np.array([0.5, 1.5, 2.5])).data[0], atol=1e-6)
    np.testing.assert_allclose(per_row.data[1], rope_rotate(x, np.array([3.5, 4.5, 5.5])).data[1], atol=1e-6)


# ---------- 注意力与主干 ----------

def test_attention_rejects_empty_sequence():
    empty = Tensor(np.zeros((1, 1, 0, 4)))
    with pytest.raises(ContractViolation) as err:
        bidirectional_attention(empty, empty, empty)
    assert err.value.code == "E_EMPTY"


def test_attention_ignores_padded_keys():
    rng = Rng(30)
    q, k, v = (rng.normal((1, 1, 3, 4)) for _ in range(3))
    garbage = rng.normal((1, 1, 2, 4)) * 100
    pad = lambda a: Tensor(np.concatenate([a, garbage], axis=2))
    key_mask = np.array([[True, True, True, False, False]])

    out, probs = bidirectional_attention(pad(q), pad(k), pad(v), key_mask)
    ref, _ = bidirectional_attention(Tensor(q), Tensor(k), Tensor(v))
    np.testing.assert_allclose(out.data[:, :, :3], ref.data, atol=1e-5)
    assert np.all(probs.data[..., 3:] < 1e-6)


def test_attention_is_bidirectional():
    rng = Rng(31)
    q, k, v = (Tensor(rng.normal((1, 1, 4, 4))) for _ in range(3))
    _, probs = bidirectional_attention(q, k, v)
    assert np.all(probs.data[0, 0, 0, 1:] > 0)


def _config():
    return TransformerConfig(layers=2, model_dim=DIM, ffn_dim=32, heads=2)


def test_transformer_shape_and_determinism():
    x = Tensor(Rng(32).normal((2, 5, DIM)))
    a = Transformer(_config(), Rng(1))
    b = Transformer(_config(), Rng(1))
    out = a(x, np.array([0.3, 0.9]), np.arange(5) + 0.5)
    assert out.shape == (2, 5, DIM)
    np.testing.assert_array_equal(out.data, b(x, np.array([0.3, 0.9]), np.arange(5) + 0.5).data)


def test_transformer_output_ignores_padding_content():
    model = Transformer(_config(), Rng(2))
    rng = Rng(33)
    real = rng.normal((1, 3, DIM))
    padded = np.concatenate([real, rng.normal((1, 2, DIM)) * 10], axis=1)
    mask = np.array([[True, True, True, False, False]])
    out = model(Tensor(padded), np.array([0.5]), np.arange(5) + 0.5, mask)
    ref = model(Tensor(real), np.array([0.5]), np.arange(3) + 0.5)
    np.testing.assert_allclose(out.data[:, :3], ref.data, atol=1e-4)


def test_transformer_rejects_wrong_model_dim():
    model = Transformer(_config(), Rng(3))
    with pytest.raises(ContractViolation):
        model(Tensor(np.zeros((1, 2, DIM + 2))), np.array([0.5]), np.arange(2))


def test_transformer_config_requires_even_head_dim():
    with pytest.raises(ContractViolation):
        TransformerConfig(layers=1, model_dim=12, ffn_dim=16, heads=4).validate()


def test_state_dict_round_trip_reproduces_outputs():
    a = Transformer(_config(), Rng(4))
    b = Transformer(_config(), Rng(5))
    x = Tensor(Rng(34).normal((1, 3, DIM)))
    args = (np.array([0.5]), np.arange(3) + 0.5)
    assert not np.allclose(a(x, *args).data, b(x, *args).data)
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(a(x, *args).data, b(x, *args).data)
    assert a.parameter_count() == sum(p.size for p in a.parameters())


def test_load_state_dict_rejects_mismatch():
    model = Transformer(_config(), Rng(6))
    state = model.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(ContractViolation) as err:
        model.load_state_dict(state)
    assert err.value.code == "E_FORMAT"


def test_sinusoidal_features_shape_and_range():
    feats = sinusoidal_features(np.array([0.1, 1.0]), DIM)
    assert feats.shape == (2, DIM)
    assert np.all(np.abs(feats) <= 1.0)


def test_pad_sequences():
    arr, valid = pad_sequences([np.array([1, 2, 3]), np.array([4])], fill=-1)
    np.testing.assert_array_equal(arr, [[1, 2, 3], [4, -1, -1]])
    np.testing.assert_array_equal(valid, [[True, True, True], [True, False, False]])
    with pytest.raises(ContractViolation):
        pad_sequences([])
