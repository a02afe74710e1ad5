# -*- coding: utf-8 -*-
import numpy as np
import pytest

from src.core.errors import ContractViolation
from src.core.masking import MaskSchedule
from src.core.numerics import AdamW, Rng
from src.core.s2a import (S2AModel, build_s2a_input, layer_probabilities, make_s2a_example, resolve_layer_steps,
                          s2a_decode_layer, s2a_generate, s2a_loss, s2a_train_step, sample_layer,
                          sum_condition_embeddings)
from src.models import DecodeConfig, TransformerConfig

CONFIG = TransformerConfig(layers=1, model_dim=16, ffn_dim=32, heads=2)
LAYERS = 3
CODEBOOK = 8
SEM_VOCAB = 10


def _model(seed=1):
    return S2AModel(CONFIG, SEM_VOCAB, LAYERS, CODEBOOK, Rng(seed))


def _data(seed, frames=8):
    rng = np.random.default_rng(seed)
    return rng.integers(0, SEM_VOCAB, frames), rng.integers(0, CODEBOOK, (LAYERS, frames))


# ---------- 层抽样 ----------

@pytest.mark.parametrize("n", [1, 2, 4, 12])
def test_layer_probabilities_formula(n):
    p = layer_probabilities(n)
    j = np.arange(1, n + 1)
    np.testing.assert_allclose(p, 2 * (n + 1 - j) / (n * (n + 1)))
    assert p.sum() == pytest.approx(1.0)
    assert np.all(np.diff(p) < 0) or n == 1


def test_sample_layer_frequencies_within_three_sigma():
    n, draws = 4, 100000
    rng = Rng(2)
    counts = np.bincount([sample_layer(n, rng) for _ in range(draws)], minlength=n + 1)[1:]
    p = layer_probabilities(n)
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) <= 3 * sigma)


def test_single_layer_always_sampled():
    assert {sample_layer(1, Rng(3)) for _ in range(5)} == {1}


# ---------- 步数与对齐 ----------

def test_resolve_layer_steps_presets_and_lists():
    assert resolve_layer_steps('desk', 4) == [8, 4, 1, 1]
    assert resolve_layer_steps('fast', 3) == [10, 1, 1]
    assert resolve_layer_steps('quality', 2) == [40, 16]
    assert resolve_layer_steps('3,2,1', 3) == [3, 2, 1]
    assert resolve_layer_steps([5, 5], 2) == [5, 5]


@pytest.mark.parametrize("value", ['1,2', [1, 0, 1], 'a,b,c'])
def test_resolve_layer_steps_rejects_bad_values(value):
    with pytest.raises(ContractViolation) as err:
        resolve_layer_steps(value, 3)
    assert err.value.code == "E_CONFIG_VALUE"


def test_misaligned_inputs_rejected():
    semantic, grid = _data(4)
    with pytest.raises(ContractViolation) as err:
        build_s2a_input(semantic[:-1], grid, 2, 1, grid[0, 2:], 0.5)
    assert err.value.code == "E_ALIGNMENT"
    with pytest.raises(ContractViolation) as err:
        s2a_decode_layer(_model(), semantic, grid[:, :3], grid[:, 3:-1], 1, DecodeConfig(steps=2), Rng(5))
    assert err.value.code == "E_ALIGNMENT"
    with pytest.raises(ContractViolation) as err:
        s2a_generate(_model(), semantic[:3], grid[:, :3], 'desk', DecodeConfig(steps=2), Rng(5))
    assert err.value.code == "E_ALIGNMENT"


# ---------- 由粗到细 ----------

@pytest.mark.parametrize("layer", [1, 2, 3])
def test_condition_embeddings_ignore_finer_layers(layer):
    model = _model(6)
    semantic, grid = _data(7)
    prompt, target = grid[:, :3], grid[:, 3:]
    masked = np.full(5, model.mask_id)
    base = sum_condition_embeddings(model, semantic, prompt, target, layer, masked).data

    finer = target.copy()
    finer[layer - 1:] = (finer[layer - 1:] + 1) % CODEBOOK
    np.testing.assert_array_equal(sum_condition_embeddings(model, semantic, prompt, finer, layer, masked).data, base)

    if layer > 1:
        coarser = target.copy()
        coarser[layer - 2] = (coarser[layer - 2] + 1) % CODEBOOK
        changed = sum_condition_embeddings(model, semantic, prompt, coarser, layer, masked).data
        assert not np.allclose(changed, base)


@pytest.mark.parametrize("layer", [1, 2])
def test_layer_decoding_ignores_finer_layers(layer):
    model = _model(8)
    semantic, grid = _data(9)
    prompt, target = grid[:, :3], grid[:, 3:]
    cfg = DecodeConfig(steps=3, top_k=CODEBOOK)
    base = s2a_decode_layer(model, semantic, prompt, target, layer, cfg, Rng(10))
    finer = target.copy()
    finer[layer - 1:] = (finer[layer - 1:] + 3) % CODEBOOK
    np.testing.assert_array_equal(s2a_decode_layer(model, semantic, prompt, finer, layer, cfg, Rng(10)), base)


def test_generate_shape_and_determinism():
    model = _model(11)
    semantic, grid = _data(12, frames=9)
    cfg = DecodeConfig(steps=3, top_k=4)
    out = s2a_generate(model, semantic, grid[:, :4], 'desk', cfg, Rng(13))
    assert out.shape == (LAYERS, 5)
    assert out.min() >= 0 and out.max() < CODEBOOK
    np.testing.assert_array_equal(out, s2a_generate(model, semantic, grid[:, :4], [8, 4, 1], cfg, Rng(13)))


# ---------- 训练 ----------

def test_example_masks_only_chosen_layer_target():
    model = _model(14)
    semantic, grid = _data(15, frames=10)
    rng = Rng(16)
    for _ in range(40):
        ex = make_s2a_example(semantic, grid, model, MaskSchedule(), rng, prompt_drop=0.3)
        assert ex.mask.any()
        assert not ex.mask[:ex.prompt_frames].any()
        assert np.all(ex.grid[ex.layer - 1][ex.mask] == model.mask_id)
        np.testing.assert_array_equal(ex.targets, grid[ex.layer - 1, 10 - len(ex.semantic):])
        np.testing.assert_array_equal(ex.positions, np.arange(10 - len(ex.semantic), 10) + 0.5)


def test_example_rejects_wrong_grid_shape():
    semantic, grid = _data(17)
    with pytest.raises(ContractViolation) as err:
        make_s2a_example(semantic, grid[:2], _model(), MaskSchedule(), Rng(18))
    assert err.value.code == "E_ALIGNMENT"


def test_loss_and_train_step_are_finite():
    model = _model(19)
    batch = [_data(20, 6), _data(21, 9)]
    examples = [make_s2a_example(s, g, model, MaskSchedule(), Rng(22)) for s, g in batch]
    assert np.isfinite(s2a_loss(model, examples).loss.item())
    opt = AdamW(model.parameters(), lr=1e-3, warmup=2)
    assert np.isfinite(s2a_train_step(model, opt, batch, MaskSchedule(), Rng(23)))
