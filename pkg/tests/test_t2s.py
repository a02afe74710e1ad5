# -*- coding: utf-8 -*-
import numpy as np
import pytest

from src.core.errors import ContractViolation
from src.core.masking import MaskSchedule
from src.core.numerics import AdamW, Rng
from src.core.t2s import (SEGMENT_PROMPT, SEGMENT_TARGET, SEGMENT_TEXT, TABLE_SEMANTIC, TABLE_TEXT, SemanticVocab,
                          T2SModel, build_prefix_input, make_t2s_example, t2s_generate, t2s_logits, t2s_loss,
                          t2s_train_step)
from src.models import DecodeConfig, TransformerConfig

VOCAB = SemanticVocab(12)
TEXT_VOCAB = 6
CONFIG = TransformerConfig(layers=1, model_dim=16, ffn_dim=32, heads=2)


def _model(seed=1):
    return T2SModel(CONFIG, TEXT_VOCAB, VOCAB, Rng(seed))


# ---------- 词表与前缀 ----------

def test_vocab_reserved_ids():
    assert (VOCAB.mask_id, VOCAB.sep_id, VOCAB.table_size) == (12, 13, 14)


def test_prefix_layout_and_positions():
    x = build_prefix_input([1, 2], [3, 4, 5], [VOCAB.mask_id, 7], VOCAB, TEXT_VOCAB)
    assert len(x) == 2 + 1 + 3 + 2
    assert x.target_offset == 6
    np.testing.assert_array_equal(x.ids, [1, 2, 13, 3, 4, 5, 12, 7])
    np.testing.assert_array_equal(x.table, [TABLE_TEXT] * 2 + [TABLE_SEMANTIC] * 6)
    np.testing.assert_array_equal(x.segment, [SEGMENT_TEXT] * 2 + [SEGMENT_PROMPT] * 4 + [SEGMENT_TARGET] * 2)
    # 文本铺满 5 帧语义轴；提示与目标位于帧中心
    np.testing.assert_allclose(x.positions, [1.25, 3.75, 0.0, 0.5, 1.5, 2.5, 3.5, 4.5])
    np.testing.assert_array_equal(x.loss_mask, x.segment == SEGMENT_TARGET)


def test_dropped_prompt_keeps_target_positions():
    full = build_prefix_input([1], [3, 4, 5], [7, 8], VOCAB, TEXT_VOCAB)
    dropped = build_prefix_input([1], [], [7, 8], VOCAB, TEXT_VOCAB, dropped_prompt_frames=3)
    assert dropped.target_offset == 2
    np.testing.assert_allclose(dropped.positions[dropped.target_offset:], full.positions[full.target_offset:])
    np.testing.assert_allclose(dropped.positions[0], full.positions[0])


@pytest.mark.parametrize("text, prompt, target", [
    ([6], [], [1]),
    ([1], [VOCAB.mask_id], [1]),
    ([1], [], [VOCAB.sep_id]),
    ([1], [-1], [1]),
])
def test_prefix_rejects_reserved_or_out_of_range_ids(text, prompt, target):
    with pytest.raises(ContractViolation) as err:
        build_prefix_input(text, prompt, target, VOCAB, TEXT_VOCAB)
    assert err.value.code == "E_RESERVED_ID"


def test_prefix_rejects_empty_text_and_double_prompt():
    with pytest.raises(ContractViolation) as err:
        build_prefix_input([], [1], [2], VOCAB, TEXT_VOCAB)
    assert err.value.code == "E_EMPTY"
    with pytest.raises(ContractViolation) as err:
        build_prefix_input([1], [1], [2], VOCAB, TEXT_VOCAB, dropped_prompt_frames=2)
    assert err.value.code == "E_RANGE"


# ---------- 训练样本 ----------

def test_example_masks_only_target_segment():
    semantic = np.arange(10) % VOCAB.size
    rng = Rng(2)
    for _ in range(50):
        ex = make_t2s_example([1, 2, 3], semantic, VOCAB, TEXT_VOCAB, MaskSchedule(), rng, prompt_drop=0.5)
        offset = ex.inputs.target_offset
        assert ex.mask.any()
        assert not ex.mask[:offset].any()
        masked = np.flatnonzero(ex.mask)
        assert np.all(ex.inputs.ids[masked] == VOCAB.mask_id)
        target_len = len(ex.inputs) - offset
        np.testing.assert_array_equal(ex.targets[offset:], semantic[10 - target_len:])
        assert 0.0 < ex.t <= 1.0


def test_prompt_drop_probability_extremes():
    semantic = np.arange(8)
    always = make_t2s_example([1], semantic, VOCAB, TEXT_VOCAB, MaskSchedule(), Rng(3), prompt_drop=1.0)
    never = make_t2s_example([1], semantic, VOCAB, TEXT_VOCAB, MaskSchedule(), Rng(3), prompt_drop=0.0)
    assert always.prompt_dropped and not never.prompt_dropped
    assert not np.any(always.inputs.segment[always.inputs.ids != VOCAB.sep_id] == SEGMENT_PROMPT)


def test_single_frame_sequence_has_empty_prompt():
    ex = make_t2s_example([1], [4], VOCAB, TEXT_VOCAB, MaskSchedule(), Rng(4), prompt_drop=0.0)
    assert ex.inputs.target_offset == 2
    assert ex.mask.sum() == 1


# ---------- 模型 ----------

def test_loss_and_train_step_are_finite():
    model = _model()
    batch = [(np.array([1, 2]), np.arange(6)), (np.array([3]), np.arange(4) + 2)]
    examples = [make_t2s_example(p, s, VOCAB, TEXT_VOCAB, MaskSchedule(), Rng(5)) for p, s in batch]
    assert np.isfinite(t2s_loss(model, examples).loss.item())
    opt = AdamW(model.parameters(), lr=1e-3, warmup=2)
    assert np.isfinite(t2s_train_step(model, opt, batch, MaskSchedule(), Rng(6)))
    assert opt.state.step == 1


def test_unconditional_logits_ignore_prompt_content():
    model = _model(7)
    target = np.full(4, VOCAB.mask_id)
    a = t2s_logits(model, [1, 2], [], target, 0.5, dropped_prompt_frames=3)
    b = t2s_logits(model, [1, 2], [], target, 0.5, dropped_prompt_frames=3)
    np.testing.assert_array_equal(a, b)
    cond_a = t2s_logits(model, [1, 2], [0, 1, 2], target, 0.5)
    cond_b = t2s_logits(model, [1, 2], [9, 10, 11], target, 0.5)
    assert a.shape == cond_a.shape == (4, VOCAB.size)
    assert not np.allclose(cond_a, cond_b)


@pytest.mark.parametrize("w_cfg", [0.0, 2.5])
def test_generate_exact_length_without_mask_tokens(w_cfg):
    model = _model(8)
    cfg = DecodeConfig(steps=4, top_k=5, w_cfg=w_cfg)
    out = t2s_generate(model, [1, 2, 3], [4, 5], 9, cfg, Rng(9))
    assert out.shape == (9,)
    assert out.min() >= 0 and out.max() < VOCAB.size
    np.testing.assert_array_equal(out, t2s_generate(model, [1, 2, 3], [4, 5], 9, cfg, Rng(9)))


def test_generate_rejects_non_positive_length():
    with pytest.raises(ContractViolation) as err:
        t2s_generate(_model(), [1], [], 0, DecodeConfig(steps=2), Rng(10))
    assert err.value.code == "E_RANGE"
