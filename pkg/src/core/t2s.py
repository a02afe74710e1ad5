# -*- coding: utf-8 -*-
"""
文本到语义（T2S）掩码生成模型

把 (文本 P, 语义提示 S^p) 作为前缀拼在被掩码的目标语义序列 S_t 之前：
    [P, sep, S^p, S_t]
每个位置带有段嵌入（文本 / 提示 / 目标），损失只在 S_t 的掩码位置上计算。

训练时以 0.15 的概率丢弃提示（保留文本 P），用于 classifier-free guidance 的无条件分支；
生成时条件分支与无条件分支分别前向，无条件分支与提示内容无关。
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from src.core import numerics as F
from src.core.errors import ContractViolation
from src.core.masking import MaskSchedule, MaskState, apply_random_mask, decode_iterative, masked_nll_loss
from src.core.nn import Embedding, Linear, Module, Transformer, pad_sequences
from src.core.numerics import AdamW, Rng, Tensor
from src.models import DecodeConfig, TransformerConfig

logger = logging.getLogger('MaskGCT')

TABLE_TEXT = 0
TABLE_SEMANTIC = 1
SEGMENT_TEXT = 0
SEGMENT_PROMPT = 1
SEGMENT_TARGET = 2

MAX_PROMPT_FRACTION = 0.5


@dataclass(frozen=True)
class SemanticVocab:
    """
    语义词表：[0, size) 为编解码器码字，之后依次是 MASK 与分隔符

    Attributes:
        size: 码字数
    """
    size: int

    @property
    def mask_id(self) -> int:
        return self.size

    @property
    def sep_id(self) -> int:
        return self.size + 1

    @property
    def table_size(self) -> int:
        return self.size + 2


@dataclass
class PrefixInput:
    """
    拼接后的单条模型输入

    Attributes:
        ids: 各位置 token ID（在各自嵌入表内）
        table: 0 表示文本表，1 表示语义表
        segment: 段标签（文本 / 提示 / 目标）
        positions: RoPE 位置（实数）
        loss_mask: 可计入损失的位置（仅目标段）
        target_offset: 目标段起始下标
    """
    ids: np.ndarray
    table: np.ndarray
    segment: np.ndarray
    positions: np.ndarray
    loss_mask: np.ndarray
    target_offset: int

    def __len__(self):
        return len(self.ids)


def _check_ids(name: str, ids: np.ndarray, limit: int, allowed: Sequence[int] = ()):
    bad = (ids < 0) | (ids >= limit)
    for a in allowed:
        bad &= ids != a
    if bad.any():
        raise ContractViolation("E_RESERVED_ID", f"{name} contains id {int(ids[bad][0])} outside [0, {limit})")


def build_prefix_input(text: np.ndarray, prompt: np.ndarray, target: np.ndarray, vocab: SemanticVocab,
                       text_vocab: int, dropped_prompt_frames: int = 0) -> PrefixInput:
    """
    构造 [P, sep, S^p, S_t]

    语义帧位于帧中心 j + 0.5；文本符号均匀铺在整句语义帧轴上；分隔符位于 0。
    提示被丢弃时传入 dropped_prompt_frames，目标帧保持原句中的位置。

    Args:
        text: 文本 ID，不能为空
        prompt: 语义提示 S^p（只允许码字）
        target: 目标段 S_t（码字或 MASK）
        vocab: 语义词表
        text_vocab: 文本表大小
        dropped_prompt_frames: 被丢弃的提示帧数
    """
    text = np.asarray(text, dtype=np.int64).reshape(-1)
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if text.size == 0:
        raise ContractViolation("E_EMPTY", "text must not be empty")
    if prompt.size and dropped_prompt_frames:
        raise ContractViolation("E_RANGE", "a prompt cannot be both present and dropped")
    _check_ids("text", text, text_vocab)
    _check_ids("prompt", prompt, vocab.size)
    _check_ids("target", target, vocab.size, allowed=(vocab.mask_id,))

    n_text, n_prompt, n_target = len(text), len(prompt), len(target)
    offset = n_prompt + dropped_prompt_frames
    total_frames = offset + n_target

    ids = np.concatenate([text, [vocab.sep_id], prompt, target]).astype(np.int64)
    table = np.concatenate([np.full(n_text, TABLE_TEXT), np.full(1 + n_prompt + n_target, TABLE_SEMANTIC)])
    segment = np.concatenate([np.full(n_text, SEGMENT_TEXT), np.full(1 + n_prompt, SEGMENT_PROMPT),
                              np.full(n_target, SEGMENT_TARGET)])
    positions = np.concatenate([
        (np.arange(n_text) + 0.5) * max(total_frames, 1) / n_text,
        [0.0],
        np.arange(n_prompt) + 0.5,
        offset + np.arange(n_target) + 0.5,
    ])
    loss_mask = segment == SEGMENT_TARGET
    return PrefixInput(ids, table.astype(np.int64), segment.astype(np.int64), positions, loss_mask,
                       n_text + 1 + n_prompt)


class T2SModel(Module):
    """文本 / 语义 / 段嵌入 + 双向 Transformer + 语义码字分类头"""

    def __init__(self, config: TransformerConfig, text_vocab: int, vocab: SemanticVocab, rng: Rng):
        self.config = config.validate()
        self.text_vocab = text_vocab
        self.vocab = vocab
        d = config.model_dim
        self.text_embed = Embedding(text_vocab, d, rng)
        self.semantic_embed = Embedding(vocab.table_size, d, rng)
        self.segment_embed = Embedding(3, d, rng)
        self.backbone = Transformer(config, rng)
        self.head = Linear(d, vocab.size, rng)

    def forward(self, inputs: Sequence[PrefixInput], t: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        """
        Returns:
            (logits (B, L_max, V), padding 有效位掩码 (B, L_max))
        """
        ids, valid = pad_sequences([x.ids for x in inputs])
        table, _ = pad_sequences([x.table for x in inputs])
        segment, _ = pad_sequences([x.segment for x in inputs])
        positions, _ = pad_sequences([x.positions for x in inputs], fill=0.0, dtype=np.float64)

        is_text = (table == TABLE_TEXT) & valid
        is_sem = (table == TABLE_SEMANTIC) & valid
        h = (self.text_embed(np.where(is_text, ids, 0)) * is_text[..., None].astype(np.float64)
             + self.semantic_embed(np.where(is_sem, ids, 0)) * is_sem[..., None].astype(np.float64)
             + self.segment_embed(segment))
        h = self.backbone(h, t, positions, valid)
        return self.head(h), valid


@dataclass
class T2SExample:
    """
    一条训练样本

    Attributes:
        inputs: 拼接后的输入
        targets: 与 inputs 等长的真值（目标段以外为 0）
        mask: 被掩码且计入损失的位置
        t: 掩码时间步
        prompt_dropped: 是否丢弃了提示
    """
    inputs: PrefixInput
    targets: np.ndarray
    mask: np.ndarray
    t: float
    prompt_dropped: bool


def make_t2s_example(text: np.ndarray, semantic: np.ndarray, vocab: SemanticVocab, text_vocab: int,
                     schedule: MaskSchedule, rng: Rng, prompt_drop: float = 0.15) -> T2SExample:
    """
    随机截取前缀作为提示（占比 U[0, 0.5]，且严格短于整句），对剩余部分按 γ(t) 掩码

    掩码全空时强制掩码一个随机位置。
    """
    semantic = np.asarray(semantic, dtype=np.int64)
    n = len(semantic)
    if n < 1:
        raise ContractViolation("E_EMPTY", "semantic sequence must not be empty")
    prompt_len = min(int(rng.uniform() * MAX_PROMPT_FRACTION * n), n - 1)
    target = semantic[prompt_len:]
    t = 1.0 - float(rng.uniform())
    state = apply_random_mask(target, t, schedule, rng, vocab.mask_id)
    mask = state.mask
    if not mask.any():
        mask = mask.copy()
        mask[int(rng.integers(0, len(target)))] = True
    masked_target = np.where(mask, vocab.mask_id, target)

    dropped = bool(rng.uniform() < prompt_drop)
    if dropped:
        inputs = build_prefix_input(text, [], masked_target, vocab, text_vocab, dropped_prompt_frames=prompt_len)
    else:
        inputs = build_prefix_input(text, semantic[:prompt_len], masked_target, vocab, text_vocab)

    targets = np.zeros(len(inputs), dtype=np.int64)
    targets[inputs.target_offset:] = target
    loss_mask = np.zeros(len(inputs), dtype=bool)
    loss_mask[inputs.target_offset:] = mask
    return T2SExample(inputs, targets, loss_mask, t, dropped)


def t2s_loss(model: T2SModel, examples: Sequence[T2SExample]):
    logits, valid = model.forward([e.inputs for e in examples], np.array([e.t for e in examples]))
    width = valid.shape[1]
    targets = np.zeros((len(examples), width), dtype=np.int64)
    mask = np.zeros((len(examples), width), dtype=bool)
    for i, e in enumerate(examples):
        targets[i, :len(e.targets)] = e.targets
        mask[i, :len(e.mask)] = e.mask
    return masked_nll_loss(logits, targets, mask)


def t2s_train_step(model: T2SModel, optimizer: AdamW, batch: Sequence[Tuple[np.ndarray, np.ndarray]],
                   schedule: MaskSchedule, rng: Rng, prompt_drop: float = 0.15) -> float:
    """
    一步训练

    Args:
        batch: (文本, 完整语义序列) 列表

    Returns:
        掩码负对数似然
    """
    examples = [make_t2s_example(p, s, model.vocab, model.text_vocab, schedule, rng, prompt_drop)
                for p, s in batch]
    result = t2s_loss(model, examples)
    grads = F.grad_of(result.loss, optimizer.params)
    optimizer.step(grads)
    return float(result.loss.item())


def t2s_logits(model: T2SModel, text: np.ndarray, prompt: np.ndarray, target: np.ndarray, t: float,
               dropped_prompt_frames: int = 0) -> np.ndarray:
    """单条输入在目标段上的 logits (N, V)"""
    inputs = build_prefix_input(text, prompt, target, model.vocab, model.text_vocab, dropped_prompt_frames)
    with F.no_grad():
        logits, _ = model.forward([inputs], np.array([t]))
    return logits.data[0, inputs.target_offset:]


def t2s_generate(model: T2SModel, text: np.ndarray, prompt: np.ndarray, length: int, cfg: DecodeConfig,
                 rng: Rng, schedule: Optional[MaskSchedule] = None) -> np.ndarray:
    """
    生成指定长度的目标语义序列

    条件分支使用 (P, S^p)；w_cfg > 0 时另做一次丢弃提示的无条件前向。

    Raises:
        ContractViolation: length < 1
    """
    if length < 1:
        raise ContractViolation("E_RANGE", f"target length must be >= 1, got {length}")
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)

    def predict(state: MaskState):
        cond = t2s_logits(model, text, prompt, state.tokens, state.t)
        uncond = None
        if cfg.w_cfg != 0:
            uncond = t2s_logits(model, text, [], state.tokens, state.t, dropped_prompt_frames=len(prompt))
        return cond, uncond

    return decode_iterative(predict, int(length), cfg, rng, schedule, model.vocab.mask_id)

