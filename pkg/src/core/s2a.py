# -*- coding: utf-8 -*-
"""
语义到声学（S2A）掩码生成模型

训练时按线性调度 p(j) = 2(N+1−j)/(N(N+1)) 抽取一层 j，只对该层目标区做掩码预测；
输入为语义嵌入与第 1..j 层声学嵌入之和（第 j 层目标区为掩码后的 token），
提示区 A^p 使用全部真值。生成时由粗到细逐层做迭代并行解码。

帧对齐约束：|S| == frames(A^p) + frames(A)。
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from src.core import numerics as F
from src.core.errors import ContractViolation
from src.core.masking import MaskSchedule, MaskState, apply_random_mask, decode_iterative, masked_nll_loss
from src.core.nn import Embedding, Linear, Module, Transformer, pad_sequences
from src.core.numerics import AdamW, Rng, Tensor
from src.models import DecodeConfig, TransformerConfig

logger = logging.getLogger('MaskGCT')

SEGMENT_PROMPT = 0
SEGMENT_TARGET = 1

MAX_PROMPT_FRACTION = 0.5

# 每层解码步数预设（不足的层补 1）
LAYER_STEP_PRESETS = {
    'desk': [8, 4, 1, 1],
    'fast': [10, 1],
    'quality': [40, 16, 1],
}


def layer_probabilities(n_layers: int) -> np.ndarray:
    """归一化的线性递减分布 p(j) = 2(N+1−j)/(N(N+1))，j = 1..N"""
    if n_layers < 1:
        raise ContractViolation("E_RANGE", f"layer count must be >= 1, got {n_layers}")
    j = np.arange(1, n_layers + 1)
    return 2.0 * (n_layers + 1 - j) / (n_layers * (n_layers + 1))


def sample_layer(n_layers: int, rng: Rng) -> int:
    """按 layer_probabilities 抽取训练层（1 起始）"""
    if n_layers == 1:
        return 1
    return int(rng.choice(n_layers, p=layer_probabilities(n_layers))) + 1


def resolve_layer_steps(value: Union[str, Sequence[int]], n_layers: int) -> List[int]:
    """
    解析每层解码步数

    预设名（desk / fast / quality）按层数截断或补 1；显式列表长度必须等于层数。
    """
    if isinstance(value, str):
        name = value.strip().lower()
        if name in LAYER_STEP_PRESETS:
            steps = (LAYER_STEP_PRESETS[name] + [1] * n_layers)[:n_layers]
            return steps
        try:
            value = [int(v) for v in name.split(',') if v.strip()]
        except ValueError as e:
            raise ContractViolation("E_CONFIG_VALUE", f"bad layer step schedule '{value}'") from e
    steps = [int(v) for v in value]
    if len(steps) != n_layers:
        raise ContractViolation("E_CONFIG_VALUE", f"layer step schedule has {len(steps)} entries, "
                                                  f"model has {n_layers} layers")
    if any(s < 1 for s in steps):
        raise ContractViolation("E_CONFIG_VALUE", f"layer steps must all be >= 1, got {steps}")
    return steps


def check_alignment(semantic: np.ndarray, prompt_frames: int, target_frames: int):
    if len(semantic) != prompt_frames + target_frames:
        raise ContractViolation("E_ALIGNMENT", f"semantic length {len(semantic)} != prompt frames "
                                               f"{prompt_frames} + target frames {target_frames}")


@dataclass
class S2AExample:
    """
    单条 S2A 输入

    Attributes:
        semantic: (F,) 语义 token
        grid: (N, F) 声学输入网格，第 layer 层目标区已替换为掩码后的 token
        prompt_frames: 提示帧数
        layer: 预测层 j（1 起始）
        targets: (F,) 第 j 层真值
        mask: (F,) 计入损失的位置
        t: 掩码时间步
        positions: (F,) RoPE 位置
    """
    semantic: np.ndarray
    grid: np.ndarray
    prompt_frames: int
    layer: int
    targets: np.ndarray
    mask: np.ndarray
    t: float
    positions: np.ndarray


def build_s2a_input(semantic: np.ndarray, grid: np.ndarray, prompt_frames: int, layer: int,
                    masked_target: np.ndarray, t: float, frame_offset: int = 0) -> S2AExample:
    """把第 layer 层目标区替换为 masked_target，构造推理或训练输入"""
    semantic = np.asarray(semantic, dtype=np.int64)
    grid = np.asarray(grid, dtype=np.int64)
    if grid.ndim != 2 or grid.shape[1] != len(semantic):
        raise ContractViolation("E_ALIGNMENT", f"grid frames {grid.shape} do not match semantic length "
                                               f"{len(semantic)}")
    check_alignment(semantic, prompt_frames, len(masked_target))
    if not (1 <= layer <= grid.shape[0]):
        raise ContractViolation("E_RANGE", f"layer must be in [1, {grid.shape[0]}], got {layer}")
    grid_in = grid.copy()
    grid_in[layer - 1, prompt_frames:] = masked_target
    positions = frame_offset + np.arange(len(semantic)) + 0.5
    return S2AExample(semantic, grid_in, prompt_frames, layer, grid[layer - 1].copy(),
                      np.zeros(len(semantic), dtype=bool), float(t), positions)


class S2AModel(Module):
    """语义嵌入 + 每层声学嵌入求和 + 双向 Transformer + 每层独立分类头"""

    def __init__(self, config: TransformerConfig, semantic_vocab: int, layers: int, codebook_size: int, rng: Rng):
        self.config = config.validate()
        self.semantic_vocab = semantic_vocab
        self.layers = layers
        self.codebook_size = codebook_size
        d = config.model_dim
        self.semantic_embed = Embedding(semantic_vocab, d, rng)
        self.layer_embeds = [Embedding(codebook_size + 1, d, rng) for _ in range(layers)]
        self.target_layer_embed = Embedding(layers, d, rng)
        self.segment_embed = Embedding(2, d, rng)
        self.backbone = Transformer(config, rng)
        self.heads = [Linear(d, codebook_size, rng) for _ in range(layers)]

    @property
    def mask_id(self) -> int:
        return self.codebook_size

    def embed_inputs(self, examples: Sequence[S2AExample]) -> Tuple[Tensor, np.ndarray, np.ndarray]:
        """
        条件嵌入求和

        每帧：emb(S) + Σ_{l ≤ j} emb_l(A^l) + 段嵌入 + 目标层嵌入；第 j 层以上不参与。

        Returns:
            (h (B, F_max, D), 有效位掩码, 位置)
        """
        for e in examples:
            if e.grid.shape[0] != self.layers:
                raise ContractViolation("E_SHAPE", f"example has {e.grid.shape[0]} layers, model has {self.layers}")
        semantic, valid = pad_sequences([e.semantic for e in examples])
        positions, _ = pad_sequences([e.positions for e in examples], fill=0.0, dtype=np.float64)
        segment, _ = pad_sequences([np.where(np.arange(len(e.semantic)) < e.prompt_frames,
                                             SEGMENT_PROMPT, SEGMENT_TARGET) for e in examples])
        width = semantic.shape[1]
        grid = np.zeros((len(examples), self.layers, width), dtype=np.int64)
        for i, e in enumerate(examples):
            grid[i, :, :e.grid.shape[1]] = e.grid
        layer = np.array([e.layer for e in examples], dtype=np.int64)

        h = self.semantic_embed(semantic) + self.segment_embed(segment)
        h = h + self.target_layer_embed(layer - 1).reshape(len(examples), 1, -1)
        for l, embed in enumerate(self.layer_embeds):
            include = (l < layer).astype(np.float64).reshape(-1, 1, 1)
            if not include.any():
                continue
            h = h + embed(grid[:, l, :]) * include
        return h, valid, positions

    def forward(self, examples: Sequence[S2AExample]) -> Tuple[Tensor, np.ndarray]:
        """返回每个样本在其第 j 层上的 logits (B, F_max, K)"""
        h, valid, positions = self.embed_inputs(examples)
        t = np.array([e.t for e in examples])
        h = self.backbone(h, t, positions, valid)
        layer = np.array([e.layer for e in examples], dtype=np.int64)
        needed = sorted(set(int(j) for j in layer))
        if len(needed) == 1:
            return self.heads[needed[0] - 1](h), valid
        all_logits = F.stack([self.heads[j](h) for j in range(self.layers)], axis=0)
        return all_logits[layer - 1, np.arange(len(examples))], valid


def sum_condition_embeddings(model: S2AModel, semantic: np.ndarray, prompt_grid: np.ndarray,
                             target_grid: np.ndarray, layer: int, masked_target: np.ndarray) -> Tensor:
    """
    单条输入的条件嵌入和 (F, D)

    Args:
        semantic: (F,) 语义 token
        prompt_grid: (N, F_p) 提示声学网格
        target_grid: (N, F_t) 目标声学网格（第 layer 层及以上的内容不影响结果）
        layer: 当前层 j
        masked_target: (F_t,) 第 j 层目标区的掩码状态
    """
    prompt_grid = np.asarray(prompt_grid, dtype=np.int64).reshape(model.layers, -1)
    target_grid = np.asarray(target_grid, dtype=np.int64).reshape(model.layers, -1)
    check_alignment(semantic, prompt_grid.shape[1], target_grid.shape[1])
    grid = np.concatenate([prompt_grid, target_grid], axis=1)
    example = build_s2a_input(semantic, grid, prompt_grid.shape[1], layer, masked_target, 1.0)
    h, _, _ = model.embed_inputs([example])
    return h[0]


def make_s2a_example(semantic: np.ndarray, grid: np.ndarray, model: S2AModel, schedule: MaskSchedule,
                     rng: Rng, prompt_drop: float = 0.15) -> S2AExample:
    """
    随机提示前缀 + 按 p(j) 抽层 + 对第 j 层目标区掩码

    丢弃提示时，提示帧连同对应的语义帧一起删除，剩余帧保留原句中的位置。
    """
    semantic = np.asarray(semantic, dtype=np.int64)
    grid = np.asarray(grid, dtype=np.int64)
    n_frames = len(semantic)
    if grid.shape != (model.layers, n_frames):
        raise ContractViolation("E_ALIGNMENT", f"grid shape {grid.shape} != ({model.layers}, {n_frames})")
    prompt_len = min(int(rng.uniform() * MAX_PROMPT_FRACTION * n_frames), n_frames - 1)
    layer = sample_layer(model.layers, rng)
    t = 1.0 - float(rng.uniform())
    target = grid[layer - 1, prompt_len:]
    mask = apply_random_mask(target, t, schedule, rng, model.mask_id).mask
    if not mask.any():
        mask = mask.copy()
        mask[int(rng.integers(0, len(target)))] = True
    masked_target = np.where(mask, model.mask_id, target)

    if rng.uniform() < prompt_drop:
        example = build_s2a_input(semantic[prompt_len:], grid[:, prompt_len:], 0, layer, masked_target, t,
                                  frame_offset=prompt_len)
        example.mask = mask.copy()
    else:
        example = build_s2a_input(semantic, grid, prompt_len, layer, masked_target, t)
        example.mask[prompt_len:] = mask
    return example


def s2a_loss(model: S2AModel, examples: Sequence[S2AExample]):
    logits, valid = model.forward(examples)
    width = valid.shape[1]
    targets = np.zeros((len(examples), width), dtype=np.int64)
    mask = np.zeros((len(examples), width), dtype=bool)
    for i, e in enumerate(examples):
        targets[i, :len(e.targets)] = e.targets
        mask[i, :len(e.mask)] = e.mask
    return masked_nll_loss(logits, targets, mask)


def s2a_train_step(model: S2AModel, optimizer: AdamW, batch: Sequence[Tuple[np.ndarray, np.ndarray]],
                   schedule: MaskSchedule, rng: Rng, prompt_drop: float = 0.15) -> float:
    """
    一步训练，batch 为 (语义序列, 声学网格) 列表

    损失在整个 batch 的全部掩码位置上取平均。
    """
    examples = [make_s2a_example(s, g, model, schedule, rng, prompt_drop) for s, g in batch]
    result = s2a_loss(model, examples)
    grads = F.grad_of(result.loss, optimizer.params)
    optimizer.step(grads)
    return float(result.loss.item())


def _layer_logits(model: S2AModel, example: S2AExample) -> np.ndarray:
    with F.no_grad():
        logits, _ = model.forward([example])
    return logits.data[0, example.prompt_frames:]


def s2a_decode_layer(model: S2AModel, semantic: np.ndarray, prompt_grid: np.ndarray, target_grid: np.ndarray,
                     layer: int, cfg: DecodeConfig, rng: Rng,
                     schedule: Optional[MaskSchedule] = None) -> np.ndarray:
    """
    对第 layer 层目标区做迭代并行解码

    只依赖第 1..layer−1 层目标 token；更细的层不影响结果。
    """
    semantic = np.asarray(semantic, dtype=np.int64)
    prompt_grid = np.asarray(prompt_grid, dtype=np.int64).reshape(model.layers, -1)
    target_grid = np.asarray(target_grid, dtype=np.int64).reshape(model.layers, -1)
    n_prompt, n_target = prompt_grid.shape[1], target_grid.shape[1]
    check_alignment(semantic, n_prompt, n_target)
    grid = np.concatenate([prompt_grid, target_grid], axis=1)
    grid[layer:, :] = 0

    def predict(state: MaskState):
        cond = _layer_logits(model, build_s2a_input(semantic, grid, n_prompt, layer, state.tokens, state.t))
        uncond = None
        if cfg.w_cfg != 0:
            uncond = _layer_logits(model, build_s2a_input(semantic[n_prompt:], grid[:, n_prompt:], 0, layer,
                                                          state.tokens, state.t, frame_offset=n_prompt))
        return cond, uncond

    return decode_iterative(predict, n_target, cfg, rng, schedule, model.mask_id)


def s2a_generate(model: S2AModel, semantic: np.ndarray, prompt_grid: np.ndarray, layer_steps: Sequence[int],
                 cfg: DecodeConfig, rng: Rng, schedule: Optional[MaskSchedule] = None) -> np.ndarray:
    """
    由粗到细逐层生成目标区声学网格

    Args:
        semantic: 提示帧 + 目标帧的完整语义序列
        prompt_grid: (N, F_p) 提示声学网格
        layer_steps: 每层解码步数

    Returns:
        (N, F_t) 目标声学网格
    """
    semantic = np.asarray(semantic, dtype=np.int64)
    prompt_grid = np.asarray(prompt_grid, dtype=np.int64).reshape(model.layers, -1)
    n_target = len(semantic) - prompt_grid.shape[1]
    if n_target < 1:
        raise ContractViolation("E_ALIGNMENT", f"semantic length {len(semantic)} leaves no target frames after "
                                               f"{prompt_grid.shape[1]} prompt frames")
    steps = resolve_layer_steps(layer_steps, model.layers)
    target = np.zeros((model.layers, n_target), dtype=np.int64)
    for j in range(1, model.layers + 1):
        layer_rng = rng.split(j)
        target[j - 1] = s2a_decode_layer(model, semantic, prompt_grid, target, j,
                                         cfg.with_steps(steps[j - 1]), layer_rng, schedule)
        logger.debug(f"s2a layer {j}/{model.layers} decoded in {steps[j - 1]} steps")
    return target
