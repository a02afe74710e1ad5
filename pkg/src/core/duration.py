# -*- coding: utf-8 -*-
"""
流匹配总时长预测器

在对数域 x₁ = log(duration + 1) 上建模音素时长：
- 训练路径 x_t = (1−t)·x₀ + t·x₁，回归速度目标 x₁ − x₀
- 随机截取音素前缀及其时长作为上下文提示，提示位置不加噪声、不计损失
- 推理用中点法（RK2）从高斯噪声积分到 t=1，速度预测经 classifier-free guidance 组合
- 只对外返回目标音素时长之和（取整）
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from src.core import numerics as F
from src.core.errors import ContractViolation, NumericError
from src.core.masking import cfg_combine
from src.core.nn import Embedding, Linear, Module, Transformer, pad_sequences
from src.core.numerics import AdamW, Rng, Tensor
from src.models import TransformerConfig

logger = logging.getLogger('MaskGCT')

SEGMENT_PROMPT = 0
SEGMENT_TARGET = 1

MAX_PROMPT_FRACTION = 0.5


def log_duration(durations) -> np.ndarray:
    return np.log(np.asarray(durations, dtype=np.float64) + 1.0)


def duration_from_log(x) -> np.ndarray:
    return np.exp(np.asarray(x, dtype=np.float64)) - 1.0


def construct_x_t(x0, x1, t):
    """x_t = (1−t)·x₀ + t·x₁"""
    return (1.0 - t) * np.asarray(x0) + t * np.asarray(x1)


@dataclass
class DurationSample:
    """
    音素序列及其时长

    Attributes:
        phones: 音素 ID
        durations: 每个音素的时长（帧，> 0）
    """
    phones: np.ndarray
    durations: np.ndarray

    def __post_init__(self):
        self.phones = np.asarray(self.phones, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.float64)
        if len(self.phones) != len(self.durations):
            raise ContractViolation("E_SHAPE", f"{len(self.phones)} phones but {len(self.durations)} durations")
        if np.any(self.durations <= 0):
            raise ContractViolation("E_RANGE", "durations must be positive")

    @property
    def x1(self) -> np.ndarray:
        return log_duration(self.durations)


@dataclass
class FlowState:
    x_t: np.ndarray
    t: float
    x0: np.ndarray


@dataclass
class DurationExample:
    """
    单条训练/推理输入

    Attributes:
        phones: 音素 ID
        values: 每个位置的输入值（提示位置为干净 x₁，目标位置为 x_t）
        segment: 段标签
        positions: RoPE 位置
        target: 速度目标 x₁ − x₀
        loss_mask: 计入损失的位置
        t: 流时间
    """
    phones: np.ndarray
    values: np.ndarray
    segment: np.ndarray
    positions: np.ndarray
    target: np.ndarray
    loss_mask: np.ndarray
    t: float


class DurationModel(Module):
    """音素嵌入 + 数值通道投影 + 段嵌入 → 双向 Transformer → 每个音素一个标量速度"""

    def __init__(self, config: TransformerConfig, phone_vocab: int, rng: Rng):
        self.config = config.validate()
        self.phone_vocab = phone_vocab
        d = config.model_dim
        self.phone_embed = Embedding(phone_vocab, d, rng)
        self.value_proj = Linear(1, d, rng)
        self.segment_embed = Embedding(2, d, rng)
        self.backbone = Transformer(config, rng)
        self.head = Linear(d, 1, rng)

    def forward(self, examples: Sequence[DurationExample]) -> Tuple[Tensor, np.ndarray]:
        """返回 (速度 (B, L_max), 有效位掩码)"""
        phones, valid = pad_sequences([e.phones for e in examples])
        if phones.size and (phones.min() < 0 or phones.max() >= self.phone_vocab):
            raise ContractViolation("E_RANGE", f"phone id outside vocabulary of size {self.phone_vocab}")
        values, _ = pad_sequences([e.values for e in examples], fill=0.0, dtype=np.float64)
        segment, _ = pad_sequences([e.segment for e in examples])
        positions, _ = pad_sequences([e.positions for e in examples], fill=0.0, dtype=np.float64)
        b, width = phones.shape
        h = (self.phone_embed(phones) + self.value_proj(Tensor(values.reshape(b, width, 1)))
             + self.segment_embed(segment))
        h = self.backbone(h, np.array([e.t for e in examples]), positions, valid)
        return self.head(h).reshape(b, width), valid


def build_duration_input(phones: np.ndarray, x: np.ndarray, t: float, prompt_phones: np.ndarray = (),
                         prompt_x1: np.ndarray = (), frame_offset: int = 0) -> DurationExample:
    """[提示音素（干净 x₁）, 目标音素（x_t）]"""
    prompt_phones = np.asarray(prompt_phones, dtype=np.int64).reshape(-1)
    prompt_x1 = np.asarray(prompt_x1, dtype=np.float64).reshape(-1)
    phones = np.asarray(phones, dtype=np.int64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if len(prompt_phones) != len(prompt_x1) or len(phones) != len(x):
        raise ContractViolation("E_SHAPE", "phone and value lengths disagree")
    n_prompt, n_target = len(prompt_phones), len(phones)
    return DurationExample(
        phones=np.concatenate([prompt_phones, phones]),
        values=np.concatenate([prompt_x1, x]),
        segment=np.concatenate([np.full(n_prompt, SEGMENT_PROMPT), np.full(n_target, SEGMENT_TARGET)]).astype(np.int64),
        positions=frame_offset + np.arange(n_prompt + n_target) + 0.5,
        target=np.zeros(n_prompt + n_target),
        loss_mask=np.concatenate([np.zeros(n_prompt, dtype=bool), np.ones(n_target, dtype=bool)]),
        t=float(t),
    )


def make_duration_example(sample: DurationSample, rng: Rng, prompt_drop: float = 0.15) -> DurationExample:
    """
    随机前缀作为提示（不加噪声），其余位置构造 x_t 并以 x₁ − x₀ 为目标

    丢弃提示时删除提示音素，剩余位置保留原位置编号。
    """
    n = len(sample.phones)
    if n < 1:
        raise ContractViolation("E_EMPTY", "duration sample must not be empty")
    prompt_len = min(int(rng.uniform() * MAX_PROMPT_FRACTION * n), n - 1)
    t = float(rng.uniform())
    x1 = sample.x1
    x0 = rng.normal(n)
    state = FlowState(construct_x_t(x0, x1, t), t, x0)
    x_t = state.x_t

    if rng.uniform() < prompt_drop:
        example = build_duration_input(sample.phones[prompt_len:], x_t[prompt_len:], t, frame_offset=prompt_len)
    else:
        example = build_duration_input(sample.phones[prompt_len:], x_t[prompt_len:], t,
                                       sample.phones[:prompt_len], x1[:prompt_len])
    n_prompt = len(example.phones) - (n - prompt_len)
    example.target[n_prompt:] = (x1 - x0)[prompt_len:]
    return example


def fm_loss(v_pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """掩码位置上 (v − (x₁ − x₀))² 的平均"""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ContractViolation("E_EMPTY", "flow-matching loss over zero positions")
    diff = (v_pred - np.asarray(target)) * mask.astype(np.float64)
    return (diff * diff).sum() * (1.0 / count)


def duration_loss(model: DurationModel, examples: Sequence[DurationExample]) -> Tensor:
    v_pred, valid = model.forward(examples)
    width = valid.shape[1]
    target = np.zeros((len(examples), width))
    mask = np.zeros((len(examples), width), dtype=bool)
    for i, e in enumerate(examples):
        target[i, :len(e.target)] = e.target
        mask[i, :len(e.loss_mask)] = e.loss_mask
    return fm_loss(v_pred, target, mask)


def fm_train_step(model: DurationModel, optimizer: AdamW, batch: Sequence[DurationSample], rng: Rng,
                  prompt_drop: float = 0.15) -> float:
    examples = [make_duration_example(s, rng, prompt_drop) for s in batch]
    loss = duration_loss(model, examples)
    grads = F.grad_of(loss, optimizer.params)
    optimizer.step(grads)
    return float(loss.item())


def midpoint_solve(v_field: Callable[[np.ndarray, float], np.ndarray], x0, steps: int = 4) -> np.ndarray:
    """
    中点法（RK2）从 t=0 积分到 t=1，等步长

    Raises:
        ContractViolation: steps < 1
        NumericError: 速度场返回非有限值
    """
    if steps < 1:
        raise ContractViolation("E_RANGE", f"solver steps must be >= 1, got {steps}")
    x = np.asarray(x0, dtype=np.float64)
    h = 1.0 / steps
    for n in range(steps):
        t = n * h
        k1 = np.asarray(v_field(x, t), dtype=np.float64)
        k2 = np.asarray(v_field(x + 0.5 * h * k1, t + 0.5 * h), dtype=np.float64)
        if not (np.all(np.isfinite(k1)) and np.all(np.isfinite(k2))):
            raise NumericError("midpoint_solve", "velocity field returned non-finite values")
        x = x + h * k2
    return x


def predict_log_durations(model: DurationModel, phones: np.ndarray, prompt_phones: np.ndarray,
                          prompt_durations: np.ndarray, rng: Rng, steps: int = 4, w_cfg: float = 1.0) -> np.ndarray:
    """目标音素的对数时长（内部中间量）"""
    phones = np.asarray(phones, dtype=np.int64).reshape(-1)
    if phones.size == 0:
        raise ContractViolation("E_EMPTY", "text must not be empty")
    prompt_phones = np.asarray(prompt_phones, dtype=np.int64).reshape(-1)
    prompt_x1 = log_duration(np.asarray(prompt_durations, dtype=np.float64).reshape(-1))
    n_prompt = len(prompt_phones)

    def velocity(example: DurationExample, n_skip: int) -> np.ndarray:
        with F.no_grad():
            v, _ = model.forward([example])
        return v.data[0, n_skip:].astype(np.float64)

    def v_field(x: np.ndarray, t: float) -> np.ndarray:
        cond = velocity(build_duration_input(phones, x, t, prompt_phones, prompt_x1), n_prompt)
        if w_cfg == 0:
            return cond
        uncond = velocity(build_duration_input(phones, x, t, frame_offset=n_prompt), 0)
        return cfg_combine(cond[None, :], uncond[None, :], w_cfg, 0.0)[0]

    return midpoint_solve(v_field, rng.normal(len(phones)), steps)


def predict_total_duration(model: DurationModel, phones: np.ndarray, prompt_phones: np.ndarray = (),
                           prompt_durations: np.ndarray = (), rng: Optional[Rng] = None, steps: int = 4,
                           w_cfg: float = 1.0) -> int:
    """
    预测目标文本的总时长（帧）

    每个音素时长 exp(x) − 1 至少为 1 帧，求和后四舍五入。

    Raises:
        ContractViolation: 文本为空
    """
    rng = rng or Rng(0)
    x = predict_log_durations(model, phones, prompt_phones, prompt_durations, rng, steps, w_cfg)
    per_phone = np.maximum(duration_from_log(x), 1.0)
    return int(math.floor(per_phone.sum() + 0.5))
