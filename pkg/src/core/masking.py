# -*- coding: utf-8 -*-
"""
掩码生成引擎

与具体模型无关，T2S 与 S2A 共用：
- 掩码调度 γ(t)（默认 sin(πt/2T)，可选 linear / square）
- 随机掩码、掩码位置上的负对数似然损失
- 基于置信度的迭代并行解码（已提交位置置信度为 +∞，永不重新掩码）
- classifier-free guidance 及其 rescale
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Tuple

import numpy as np

from src.core import numerics as F
from src.core.errors import ContractViolation, NumericError
from src.core.numerics import Rng, Tensor
from src.models import DecodeConfig

logger = logging.getLogger('MaskGCT')

SCHEDULE_KINDS = ('sine', 'linear', 'square')


class MaskSchedule:
    """
    掩码比例调度 γ(t)

    所有形式都满足 γ(0)=0、γ(T)=1 且单调不减。
    """

    def __init__(self, kind: str = 'sine', horizon: float = 1.0):
        if kind not in SCHEDULE_KINDS:
            raise ContractViolation("E_CONFIG_VALUE", f"unknown mask schedule '{kind}', "
                                                      f"expected one of {SCHEDULE_KINDS}")
        if horizon <= 0:
            raise ContractViolation("E_RANGE", f"schedule horizon must be positive, got {horizon}")
        self.kind = kind
        self.T = float(horizon)

    def gamma(self, t: float) -> float:
        t = min(max(float(t), 0.0), self.T)
        if self.kind == 'sine':
            return math.sin(math.pi * t / (2 * self.T))
        if self.kind == 'linear':
            return t / self.T
        return (t / self.T) ** 2

    def __repr__(self):
        return f"MaskSchedule(kind={self.kind!r}, T={self.T})"


@dataclass
class MaskState:
    """
    掩码状态

    Attributes:
        tokens: 含 MASK 符号的 token 序列
        mask: 布尔掩码，mask[i] 为真当且仅当 tokens[i] == mask_id
        t: 产生该状态的时间步
        mask_id: 保留的 MASK 符号 ID
    """
    tokens: np.ndarray
    mask: np.ndarray
    t: float
    mask_id: int

    def validate(self) -> 'MaskState':
        if self.tokens.shape != self.mask.shape:
            raise ContractViolation("E_SHAPE", f"mask shape {self.mask.shape} != tokens {self.tokens.shape}")
        if not np.array_equal(self.mask, self.tokens == self.mask_id):
            raise ContractViolation("E_FORMAT", "mask does not match MASK symbol positions")
        return self


def apply_random_mask(x: np.ndarray, t: float, schedule: MaskSchedule, rng: Rng, mask_id: int) -> MaskState:
    """
    以概率 γ(t) 独立地掩码每个位置

    Args:
        x: 整数 token 序列（任意形状）
        t: 时间步，需满足 0 < t ≤ T
        schedule: 掩码调度
        rng: 随机数流
        mask_id: MASK 符号

    Returns:
        t 时刻的 MaskState
    """
    if not (0.0 < t <= schedule.T):
        raise ContractViolation("E_RANGE", f"mask time t must be in (0, {schedule.T}], got {t}")
    x = np.asarray(x, dtype=np.int64)
    mask = rng.uniform(size=x.shape) < schedule.gamma(t)
    tokens = np.where(mask, mask_id, x)
    return MaskState(tokens=tokens, mask=mask, t=float(t), mask_id=mask_id)


class MaskedLoss(NamedTuple):
    loss: Tensor
    masked_count: int
    degenerate: bool


def masked_nll_loss(logits: Tensor, target: np.ndarray, mask: np.ndarray) -> MaskedLoss:
    """
    掩码位置上的平均负对数似然

    Args:
        logits: (..., V) 未归一化分数
        target: (...) 真值 token
        mask: (...) 布尔掩码，仅为真的位置计入损失

    Returns:
        MaskedLoss；掩码全空时损失定义为 0 并置 degenerate
    """
    target = np.asarray(target, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    vocab = logits.shape[-1]
    if target.shape != logits.shape[:-1] or mask.shape != target.shape:
        raise ContractViolation("E_SHAPE", f"logits {logits.shape} / target {target.shape} / "
                                           f"mask {mask.shape} disagree")
    count = int(mask.sum())
    if count == 0:
        logger.warning("⚠️ masked_nll_loss: batch has no masked positions, loss defined as 0")
        return MaskedLoss((logits * 0.0).sum(), 0, True)
    if target[mask].min() < 0 or target[mask].max() >= vocab:
        raise ContractViolation("E_RANGE", f"target id outside vocabulary of size {vocab}")

    flat = F.log_softmax(logits, axis=-1).reshape(-1, vocab)
    rows = np.flatnonzero(mask.reshape(-1))
    picked = flat[rows, target.reshape(-1)[rows]]
    return MaskedLoss(-picked.sum() * (1.0 / count), count, False)


def remask_count(n: int, schedule: MaskSchedule, steps: int, i: int) -> int:
    """第 i 步之后仍保持掩码的位置数：⌊N·γ(T − i·T/S)⌋"""
    if not (1 <= i <= steps):
        raise ContractViolation("E_RANGE", f"step index must be in [1, {steps}], got {i}")
    return int(math.floor(n * schedule.gamma(schedule.T - i * schedule.T / steps)))


def cfg_combine(g_cond: np.ndarray, g_uncond: np.ndarray, w_cfg: float, w_rescale: float,
                axis: int = -1) -> np.ndarray:
    """
    classifier-free guidance + rescale

    g_cfg = g_cond + w_cfg·(g_cond − g_uncond)
    g_rescale = g_cfg · std(g_cond) / std(g_cfg)   （std 沿 axis 计算，std(g_cfg)=0 的位置跳过）
    返回 w_rescale·g_rescale + (1 − w_rescale)·g_cfg

    w_cfg == 0 或某位置上两路完全相同时，该位置原样返回 g_cond。
    """
    g_cond = np.asarray(g_cond)
    g_uncond = np.asarray(g_uncond)
    if g_cond.shape != g_uncond.shape:
        raise ContractViolation("E_SHAPE", f"cfg logits shapes differ: {g_cond.shape} vs {g_uncond.shape}")
    if w_cfg == 0:
        return g_cond.copy()

    c = g_cond.astype(np.float64)
    u = g_uncond.astype(np.float64)
    g_cfg = c + w_cfg * (c - u)
    std_cond = c.std(axis=axis, keepdims=True)
    std_cfg = g_cfg.std(axis=axis, keepdims=True)
    safe = std_cfg > 0
    ratio = np.where(safe, std_cond / np.where(safe, std_cfg, 1.0), 1.0)
    out = w_rescale * (g_cfg * ratio) + (1.0 - w_rescale) * g_cfg

    same = np.all(g_cond == g_uncond, axis=axis, keepdims=True)
    out = np.where(same, c, out)
    return out.astype(g_cond.dtype)


def anneal_temperature(i: int, steps: int, temp_start: float, temp_end: float) -> float:
    """线性退火 temp_start + (i−1)/max(S−1, 1)·(temp_end − temp_start)；只有一步时取 temp_start"""
    if not (1 <= i <= steps):
        raise ContractViolation("E_RANGE", f"step index must be in [1, {steps}], got {i}")
    return temp_start + (i - 1) / max(steps - 1, 1) * (temp_end - temp_start)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_tokens(logits: np.ndarray, temperature: float, top_k: int, rng: Rng) -> Tuple[np.ndarray, np.ndarray]:
    """
    逐位置采样

    先做 top-k 过滤，再以温度 τ 做 Gumbel-max 采样；τ = 0 时取 argmax。

    Returns:
        (采样 token, 采样 token 在未加温度的分布下的概率)
    """
    logits = np.asarray(logits, dtype=np.float64)
    n, vocab = logits.shape
    probs = _softmax(logits)
    if temperature <= 0:
        tokens = logits.argmax(axis=-1)
    else:
        k = min(max(int(top_k), 1), vocab)
        filtered = logits
        if k < vocab:
            kth = np.partition(logits, vocab - k, axis=-1)[:, vocab - k][:, None]
            filtered = np.where(logits >= kth, logits, -np.inf)
        tokens = (filtered / temperature + rng.gumbel((n, vocab))).argmax(axis=-1)
    confidence = probs[np.arange(n), tokens]
    return tokens.astype(np.int64), confidence


Predictor = Callable[[MaskState], Tuple[np.ndarray, Optional[np.ndarray]]]


def decode_iterative(predict: Predictor, n: int, cfg: DecodeConfig, rng: Rng,
                     schedule: Optional[MaskSchedule] = None, mask_id: int = -1,
                     on_step: Optional[Callable[[int, np.ndarray], None]] = None) -> np.ndarray:
    """
    基于置信度的迭代并行解码

    从全掩码序列出发，共 S 步；每步对所有位置采样，已提交的位置保持不变且置信度为 +∞，
    随后把置信度最低的 remask_count 个位置重新掩码。

    Args:
        predict: 输入 MaskState，返回 (条件 logits (N, V), 无条件 logits 或 None)
        n: 序列长度 N
        cfg: 解码配置
        rng: 随机数流
        schedule: 掩码调度，默认 sine
        mask_id: MASK 符号
        on_step: 可选回调 on_step(i, tokens)，tokens 为第 i 步结束后的序列

    Returns:
        不含 MASK 的长度 N 序列

    Raises:
        NumericError: 模型输出含 NaN / Inf
    """
    if n < 1:
        raise ContractViolation("E_RANGE", f"decode length must be >= 1, got {n}")
    cfg.validate()
    schedule = schedule or MaskSchedule()
    T, S = schedule.T, cfg.steps

    tokens = np.full(n, mask_id, dtype=np.int64)
    committed = np.zeros(n, dtype=bool)
    positions = np.arange(n)

    for i in range(1, S + 1):
        state = MaskState(tokens.copy(), ~committed, T - (i - 1) * T / S, mask_id)
        cond, uncond = predict(state)
        cond = np.asarray(cond)
        if not np.all(np.isfinite(cond)) or (uncond is not None and not np.all(np.isfinite(uncond))):
            raise NumericError("decode_iterative", "model returned non-finite logits")
        if cond.shape[0] != n:
            raise ContractViolation("E_SHAPE", f"predictor returned {cond.shape[0]} rows for length {n}")
        logits = cfg_combine(cond, uncond, cfg.w_cfg, cfg.w_rescale) if uncond is not None else cond

        temp = anneal_temperature(i, S, cfg.temp_start, cfg.temp_end)
        sampled, confidence = sample_tokens(logits, temp, cfg.top_k, rng)
        tokens = np.where(committed, tokens, sampled)

        with np.errstate(divide='ignore'):
            score = np.log(np.maximum(confidence, np.finfo(np.float64).tiny))
        if cfg.gumbel and temp > 0:
            score = score + temp * rng.gumbel(n)
        score[committed] = np.inf

        k = remask_count(n, schedule, S, i)
        # 置信度升序，相同置信度时位置小者优先
        remask = np.lexsort((positions, score))[:k]
        committed = np.ones(n, dtype=bool)
        committed[remask] = False
        tokens[remask] = mask_id
        if on_step is not None:
            on_step(i, tokens.copy())

    return tokens
