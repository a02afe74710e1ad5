# -*- coding: utf-8 -*-
"""
Transformer 主干模块

T2S、S2A 与时长预测器共用的双向 Transformer：
- 双向多头注意力（无因果掩码，仅屏蔽 padding）
- RoPE 旋转位置编码（支持小数位置与逐样本位置）
- SwiGLU 前馈
- 以扩散时间步 t 为条件的 adaptive RMSNorm
"""

import logging
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.core import numerics as F
from src.core.constants import ATTENTION_PAD_BIAS, RMS_EPS
from src.core.errors import ContractViolation
from src.core.numerics import Rng, Tensor
from src.models import TransformerConfig

logger = logging.getLogger('MaskGCT')


class Module:
    """参数容器基类：按属性定义顺序收集参数，支持 state_dict 导入导出"""

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for name, value in self.__dict__.items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{i}", item

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ContractViolation("E_FORMAT", f"state dict mismatch: missing={missing[:5]} "
                                                f"unexpected={unexpected[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ContractViolation("E_SHAPE", f"parameter '{name}' has shape {p.shape}, "
                                                   f"checkpoint has {value.shape}")
            p.data = value.astype(p.data.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    """y = x W + b，W 形状 (in, out)"""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, bias: bool = True, std: Optional[float] = None):
        std = 1.0 / math.sqrt(in_dim) if std is None else std
        self.weight = parameter(rng.normal((in_dim, out_dim)) * std)
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: Rng, std: Optional[float] = None):
        std = 1.0 / math.sqrt(dim) if std is None else std
        self.count = count
        self.weight = parameter(rng.normal((count, dim)) * std)

    def forward(self, ids: np.ndarray) -> Tensor:
        return F.embedding(self.weight, ids)


def rms_normalize(x: Tensor, eps: float = RMS_EPS) -> Tensor:
    return x / F.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = RMS_EPS):
        self.eps = eps
        self.weight = parameter(np.ones(dim))

    def forward(self, x: Tensor) -> Tensor:
        return rms_normalize(x, self.eps) * self.weight


def sinusoidal_features(t: np.ndarray, dim: int) -> np.ndarray:
    """
    时间步的正弦特征

    Args:
        t: 形状 (B,) 的时间步，取值 (0, 1]
        dim: 特征维度（偶数）

    Returns:
        (B, dim) 数组，前半为 cos，后半为 sin
    """
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * 1000.0 * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


class TimestepEmbedding(Module):
    """正弦特征 → Linear → SiLU → Linear"""

    def __init__(self, dim: int, rng: Rng):
        self.dim = dim
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def forward(self, t: np.ndarray) -> Tensor:
        feats = Tensor(sinusoidal_features(t, self.dim))
        return self.fc2(F.silu(self.fc1(feats)))


def adaptive_rmsnorm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = RMS_EPS) -> Tensor:
    """
    x / sqrt(mean(x²) + ε) · (1 + scale) + shift

    scale / shift 需可广播到 x（通常为 (B, 1, D)）。
    """
    return rms_normalize(x, eps) * (1.0 + scale) + shift


class AdaptiveRMSNorm(Module):
    """由时间步嵌入投影出 scale / shift 的 RMSNorm"""

    def __init__(self, dim: int, rng: Rng):
        self.dim = dim
        self.proj = Linear(dim, 2 * dim, rng, std=0.02)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        ss = self.proj(cond)
        batch = cond.shape[0]
        scale = ss[:, :self.dim].reshape(batch, 1, self.dim)
        shift = ss[:, self.dim:].reshape(batch, 1, self.dim)
        return adaptive_rmsnorm(x, scale, shift)


def rope_rotate(x, positions: np.ndarray, theta: float = 10000.0) -> Tensor:
    """
    RoPE 旋转

    按前后两半配对，第 i 对以角度 position · θ^(-i/half) 旋转。

    Args:
        x: (..., L, head_dim) 张量，通常为 (B, H, L, head_dim)
        positions: (L,) 或 (B, L) 的实数位置
        theta: 基频

    Raises:
        ContractViolation: head_dim 为奇数
    """
    x = F.as_tensor(x)
    head_dim = x.shape[-1]
    if head_dim % 2 != 0:
        raise ContractViolation("E_SHAPE", f"rope needs an even head dim, got {head_dim}")
    half = head_dim // 2
    positions = np.asarray(positions, dtype=np.float64)
    freqs = theta ** (-np.arange(half) / half)
    angles = positions[..., None] * freqs
    if positions.ndim == 2 and x.ndim == 4:
        angles = angles[:, None, :, :]
    cos, sin = np.cos(angles), np.sin(angles)
    x1 = x[..., :half]
    x2 = x[..., half:]
    return F.concat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def bidirectional_attention(q: Tensor, k: Tensor, v: Tensor,
                            key_mask: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
    """
    全双向缩放点积注意力

    Args:
        q, k, v: (B, H, L, head_dim)
        key_mask: (B, L) 布尔数组，False 表示 padding，不被任何位置关注

    Returns:
        (输出 (B, H, L, head_dim), 注意力权重 (B, H, L, L))
    """
    if q.shape[-2] == 0:
        raise ContractViolation("E_EMPTY", "attention over an empty sequence")
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, ATTENTION_PAD_BIAS)
        scores = scores + bias[:, None, None, :]
    probs = F.softmax(scores, axis=-1)
    return probs @ v, probs


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: Rng, rope_theta: float = 10000.0):
        if dim % heads != 0:
            raise ContractViolation("E_SHAPE", f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.rope_theta = rope_theta
        self.wq = Linear(dim, dim, rng, bias=False)
        self.wk = Linear(dim, dim, rng, bias=False)
        self.wv = Linear(dim, dim, rng, bias=False)
        self.wo = Linear(dim, dim, rng, bias=False)

    def _split(self, x: Tensor) -> Tensor:
        b, l, _ = x.shape
        return x.reshape(b, l, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor, positions: np.ndarray, key_mask: Optional[np.ndarray] = None,
                return_probs: bool = False):
        b, l, d = x.shape
        q = rope_rotate(self._split(self.wq(x)), positions, self.rope_theta)
        k = rope_rotate(self._split(self.wk(x)), positions, self.rope_theta)
        v = self._split(self.wv(x))
        out, probs = bidirectional_attention(q, k, v, key_mask)
        out = self.wo(out.transpose(0, 2, 1, 3).reshape(b, l, d))
        return (out, probs) if return_probs else out


def swiglu_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """逐位置门控前馈：(SiLU(x W_gate) ⊙ x W_up) W_down，输出形状与输入相同"""
    return (F.silu(x @ w_gate) * (x @ w_up)) @ w_down


class SwiGLU(Module):
    """无偏置的 swiglu_ffn"""

    def __init__(self, dim: int, ffn_dim: int, rng: Rng):
        self.w_gate = Linear(dim, ffn_dim, rng, bias=False)
        self.w_up = Linear(dim, ffn_dim, rng, bias=False)
        self.w_down = Linear(ffn_dim, dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return swiglu_ffn(x, self.w_gate.weight, self.w_up.weight, self.w_down.weight)


class TransformerBlock(Module):
    def __init__(self, config: TransformerConfig, rng: Rng):
        self.attn_norm = AdaptiveRMSNorm(config.model_dim, rng)
        self.attn = MultiHeadAttention(config.model_dim, config.heads, rng, config.rope_theta)
        self.ffn_norm = AdaptiveRMSNorm(config.model_dim, rng)
        self.ffn = SwiGLU(config.model_dim, config.ffn_dim, rng)

    def forward(self, x: Tensor, cond: Tensor, positions: np.ndarray,
                key_mask: Optional[np.ndarray] = None) -> Tensor:
        x = x + self.attn(self.attn_norm(x, cond), positions, key_mask)
        return x + self.ffn(self.ffn_norm(x, cond))


class Transformer(Module):
    """
    双向 Transformer 主干

    输入已嵌入的序列 (B, L, D)、每个样本的时间步 t (B,)、位置 (L,) 或 (B, L)，
    以及可选 padding 掩码 (B, L)，输出同形状的隐藏状态。
    """

    def __init__(self, config: TransformerConfig, rng: Rng):
        self.config = config.validate()
        self.time_embed = TimestepEmbedding(config.model_dim, rng)
        self.blocks = [TransformerBlock(config, rng) for _ in range(config.layers)]
        self.final_norm = AdaptiveRMSNorm(config.model_dim, rng)

    def forward(self, x: Tensor, t: np.ndarray, positions: np.ndarray,
                key_mask: Optional[np.ndarray] = None) -> Tensor:
        if x.shape[-1] != self.config.model_dim:
            raise ContractViolation("E_SHAPE", f"expected model dim {self.config.model_dim}, got {x.shape[-1]}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (x.shape[0],))
        cond = self.time_embed(t)
        for block in self.blocks:
            x = block(x, cond, positions, key_mask)
        return self.final_norm(x, cond)


def pad_sequences(rows: Sequence[np.ndarray], fill=0, dtype=None) -> Tuple[np.ndarray, np.ndarray]:
    """
    把变长一维数组补齐成 (B, L_max)

    Returns:
        (补齐后的数组, 有效位置布尔掩码)
    """
    if not rows:
        raise ContractViolation("E_EMPTY", "cannot pad an empty batch")
    width = max(len(r) for r in rows)
    dtype = dtype or np.asarray(rows[0]).dtype
    out = np.full((len(rows), width), fill, dtype=dtype)
    valid = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
        valid[i, :len(r)] = True
    return out, valid
