# -*- coding: utf-8 -*-
"""
语义编解码器（VQ-VAE）

对连续语义特征帧做归一化、卷积编码、因子化低维量化与镜像解码：
- 编码器 / 解码器由深度可分离卷积残差块（kernel 7）堆叠而成，不做时间下采样
- 量化在 down 投影后的 c 维空间内按平方 L2 取最近码本条目，距离相同时取最小下标
- 损失 = (1/Td)(λ_rec·|S−Ŝ|₁ + λ_codebook·|sg(z)−e|² + λ_commit·|sg(e)−z|²)
- 连续 dead_after 步未被使用的码本条目重置为随机编码器输出

特征文件格式：头部 (magic 'MGFT', version, T, d)，随后为小端 float32 行主序数据。
"""

import logging
import os
import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np

from src.core import numerics as F
from src.core.constants import FEATURE_MAGIC, FEATURE_VERSION
from src.core.errors import ContractViolation, MaskGCTError
from src.core.nn import Linear, Module, RMSNorm, parameter
from src.core.numerics import Rng, Tensor
from src.models import CodecConfig

logger = logging.getLogger('MaskGCT')

_FEATURE_HEADER = struct.Struct('<4sIII')


# ==================== 特征序列与文件 ====================

@dataclass
class FeatureSequence:
    """
    连续特征帧序列

    Attributes:
        frames: (T, d) 原始特征
        mean: (d,) 归一化均值
        var: (d,) 归一化方差
    """
    frames: np.ndarray
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def from_frames(cls, frames: np.ndarray) -> 'FeatureSequence':
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise ContractViolation("E_EMPTY", f"feature sequence needs shape (T>0, d), got {frames.shape}")
        return cls(frames, frames.mean(axis=0), frames.var(axis=0))

    def normalized(self) -> np.ndarray:
        return ((self.frames - self.mean) / np.sqrt(self.var + 1e-8)).astype(np.float32)

    def denormalize(self, frames: np.ndarray) -> np.ndarray:
        return (np.asarray(frames) * np.sqrt(self.var + 1e-8) + self.mean).astype(np.float32)


def write_features(path: str, frames: np.ndarray):
    """写出 MGFT 特征文件"""
    frames = np.ascontiguousarray(frames, dtype='<f4')
    if frames.ndim != 2:
        raise ContractViolation("E_SHAPE", f"feature file needs a (T, d) matrix, got {frames.shape}")
    try:
        with open(path, 'wb') as f:
            f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, frames.shape[0], frames.shape[1]))
            f.write(frames.tobytes())
    except OSError as e:
        raise MaskGCTError(f"cannot write feature file {path}: {e}", "E_IO") from e


def read_features(path: str) -> np.ndarray:
    """读取 MGFT 特征文件，返回 (T, d) float32 数组"""
    if not os.path.isfile(path):
        raise MaskGCTError(f"feature file not found: {path}", "E_IO")
    with open(path, 'rb') as f:
        blob = f.read()
    if len(blob) < _FEATURE_HEADER.size:
        raise ContractViolation("E_FORMAT", f"feature file too short: {path}")
    magic, version, t, d = _FEATURE_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise ContractViolation("E_FORMAT", f"bad feature file magic {magic!r} in {path}")
    if version != FEATURE_VERSION:
        raise ContractViolation("E_FORMAT", f"unsupported feature file version {version} in {path}")
    payload = blob[_FEATURE_HEADER.size:]
    if len(payload) != t * d * 4:
        raise ContractViolation("E_FORMAT", f"feature payload size mismatch in {path}")
    return np.frombuffer(payload, dtype='<f4').reshape(t, d).astype(np.float32)


# ==================== 卷积块 ====================

class DepthwiseConv1d(Module):
    """沿时间轴的逐通道卷积，same padding，输入 (B, T, C)"""

    def __init__(self, channels: int, rng: Rng, kernel: int = 7):
        if kernel % 2 != 1:
            raise ContractViolation("E_SHAPE", f"depthwise kernel must be odd, got {kernel}")
        self.kernel = kernel
        self.weight = parameter(rng.normal((kernel, channels)) / np.sqrt(kernel))
        self.bias = parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        b, t, c = x.shape
        pad = self.kernel // 2
        zeros = Tensor(np.zeros((b, pad, c)))
        xp = F.concat([zeros, x, zeros], axis=1)
        out = xp[:, 0:t, :] * self.weight[0]
        for k in range(1, self.kernel):
            out = out + xp[:, k:k + t, :] * self.weight[k]
        return out + self.bias


class ConvNextBlock(Module):
    """dwconv → RMSNorm → Linear(C, 2C) → GELU → Linear(2C, C)，残差连接"""

    def __init__(self, channels: int, rng: Rng, kernel: int = 7):
        self.dwconv = DepthwiseConv1d(channels, rng, kernel)
        self.norm = RMSNorm(channels)
        self.pw1 = Linear(channels, 2 * channels, rng)
        self.pw2 = Linear(2 * channels, channels, rng, std=0.1 / np.sqrt(2 * channels))

    def forward(self, x: Tensor) -> Tensor:
        return x + self.pw2(F.gelu(self.pw1(self.norm(self.dwconv(x)))))


class ConvStack(Module):
    """输入投影 + 若干 ConvNext 块 + 输出投影"""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, blocks: int, rng: Rng):
        self.in_proj = Linear(in_dim, hidden, rng)
        self.blocks = [ConvNextBlock(hidden, rng) for _ in range(blocks)]
        self.norm = RMSNorm(hidden)
        self.out_proj = Linear(hidden, out_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.in_proj(x)
        for block in self.blocks:
            h = block(h)
        return self.out_proj(self.norm(h))


class FactorizedProjection(Module):
    """编码输出 h 维 ↔ 码向量 c 维（c < h）"""

    def __init__(self, hidden: int, code_dim: int, rng: Rng):
        if not code_dim < hidden:
            raise ContractViolation("E_CONFIG_VALUE", f"factorized code dim {code_dim} must be < {hidden}")
        self.down = Linear(hidden, code_dim, rng)
        self.up = Linear(code_dim, hidden, rng)


# ==================== 码本与量化 ====================

def nearest_codes(z: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """
    最近码本条目（平方 L2），相同距离取最小下标

    Args:
        z: (..., c) 待量化向量
        entries: (K, c) 码本

    Returns:
        (...) 整数下标
    """
    z = np.asarray(z)
    flat = z.reshape(-1, z.shape[-1])
    diff = flat[:, None, :] - np.asarray(entries)[None, :, :]
    dist = (diff * diff).sum(axis=-1)
    return dist.argmin(axis=-1).reshape(z.shape[:-1]).astype(np.int64)


class VqCodebook(Module):
    """
    单层码本

    Attributes:
        weight: (K, c) 码本条目
        unused_steps: 每个条目连续未被选中的训练步数
    """

    def __init__(self, size: int, code_dim: int, rng: Rng):
        self.size = size
        self.code_dim = code_dim
        self.weight = parameter(rng.normal((size, code_dim)))
        self.unused_steps = np.zeros(size, dtype=np.int64)

    def lookup(self, indices: np.ndarray) -> Tensor:
        return F.embedding(self.weight, indices)

    def nearest(self, z: np.ndarray) -> np.ndarray:
        return nearest_codes(z, self.weight.data)

    def revive_dead_codes(self, indices: np.ndarray, candidates: np.ndarray, rng: Rng, dead_after: int) -> int:
        """
        更新使用计数，把连续 dead_after 步未用的条目重置为随机候选向量

        Returns:
            被重置的条目数
        """
        used = np.zeros(self.size, dtype=bool)
        used[np.asarray(indices).reshape(-1)] = True
        self.unused_steps = np.where(used, 0, self.unused_steps + 1)
        if dead_after <= 0:
            return 0
        dead = np.flatnonzero(self.unused_steps >= dead_after)
        if dead.size == 0:
            return 0
        pool = np.asarray(candidates).reshape(-1, self.code_dim)
        picks = rng.integers(0, pool.shape[0], size=dead.size)
        data = self.weight.data.copy()
        data[dead] = pool[picks]
        self.weight.data = data.astype(self.weight.data.dtype)
        self.unused_steps[dead] = 0
        logger.warning(f"♻️ 码本 {dead.size} 个条目连续 {dead_after} 步未使用，已重置")
        return int(dead.size)

    def utilization(self, indices: np.ndarray) -> int:
        return int(np.unique(np.asarray(indices)).size)


class CodecOutput(NamedTuple):
    recon: Tensor
    z: Tensor
    e: Tensor
    indices: np.ndarray


class VqLoss(NamedTuple):
    total: Tensor
    rec: Tensor
    codebook: Tensor
    commit: Tensor


def vqvae_loss(s: Tensor, s_hat: Tensor, z: Tensor, e: Tensor, lambda_rec: float = 1.0,
               lambda_codebook: float = 1.0, lambda_commit: float = 0.25) -> VqLoss:
    """
    VQ-VAE 三项损失，统一按 1/(B·T·d) 归一

    码本项只更新码本条目，commitment 项只更新编码器。
    """
    s = F.as_tensor(s)
    if s.shape != s_hat.shape or z.shape != e.shape:
        raise ContractViolation("E_SHAPE", f"vqvae_loss shapes disagree: {s.shape}/{s_hat.shape}, "
                                           f"{z.shape}/{e.shape}")
    scale = 1.0 / s.size
    rec = (s - s_hat).abs().sum() * scale
    cb_diff = z.detach() - e
    codebook = (cb_diff * cb_diff).sum() * scale
    commit_diff = e.detach() - z
    commit = (commit_diff * commit_diff).sum() * scale
    total = rec * lambda_rec + codebook * lambda_codebook + commit * lambda_commit
    return VqLoss(total, rec, codebook, commit)


class SemanticCodec(Module):
    """
    语义 VQ-VAE

    encode → quantize → decode；训练时量化值以直通估计传给解码器。
    """

    def __init__(self, config: CodecConfig, rng: Rng):
        self.config = config
        self.encoder = ConvStack(config.feature_dim, config.hidden, config.hidden, config.blocks, rng)
        self.projection = FactorizedProjection(config.hidden, config.code_dim, rng)
        self.codebook = VqCodebook(config.codebook_size, config.code_dim, rng)
        self.decoder = ConvStack(config.hidden, config.hidden, config.feature_dim, config.blocks, rng)
        self.feature_mean = np.zeros(config.feature_dim, dtype=np.float32)
        self.feature_var = np.ones(config.feature_dim, dtype=np.float32)

    def set_feature_stats(self, mean: np.ndarray, var: np.ndarray):
        self.feature_mean = np.asarray(mean, dtype=np.float32)
        self.feature_var = np.asarray(var, dtype=np.float32)

    def normalize(self, frames: np.ndarray) -> np.ndarray:
        return ((np.asarray(frames) - self.feature_mean) / np.sqrt(self.feature_var + 1e-8)).astype(np.float32)

    def encode(self, x) -> Tensor:
        """(B, T, d) 已归一化特征 → (B, T, c) 因子化隐变量"""
        x = F.as_tensor(x)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.shape[1] == 0:
            raise ContractViolation("E_EMPTY", "cannot encode an empty feature sequence")
        return self.projection.down(self.encoder(x))

    def quantize(self, z: Tensor) -> Tuple[np.ndarray, Tensor]:
        indices = self.codebook.nearest(z.data)
        return indices, self.codebook.lookup(indices)

    def decode(self, e: Tensor) -> Tensor:
        """(B, T, c) 码向量 → (B, T, d) 重建特征（归一化空间）"""
        return self.decoder(self.projection.up(e))

    def forward(self, x) -> CodecOutput:
        z = self.encode(x)
        indices, e = self.quantize(z)
        recon = self.decode(F.straight_through(z, e))
        return CodecOutput(recon, z, e, indices)

    def after_step(self, output: CodecOutput, rng: Rng):
        self.codebook.revive_dead_codes(output.indices, output.z.data, rng, self.config.dead_after)

    def tokenize(self, frames: np.ndarray) -> np.ndarray:
        """原始 (T, d) 特征 → (T,) 语义 token"""
        with F.no_grad():
            z = self.encode(self.normalize(frames))
        return self.codebook.nearest(z.data)[0]

    def loss(self, x, output: Optional[CodecOutput] = None) -> VqLoss:
        output = output or self.forward(x)
        target = F.as_tensor(x)
        if target.ndim == 2:
            target = target.reshape(1, *target.shape)
        c = self.config
        return vqvae_loss(target, output.recon, output.z, output.e,
                          c.lambda_rec, c.lambda_codebook, c.lambda_commit)


def sample_windows(frames: np.ndarray, batch: int, window: int, rng: Rng) -> np.ndarray:
    """从 (T, d) 特征流中随机截取 batch 个长度为 window 的片段"""
    total = frames.shape[0]
    window = min(window, total)
    starts = rng.integers(0, total - window + 1, size=batch)
    return np.stack([frames[s:s + window] for s in starts])


def codec_train_step(codec, optimizer: F.AdamW, frames: np.ndarray, batch: int, window: int, rng: Rng) -> float:
    """
    编解码器一步训练（语义与声学共用）

    Args:
        codec: SemanticCodec 或 AcousticCodec
        optimizer: AdamW
        frames: 已归一化的 (T, d) 训练特征流
    """
    x = sample_windows(frames, batch, window, rng)
    output = codec.forward(x)
    loss = codec.loss(x, output)
    grads = F.grad_of(loss.total, optimizer.params)
    optimizer.step(grads)
    codec.after_step(output, rng)
    return float(loss.total.item())
