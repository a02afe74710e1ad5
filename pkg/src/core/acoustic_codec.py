# -*- coding: utf-8 -*-
"""
声学编解码器（残差向量量化）

连续帧特征 → N 层声学 token 网格 → 重建特征：
- 第 1 层量化输入，第 j 层量化减去前 j−1 层重建后的残差
- 按层前缀求和解码（rvq_decode(grid, j) 只使用第 1..j 层）
- 重建损失为三种窗口（1, 4, 16 帧）上的多分辨率 L1，另加码本与 commitment 项

网格文本格式：首行 "layers=N frames=F"，之后每层一行空格分隔的整数。
"""

import logging
import os
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from src.core import numerics as F
from src.core.errors import ContractViolation, MaskGCTError
from src.core.nn import Module
from src.core.numerics import Rng, Tensor
from src.core.semantic_codec import ConvStack, FactorizedProjection, VqCodebook, nearest_codes
from src.models import CodecConfig

logger = logging.getLogger('MaskGCT')

RECON_WINDOWS = (1, 4, 16)


@dataclass
class AcousticTokenGrid:
    """
    N 层 × F 帧的声学 token 网格

    Attributes:
        codes: (layers, frames) 整数数组，第 0 行为最粗的一层
    """
    codes: np.ndarray

    @property
    def layers(self) -> int:
        return int(self.codes.shape[0])

    @property
    def frames(self) -> int:
        return int(self.codes.shape[1])

    def validate(self, codebook_size: int) -> 'AcousticTokenGrid':
        if self.codes.ndim != 2:
            raise ContractViolation("E_SHAPE", f"token grid must be 2-D, got {self.codes.shape}")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= codebook_size):
            raise ContractViolation("E_RANGE", f"token grid index outside codebook of size {codebook_size}")
        return self

    def to_text(self) -> str:
        lines = [f"layers={self.layers} frames={self.frames}"]
        lines += [' '.join(str(int(v)) for v in row) for row in self.codes]
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_text(cls, text: str) -> 'AcousticTokenGrid':
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ContractViolation("E_FORMAT", "empty token grid")
        try:
            header = dict(part.split('=', 1) for part in lines[0].split())
            layers, frames = int(header['layers']), int(header['frames'])
        except (KeyError, ValueError) as e:
            raise ContractViolation("E_FORMAT", f"bad token grid header '{lines[0]}'") from e
        rows = [[int(v) for v in ln.split()] for ln in lines[1:]]
        if len(rows) != layers or any(len(r) != frames for r in rows):
            raise ContractViolation("E_FORMAT", f"token grid body does not match header layers={layers} "
                                                f"frames={frames}")
        return cls(np.asarray(rows, dtype=np.int64).reshape(layers, frames))

    def save(self, path: str):
        try:
            with open(path, 'w', encoding='utf-8') as f:
                f.write(self.to_text())
        except OSError as e:
            raise MaskGCTError(f"cannot write token grid {path}: {e}", "E_IO") from e

    @classmethod
    def load(cls, path: str) -> 'AcousticTokenGrid':
        if not os.path.isfile(path):
            raise MaskGCTError(f"token grid file not found: {path}", "E_IO")
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_text(f.read())


class RvqStack(Module):
    """
    残差量化码本栈

    Attributes:
        codebooks: 由粗到细的 VqCodebook 列表，码向量维度一致
    """

    def __init__(self, layers: int, size: int, code_dim: int, rng: Rng):
        if layers < 1:
            raise ContractViolation("E_CONFIG_VALUE", f"RVQ needs at least one layer, got {layers}")
        self.codebooks = [VqCodebook(size, code_dim, rng) for _ in range(layers)]

    @property
    def layers(self) -> int:
        return len(self.codebooks)

    def entries(self) -> List[np.ndarray]:
        return [cb.weight.data for cb in self.codebooks]

    def quantize(self, z: Tensor) -> Tuple[np.ndarray, Tensor, Tensor, Tensor]:
        """
        训练用残差量化

        Returns:
            (网格 (layers, ...), 量化和, 未归一的码本项, 未归一的 commitment 项)
        """
        residual = z
        quantized = None
        codebook_term = None
        commit_term = None
        grid = []
        for cb in self.codebooks:
            idx = cb.nearest(residual.data)
            e = cb.lookup(idx)
            cb_diff = residual.detach() - e
            cm_diff = e.detach() - residual
            cb_sq = (cb_diff * cb_diff).sum()
            cm_sq = (cm_diff * cm_diff).sum()
            codebook_term = cb_sq if codebook_term is None else codebook_term + cb_sq
            commit_term = cm_sq if commit_term is None else commit_term + cm_sq
            quantized = e if quantized is None else quantized + e
            residual = residual - e.detach()
            grid.append(idx)
        return np.stack(grid), quantized, codebook_term, commit_term


def rvq_encode(features: np.ndarray, codebooks: Sequence[np.ndarray]) -> Tuple[np.ndarray, List[np.ndarray]]:
    """
    逐层残差量化

    Args:
        features: (..., c) 有限实数
        codebooks: 每层 (K, c) 码本

    Returns:
        (网格 (layers, ...), 每层量化之后的残差列表)
    """
    features = np.asarray(features)
    if not np.all(np.isfinite(features)):
        raise ContractViolation("E_RANGE", "rvq_encode input must be finite")
    residual = features
    grid, residuals = [], []
    for entries in codebooks:
        idx = nearest_codes(residual, entries)
        residual = residual - np.asarray(entries)[idx]
        grid.append(idx)
        residuals.append(residual)
    return np.stack(grid), residuals


def rvq_decode(grid: np.ndarray, codebooks: Sequence[np.ndarray], up_to_layer: int) -> np.ndarray:
    """第 1..j 层码本条目之和"""
    grid = np.asarray(grid)
    if not (1 <= up_to_layer <= len(codebooks)) or up_to_layer > grid.shape[0]:
        raise ContractViolation("E_RANGE", f"decode layer must be in [1, {len(codebooks)}], got {up_to_layer}")
    out = np.asarray(codebooks[0])[grid[0]]
    for j in range(1, up_to_layer):
        out = out + np.asarray(codebooks[j])[grid[j]]
    return out


def multi_window_l1(x: Tensor, x_hat: Tensor, windows: Sequence[int] = RECON_WINDOWS) -> Tensor:
    """
    多分辨率 L1：在每个窗口大小上对帧做不重叠平均池化后取平均绝对误差并求和

    比序列更长的窗口被跳过。输入形状 (B, T, d)。
    """
    x, x_hat = F.as_tensor(x), F.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ContractViolation("E_SHAPE", f"reconstruction shapes differ: {x.shape} vs {x_hat.shape}")
    b, t, d = x.shape
    total = None
    for w in windows:
        if w > t:
            continue
        n = t // w
        diff = (x - x_hat)[:, :n * w, :].reshape(b, n, w, d).mean(axis=2)
        term = diff.abs().mean()
        total = term if total is None else total + term
    return total


class AcousticLoss(NamedTuple):
    total: Tensor
    rec: Tensor
    codebook: Tensor
    commit: Tensor


def acoustic_recon_loss(x, x_hat: Tensor, codebook_term: Tensor, commit_term: Tensor,
                        lambda_rec: float = 10.0, lambda_codebook: float = 1.0, lambda_commit: float = 0.25,
                        windows: Sequence[int] = RECON_WINDOWS) -> AcousticLoss:
    """λ_rec·多分辨率 L1 + λ_codebook·码本项 + λ_commit·commitment 项"""
    rec = multi_window_l1(x, x_hat, windows)
    total = rec * lambda_rec + codebook_term * lambda_codebook + commit_term * lambda_commit
    return AcousticLoss(total, rec, codebook_term, commit_term)


class AcousticOutput(NamedTuple):
    recon: Tensor
    z: Tensor
    grid: np.ndarray
    codebook_term: Tensor
    commit_term: Tensor


class AcousticCodec(Module):
    """卷积编码器 + 因子化投影 + RVQ + 镜像解码器"""

    def __init__(self, config: CodecConfig, rng: Rng):
        self.config = config
        self.encoder = ConvStack(config.feature_dim, config.hidden, config.hidden, config.blocks, rng)
        self.projection = FactorizedProjection(config.hidden, config.code_dim, rng)
        self.rvq = RvqStack(config.layers, config.codebook_size, config.code_dim, rng)
        self.decoder = ConvStack(config.hidden, config.hidden, config.feature_dim, config.blocks, rng)
        self.feature_mean = np.zeros(config.feature_dim, dtype=np.float32)
        self.feature_var = np.ones(config.feature_dim, dtype=np.float32)

    def set_feature_stats(self, mean: np.ndarray, var: np.ndarray):
        self.feature_mean = np.asarray(mean, dtype=np.float32)
        self.feature_var = np.asarray(var, dtype=np.float32)

    def normalize(self, frames: np.ndarray) -> np.ndarray:
        return ((np.asarray(frames) - self.feature_mean) / np.sqrt(self.feature_var + 1e-8)).astype(np.float32)

    def encode(self, x) -> Tensor:
        x = F.as_tensor(x)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.shape[1] == 0:
            raise ContractViolation("E_EMPTY", "cannot encode an empty feature sequence")
        return self.projection.down(self.encoder(x))

    def decode_latent(self, q: Tensor) -> Tensor:
        return self.decoder(self.projection.up(q))

    def forward(self, x) -> AcousticOutput:
        z = self.encode(x)
        grid, quantized, cb, cm = self.rvq.quantize(z)
        recon = self.decode_latent(F.straight_through(z, quantized))
        scale = 1.0 / recon.size
        return AcousticOutput(recon, z, grid, cb * scale, cm * scale)

    def loss(self, x, output: AcousticOutput = None) -> AcousticLoss:
        output = output or self.forward(x)
        target = F.as_tensor(x)
        if target.ndim == 2:
            target = target.reshape(1, *target.shape)
        c = self.config
        return acoustic_recon_loss(target, output.recon, output.codebook_term, output.commit_term,
                                   c.lambda_rec, c.lambda_codebook, c.lambda_commit)

    def after_step(self, output: AcousticOutput, rng: Rng):
        # 第 j 层的候选向量取该层量化前的残差
        residual = output.z.data
        for j, cb in enumerate(self.rvq.codebooks):
            cb.revive_dead_codes(output.grid[j], residual, rng, self.config.dead_after)
            residual = residual - cb.weight.data[output.grid[j]]

    def tokenize(self, frames: np.ndarray) -> AcousticTokenGrid:
        """原始 (T, d) 特征 → 声学 token 网格"""
        with F.no_grad():
            z = self.encode(self.normalize(frames))
        grid, _ = rvq_encode(z.data[0], self.rvq.entries())
        return AcousticTokenGrid(grid)

    def decode_grid(self, grid: AcousticTokenGrid) -> np.ndarray:
        """声学 token 网格 → 原始尺度的 (T, d) 特征"""
        grid.validate(self.config.codebook_size)
        if grid.layers != self.rvq.layers:
            raise ContractViolation("E_SHAPE", f"grid has {grid.layers} layers, codec has {self.rvq.layers}")
        q = rvq_decode(grid.codes, self.rvq.entries(), grid.layers)
        with F.no_grad():
            recon = self.decode_latent(Tensor(q[None, :, :]))
        return (recon.data[0] * np.sqrt(self.feature_var + 1e-8) + self.feature_mean).astype(np.float32)
