# -*- coding: utf-8 -*-
"""
数据模型模块

定义训练、解码、语料生成与评估流程中共享的核心数据类。
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.core.errors import ContractViolation


@dataclass
class TransformerConfig:
    """
    双向 Transformer 主干配置

    Attributes:
        layers: 层数
        model_dim: 隐藏维度
        ffn_dim: SwiGLU 前馈维度
        heads: 注意力头数
        rope_theta: RoPE 基频
        vocab_sizes: 各嵌入表大小（仅用于记录）
    """
    layers: int = 2
    model_dim: int = 64
    ffn_dim: int = 256
    heads: int = 4
    rope_theta: float = 10000.0
    vocab_sizes: Dict[str, int] = field(default_factory=dict)

    def validate(self) -> 'TransformerConfig':
        for name in ('layers', 'model_dim', 'ffn_dim', 'heads'):
            if getattr(self, name) < 1:
                raise ContractViolation("E_CONFIG_VALUE", f"{name} must be >= 1, got {getattr(self, name)}")
        if self.model_dim % self.heads != 0:
            raise ContractViolation("E_SHAPE", f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if (self.model_dim // self.heads) % 2 != 0:
            raise ContractViolation("E_SHAPE", f"head dim {self.model_dim // self.heads} must be even for RoPE")
        if self.rope_theta <= 0:
            raise ContractViolation("E_CONFIG_VALUE", f"rope_theta must be positive, got {self.rope_theta}")
        return self


@dataclass
class DecodeConfig:
    """
    迭代并行解码配置

    Attributes:
        steps: 解码步数 S
        top_k: 采样前保留的候选数（超过词表大小时截断为词表大小）
        temp_start: 首步温度
        temp_end: 末步温度（0 表示 argmax）
        gumbel: 是否在置信度排序上叠加退火 Gumbel 噪声
        w_cfg: classifier-free guidance 强度
        w_rescale: CFG rescale 混合权重
    """
    steps: int = 25
    top_k: int = 20
    temp_start: float = 1.5
    temp_end: float = 0.0
    gumbel: bool = True
    w_cfg: float = 2.5
    w_rescale: float = 0.75

    def validate(self) -> 'DecodeConfig':
        if self.steps < 1:
            raise ContractViolation("E_RANGE", f"decode steps must be >= 1, got {self.steps}")
        if self.top_k < 1:
            raise ContractViolation("E_RANGE", f"top_k must be >= 1, got {self.top_k}")
        if not (self.temp_start >= self.temp_end >= 0):
            raise ContractViolation("E_RANGE", f"need temp_start >= temp_end >= 0, got "
                                               f"{self.temp_start} -> {self.temp_end}")
        return self

    def with_steps(self, steps: int) -> 'DecodeConfig':
        return DecodeConfig(steps, self.top_k, self.temp_start, self.temp_end,
                            self.gumbel, self.w_cfg, self.w_rescale).validate()


@dataclass
class CodecConfig:
    """
    语义 / 声学编解码器配置

    Attributes:
        feature_dim: 输入特征维度 d
        hidden: 卷积块隐藏维度
        blocks: 编码器（及镜像解码器）卷积块数
        codebook_size: 每层码本条目数 K
        code_dim: 因子化码向量维度 c
        layers: 量化层数（语义编解码器固定为 1）
        lambda_rec / lambda_codebook / lambda_commit: 损失权重
        dead_after: 连续未使用多少步后重置码本条目（0 表示关闭）
    """
    feature_dim: int = 16
    hidden: int = 32
    blocks: int = 2
    codebook_size: int = 64
    code_dim: int = 4
    layers: int = 1
    lambda_rec: float = 1.0
    lambda_codebook: float = 1.0
    lambda_commit: float = 0.25
    dead_after: int = 200


@dataclass
class SyntheticTaskSpec:
    """
    合成语料规格，完全由 seed 决定

    Attributes:
        seed: 随机种子
        utterances: 句子条数
        text_vocab: 文本符号表大小
        semantic_vocab: 语义码表大小
        min_symbols / max_symbols: 每句文本长度范围
        mapping: 'deterministic' 或 'stochastic'（0.8/0.2 双候选）
        acoustic_layers: 声学 RVQ 层数
        acoustic_codebook: 每层声学码本大小
        feature_dim: 合成连续特征维度
        feature_clusters: 合成特征簇数
        feature_noise: 簇内噪声标准差
        feature_frames: 每个特征流的总帧数
        duration_sigma: 音素帧数权重的对数正态噪声标准差
        duration_constant: >0 时每个音素固定为 2 帧（与语义帧一致）
        duration_tempo_sigma: 每句语速因子（对数域，作用于帧数分配）的标准差
        heldout_fraction: 留出集比例
    """
    seed: int = 1234
    utterances: int = 600
    text_vocab: int = 16
    semantic_vocab: int = 64
    min_symbols: int = 4
    max_symbols: int = 12
    mapping: str = "deterministic"
    acoustic_layers: int = 4
    acoustic_codebook: int = 32
    feature_dim: int = 16
    feature_clusters: int = 8
    feature_noise: float = 0.02
    feature_frames: int = 4096
    duration_sigma: float = 0.1
    duration_constant: int = 0
    duration_tempo_sigma: float = 0.0
    heldout_fraction: float = 0.1

    def validate(self) -> 'SyntheticTaskSpec':
        if self.mapping not in ('deterministic', 'stochastic'):
            raise ContractViolation("E_CONFIG_VALUE", f"unknown corpus mapping '{self.mapping}'")
        if not (1 <= self.min_symbols <= self.max_symbols):
            raise ContractViolation("E_CONFIG_VALUE", "need 1 <= min_symbols <= max_symbols")
        pairs_needed = self.text_vocab * (2 if self.mapping == 'stochastic' else 1)
        if pairs_needed > self.semantic_vocab ** 2:
            raise ContractViolation("E_CONFIG_VALUE", "semantic vocabulary too small for an injective map")
        if self.utterances < 2:
            raise ContractViolation("E_CONFIG_VALUE", "need at least 2 utterances")
        return self


@dataclass
class Utterance:
    """
    一条合成句子的全部真值

    Attributes:
        text: 文本符号 ID
        semantic: 语义 token（每个符号展开为 2 帧）
        grid: 声学 token 网格，形状 (layers, frames)
        durations: 每个文本符号的时长（帧）
    """
    text: np.ndarray
    semantic: np.ndarray
    grid: np.ndarray
    durations: np.ndarray


@dataclass
class PromptRecord:
    """
    合成时的上下文提示

    Attributes:
        text: 提示文本 ID
        semantic: 提示语义 token
        grid: 提示声学网格 (layers, frames)，帧数与 semantic 相同
        durations: 提示音素时长（仅在预测时长时需要）
    """
    text: np.ndarray
    semantic: np.ndarray
    grid: np.ndarray
    durations: Optional[np.ndarray] = None


@dataclass
class SynthesisResult:
    """
    合成结果

    Attributes:
        semantic: 生成的目标语义 token
        grid: 生成的目标声学网格 (layers, frames)
        length: 使用的目标长度
        length_mode: 'given' 或 'predict'
        predicted_length: 时长模型的原始预测值（未乘倍率）
        features: 由声学编解码器还原的连续特征（可选）
        artifacts: 写出的文件路径
    """
    semantic: np.ndarray
    grid: np.ndarray
    length: int
    length_mode: str = "given"
    predicted_length: Optional[int] = None
    features: Optional[np.ndarray] = None
    artifacts: Dict[str, str] = field(default_factory=dict)


@dataclass
class TrainResult:
    """
    训练结果

    Attributes:
        kind: 模块类型
        checkpoint: 最终检查点路径
        loss_curve: 损失曲线 CSV 路径
        steps: 最终步数
        initial_loss: 第一步损失（未训练时为 None）
        final_loss: 最后一步损失
    """
    kind: str
    checkpoint: str
    loss_curve: str
    steps: int
    initial_loss: Optional[float] = None
    final_loss: Optional[float] = None


@dataclass
class SweepRow:
    """
    评估扫描表中的一行

    Attributes:
        stage: 't2s' / 's2a' / 'duration'
        setting: 扫描取值（步数、预设名或倍率）
        token_accuracy: token 级准确率
        exact_match: 整句完全匹配率
    """
    stage: str
    setting: str
    token_accuracy: float = 0.0
    exact_match: float = 0.0


@dataclass
class EvalReport:
    """
    评估报告

    Attributes:
        token_accuracy: T2S 目标 token 准确率
        exact_match: T2S 整句完全匹配率
        layer_accuracy: S2A 每层声学 token 准确率
        grid_exact_match: S2A 全网格完全匹配率
        e2e_grid_exact_match: T2S→S2A 串联后的全网格完全匹配率
        e2e_predict_grid_exact_match: 目标长度由时长模型预测时的串联全网格完全匹配率（长度不符即不匹配）
        e2e_predict_length_error: 预测目标长度相对真值语义长度的平均相对误差
        codebook_utilization: 语义码本使用率（已用条目 / K）
        codes_used: 语义码本已用条目数
        duration_relative_error: 时长预测平均相对误差
        duration_within_10pct: 相对误差 ≤ 10% 的句子比例
        utterances: 参与评估的句子数
        config_hash: 配置哈希
        wall_clock: 耗时（秒，不参与相等比较）
        sweep: 扫描结果
    """
    token_accuracy: float = 0.0
    exact_match: float = 0.0
    layer_accuracy: List[float] = field(default_factory=list)
    grid_exact_match: float = 0.0
    e2e_grid_exact_match: float = 0.0
    e2e_predict_grid_exact_match: float = 0.0
    e2e_predict_length_error: float = 0.0
    codebook_utilization: float = 0.0
    codes_used: int = 0
    duration_relative_error: float = 0.0
    duration_within_10pct: float = 0.0
    utterances: int = 0
    config_hash: str = ""
    wall_clock: float = field(default=0.0, compare=False)
    sweep: List[SweepRow] = field(default_factory=list)


def rates_of(report: EvalReport) -> List[Tuple[str, float]]:
    """报告中所有应位于 [0, 1] 的比率"""
    rates = [('token_accuracy', report.token_accuracy), ('exact_match', report.exact_match),
             ('grid_exact_match', report.grid_exact_match),
             ('e2e_grid_exact_match', report.e2e_grid_exact_match),
             ('e2e_predict_grid_exact_match', report.e2e_predict_grid_exact_match),
             ('codebook_utilization', report.codebook_utilization),
             ('duration_within_10pct', report.duration_within_10pct)]
    rates += [(f'layer_accuracy[{i}]', v) for i, v in enumerate(report.layer_accuracy)]
    return rates
