# -*- coding: utf-8 -*-
"""
MaskGCT 核心模块

包含自动微分数值基础、Transformer 主干、掩码生成解码引擎、语义/声学编解码器、
T2S / S2A 生成模型、时长预测器，以及配置、检查点、语料、训练、合成与评估流程。

子模块依赖 src.models，这里只导出不依赖它的基础部分，其余请直接从子模块导入。
"""

from src.core.errors import (
    MaskGCTError,
    ContractViolation,
    NumericError,
    MissingCheckpointError,
)
from src.core.numerics import (
    Tensor,
    Rng,
    RngState,
    OptimizerState,
    AdamW,
    adamw_step,
    grad_of,
    lr_schedule,
    no_grad,
)

__all__ = [
    "MaskGCTError",
    "ContractViolation",
    "NumericError",
    "MissingCheckpointError",
    "Tensor",
    "Rng",
    "RngState",
    "OptimizerState",
    "AdamW",
    "adamw_step",
    "grad_of",
    "lr_schedule",
    "no_grad",
]
