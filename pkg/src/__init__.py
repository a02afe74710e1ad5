# -*- coding: utf-8 -*-
"""
MaskGCT 桌面规模实现

两阶段掩码生成式编解码 token 流水线：语义 / 声学量化器、文本到语义与语义到声学
的掩码生成 Transformer、迭代并行解码、classifier-free guidance，以及基于流匹配的
时长预测器。全部在已知真值的合成语料上训练与验证。
"""

__version__ = "1.0.0"

from src.models import (
    TransformerConfig,
    DecodeConfig,
    CodecConfig,
    SyntheticTaskSpec,
    PromptRecord,
    EvalReport,
)

__all__ = [
    "TransformerConfig",
    "DecodeConfig",
    "CodecConfig",
    "SyntheticTaskSpec",
    "PromptRecord",
    "EvalReport",
]
