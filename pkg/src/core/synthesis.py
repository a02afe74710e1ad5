# -*- coding: utf-8 -*-
"""
端到端合成模块

文本 + 提示 → 语义 token（T2S）→ 声学 token 网格（S2A）→ 可选的连续特征（声学编解码器）。
目标长度可以直接给定，也可以由时长预测器根据文本与提示时长预测；两种情况都会乘以
synth.duration_multiplier（语速控制）。
"""

import logging
import os
from typing import Dict, Optional

import numpy as np

from src.core.acoustic_codec import AcousticTokenGrid
from src.core.config import Config
from src.core.constants import checkpoint_file
from src.core.duration import predict_total_duration
from src.core.errors import ContractViolation, MaskGCTError, MissingCheckpointError
from src.core.masking import MaskSchedule
from src.core.numerics import Rng
from src.core.s2a import resolve_layer_steps, s2a_generate
from src.core.semantic_codec import write_features
from src.core.t2s import t2s_generate
from src.core.training import load_module
from src.models import PromptRecord, SynthesisResult

logger = logging.getLogger('MaskGCT')

MULTIPLIER_RANGE = (0.5, 2.0)

# 每次合成内部的子流编号
_STREAM_DURATION = 1
_STREAM_T2S = 2
_STREAM_S2A = 3


def scaled_length(base: int, multiplier: float) -> int:
    """round(base × multiplier)，至少为 1"""
    lo, hi = MULTIPLIER_RANGE
    if not (lo <= multiplier <= hi):
        raise ContractViolation("E_RANGE", f"duration multiplier must be in [{lo}, {hi}], got {multiplier}")
    return max(1, int(np.floor(base * multiplier + 0.5)))


class MaskGCTPipeline:
    """
    两阶段合成流水线

    Attributes:
        config: 运行时配置（解码参数取自这里，模型结构取自各自检查点）
        t2s / s2a: 必需模型
        duration: 时长预测器（仅在预测长度时需要）
        acoustic_codec: 声学编解码器（可选，用于还原连续特征）
    """

    def __init__(self, ckpt_dir: str, config: Optional[Config] = None, need_duration: bool = False):
        self.ckpt_dir = ckpt_dir
        paths = {kind: os.path.join(ckpt_dir, checkpoint_file(kind))
                 for kind in ('t2s', 's2a', 'duration', 'acoustic_codec')}
        required = ['t2s', 's2a'] + (['duration'] if need_duration else [])
        for kind in required:
            if not os.path.isfile(paths[kind]):
                raise MissingCheckpointError(kind, paths[kind])

        self.t2s, t2s_config, _ = load_module(paths['t2s'], 't2s')
        self.s2a, _, _ = load_module(paths['s2a'], 's2a')
        self.duration = load_module(paths['duration'], 'duration')[0] if os.path.isfile(paths['duration']) else None
        self.acoustic_codec = None
        if os.path.isfile(paths['acoustic_codec']):
            self.acoustic_codec = load_module(paths['acoustic_codec'], 'acoustic_codec')[0]
        self.config = config or t2s_config
        self.schedule = MaskSchedule(self.config.get('mask.schedule'))
        logger.info(f"🧩 已加载模型: t2s, s2a"
                    f"{', duration' if self.duration else ''}{', acoustic_codec' if self.acoustic_codec else ''}")

    def predict_length(self, text: np.ndarray, prompt: PromptRecord, rng: Rng) -> int:
        if self.duration is None:
            raise MissingCheckpointError('duration', os.path.join(self.ckpt_dir, checkpoint_file('duration')))
        prompt_phones = prompt.text if prompt.durations is not None else ()
        prompt_durations = prompt.durations if prompt.durations is not None else ()
        return predict_total_duration(self.duration, text, prompt_phones, prompt_durations, rng,
                                      steps=self.config.get('duration.solver_steps'),
                                      w_cfg=self.config.get('duration.cfg_w'))

    def synthesize(self, text: np.ndarray, prompt: PromptRecord, length: Optional[int] = None,
                   rng: Optional[Rng] = None, out_dir: Optional[str] = None, t2s_steps: Optional[int] = None,
                   layer_steps=None, multiplier: Optional[float] = None) -> SynthesisResult:
        """
        合成目标文本

        Args:
            text: 目标文本 ID（不含提示文本）
            prompt: 提示记录；提示语义与提示网格帧数必须一致
            length: 给定的目标语义长度；None 表示由时长预测器预测
            rng: 随机流，默认由 seed 派生
            out_dir: 若给出则写出 semantic.txt / acoustic_grid.txt / synthesis.txt（及 features.mgft）
            t2s_steps: 覆盖 t2s.decode_steps
            layer_steps: 覆盖 s2a.layer_steps
            multiplier: 覆盖 synth.duration_multiplier

        Raises:
            ContractViolation: 文本为空、提示未对齐或长度非法
            MissingCheckpointError: 预测长度但缺少时长模型
        """
        text = np.asarray(text, dtype=np.int64).reshape(-1)
        if text.size == 0:
            raise ContractViolation("E_EMPTY", "text must not be empty")
        prompt_semantic = np.asarray(prompt.semantic, dtype=np.int64).reshape(-1)
        prompt_grid = np.asarray(prompt.grid, dtype=np.int64).reshape(self.s2a.layers, -1)
        if prompt_grid.shape[1] != len(prompt_semantic):
            raise ContractViolation("E_ALIGNMENT", f"prompt grid has {prompt_grid.shape[1]} frames, prompt semantic "
                                                   f"has {len(prompt_semantic)}")
        rng = rng or Rng.derive(self.config.get('seed'), 0)
        multiplier = self.config.get('synth.duration_multiplier') if multiplier is None else multiplier

        predicted = None
        if length is None:
            predicted = self.predict_length(text, prompt, rng.split(_STREAM_DURATION))
            base, mode = predicted, 'predict'
        else:
            if int(length) < 1:
                raise ContractViolation("E_RANGE", f"target length must be >= 1, got {length}")
            base, mode = int(length), 'given'
        n_target = scaled_length(base, multiplier)

        steps = self.config.get('t2s.decode_steps') if t2s_steps is None else int(t2s_steps)
        full_text = np.concatenate([np.asarray(prompt.text, dtype=np.int64).reshape(-1), text])
        semantic = t2s_generate(self.t2s, full_text, prompt_semantic, n_target, self.config.decode('t2s', steps),
                                rng.split(_STREAM_T2S), self.schedule)

        schedule_value = self.config.get('s2a.layer_steps') if layer_steps is None else layer_steps
        per_layer = resolve_layer_steps(schedule_value, self.s2a.layers)
        grid = s2a_generate(self.s2a, np.concatenate([prompt_semantic, semantic]), prompt_grid, per_layer,
                            self.config.decode('s2a'), rng.split(_STREAM_S2A), self.schedule)

        features = None
        if self.acoustic_codec is not None:
            if self.acoustic_codec.rvq.layers == grid.shape[0]:
                features = self.acoustic_codec.decode_grid(AcousticTokenGrid(grid))
            else:
                logger.warning(f"⚠️ 声学编解码器有 {self.acoustic_codec.rvq.layers} 层，网格有 {grid.shape[0]} 层，"
                               f"跳过特征还原")

        result = SynthesisResult(semantic=semantic, grid=grid, length=n_target, length_mode=mode,
                                 predicted_length=predicted, features=features)
        logger.info(f"🎙️ 合成完成: |text|={len(text)}, length={n_target} ({mode}), t2s_steps={steps}, "
                    f"layer_steps={per_layer}")
        if out_dir:
            result.artifacts = write_artifacts(result, out_dir, self.config, steps, per_layer, multiplier)
        return result


def write_artifacts(result: SynthesisResult, out_dir: str, config: Config, t2s_steps: int, layer_steps,
                    multiplier: float) -> Dict[str, str]:
    """写出 token 产物与元数据"""
    try:
        os.makedirs(out_dir, exist_ok=True)
        paths = {'semantic': os.path.join(out_dir, 'semantic.txt'),
                 'acoustic_grid': os.path.join(out_dir, 'acoustic_grid.txt'),
                 'metadata': os.path.join(out_dir, 'synthesis.txt')}
        with open(paths['semantic'], 'w', encoding='utf-8') as f:
            f.write(' '.join(str(int(v)) for v in result.semantic) + '\n')
        AcousticTokenGrid(result.grid).save(paths['acoustic_grid'])
        if result.features is not None:
            paths['features'] = os.path.join(out_dir, 'features.mgft')
            write_features(paths['features'], result.features)
        meta = {
            'length': result.length,
            'length_mode': result.length_mode,
            'predicted_length': '' if result.predicted_length is None else result.predicted_length,
            'duration_multiplier': repr(float(multiplier)),
            't2s_steps': t2s_steps,
            'layer_steps': ','.join(str(s) for s in layer_steps),
            'layers': result.grid.shape[0],
            'frames': result.grid.shape[1],
            'config_hash': config.hash(),
        }
        with open(paths['metadata'], 'w', encoding='utf-8') as f:
            f.write(''.join(f"{k}={v}\n" for k, v in meta.items()))
    except OSError as e:
        raise MaskGCTError(f"cannot write synthesis artifacts to {out_dir}: {e}", "E_IO") from e
    logger.info(f"💾 合成产物已写出: {out_dir}")
    return paths


def read_semantic(path: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise MaskGCTError(f"semantic token file not found: {path}", "E_IO")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            return np.asarray([int(v) for v in f.read().split()], dtype=np.int64)
        except ValueError as e:
            raise ContractViolation("E_FORMAT", f"bad semantic token file {path}") from e
