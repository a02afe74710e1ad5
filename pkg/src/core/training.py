# -*- coding: utf-8 -*-
"""
训练编排模块

五种可训练模块（semantic_codec / acoustic_codec / t2s / s2a / duration）共用同一训练循环：
- 由解析后的配置与语料清单构建模块，AdamW + 预热/平方根倒数衰减
- 第 0 步即保存初始化检查点，之后每 train.checkpoint_every 步覆盖保存
- 出现 NaN/Inf 时立即中止，磁盘上保留最后一个正常的检查点
- 损失曲线写入 <kind>_loss.csv（step, loss, lr），断点续训时追加
"""

import logging
import os
from dataclasses import asdict
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.core.acoustic_codec import AcousticCodec
from src.core.checkpoint import (Checkpoint, load_checkpoint, pack_checkpoint, restore_optimizer,
                                 save_checkpoint)
from src.core.config import Config
from src.core.constants import MODULE_KINDS, checkpoint_file, loss_curve_file
from src.core.corpus import load_features, load_split, spec_from_manifest
from src.core.duration import DurationModel, fm_train_step
from src.core.errors import ContractViolation, MaskGCTError, NumericError
from src.core.masking import MaskSchedule
from src.core.nn import Module
from src.core.numerics import AdamW, Rng
from src.core.s2a import S2AModel, s2a_train_step
from src.core.semantic_codec import FeatureSequence, SemanticCodec, codec_train_step
from src.core.t2s import SemanticVocab, T2SModel, t2s_train_step
from src.models import SyntheticTaskSpec, TrainResult

logger = logging.getLogger('MaskGCT')

CODEC_KINDS = ('semantic_codec', 'acoustic_codec')
FEATURE_STREAM = {'semantic_codec': 'semantic_features', 'acoustic_codec': 'acoustic_features'}

# Rng.derive 子流：初始化 / 训练
_STREAM_INIT = 0
_STREAM_TRAIN = 1


def kind_key(kind: str) -> int:
    if kind not in MODULE_KINDS:
        raise ContractViolation("E_RANGE", f"unknown module kind '{kind}', expected one of {MODULE_KINDS}")
    return MODULE_KINDS.index(kind) + 1


def sync_corpus_config(config: Config, spec: SyntheticTaskSpec):
    """让 corpus.* 键与语料清单一致（词表大小等决定模型形状）"""
    for name, value in asdict(spec).items():
        if name == 'seed':
            continue
        key = f'corpus.{name}'
        if config.get(key) != value:
            logger.info(f"🔧 {key}: {config.get(key)} → {value}（来自语料清单）")
            config.set(key, value)


def build_module(kind: str, config: Config, rng: Rng) -> Module:
    """按配置构建指定类型的模块"""
    kind_key(kind)
    if kind in CODEC_KINDS:
        codec_cls = SemanticCodec if kind == 'semantic_codec' else AcousticCodec
        return codec_cls(config.codec(kind), rng)
    text_vocab = config.get('corpus.text_vocab')
    semantic_vocab = config.get('corpus.semantic_vocab')
    if kind == 't2s':
        return T2SModel(config.transformer('t2s'), text_vocab, SemanticVocab(semantic_vocab), rng)
    if kind == 's2a':
        return S2AModel(config.transformer('s2a'), semantic_vocab, config.get('corpus.acoustic_layers'),
                        config.get('corpus.acoustic_codebook'), rng)
    return DurationModel(config.transformer('duration'), text_vocab, rng)


def make_optimizer(kind: str, model: Module, config: Config) -> AdamW:
    return AdamW(model.parameters(), lr=config.get(f'{kind}.lr'), warmup=config.get(f'{kind}.warmup'),
                 weight_decay=config.get('optim.weight_decay'),
                 betas=(config.get('optim.beta1'), config.get('optim.beta2')), eps=config.get('optim.eps'))


# ==================== 编解码器附加状态 ====================

def _codebooks(model: Module) -> List:
    if isinstance(model, SemanticCodec):
        return [model.codebook]
    if isinstance(model, AcousticCodec):
        return list(model.rvq.codebooks)
    return []


def module_extras(model: Module) -> Dict[str, np.ndarray]:
    """不属于可训练参数、但推理或续训需要的数组"""
    if not isinstance(model, (SemanticCodec, AcousticCodec)):
        return {}
    extras = {'feature_mean': model.feature_mean, 'feature_var': model.feature_var}
    for i, cb in enumerate(_codebooks(model)):
        extras[f'unused_steps.{i}'] = cb.unused_steps.astype(np.float32)
    return extras


def restore_extras(model: Module, extras: Dict[str, np.ndarray]):
    if not isinstance(model, (SemanticCodec, AcousticCodec)):
        return
    if 'feature_mean' in extras:
        model.set_feature_stats(extras['feature_mean'], extras['feature_var'])
    for i, cb in enumerate(_codebooks(model)):
        if f'unused_steps.{i}' in extras:
            cb.unused_steps = extras[f'unused_steps.{i}'].astype(np.int64)


def load_module(path: str, kind: str) -> Tuple[Module, Config, Checkpoint]:
    """
    读取检查点并重建模块

    Returns:
        (模块, 检查点中保存的配置, 检查点)
    """
    ckpt = load_checkpoint(path, expected_kind=kind)
    config = Config.from_snapshot(ckpt.config)
    model = build_module(kind, config, Rng(0))
    model.load_state_dict(ckpt.model_state())
    restore_extras(model, ckpt.extras())
    return model, config, ckpt


# ==================== 数据与单步 ====================

def sample_batch(records: List, batch_size: int, rng: Rng) -> List:
    """有放回地抽取一个 batch"""
    if not records:
        raise ContractViolation("E_EMPTY", "training corpus is empty")
    return [records[i] for i in rng.integers(0, len(records), size=batch_size)]


def make_step(kind: str, model: Module, optimizer: AdamW, config: Config, corpus_dir: str,
              fresh: bool) -> Callable[[Rng], float]:
    """
    准备训练数据并返回单步函数 step(rng) -> loss

    Args:
        fresh: 新训练时由训练特征计算归一化统计量；续训时沿用检查点中的统计量
    """
    batch_size = config.get(f'{kind}.batch')
    schedule = MaskSchedule(config.get('mask.schedule'))

    if kind in CODEC_KINDS:
        raw = load_features(corpus_dir, FEATURE_STREAM[kind], 'train')
        if fresh:
            seq = FeatureSequence.from_frames(raw)
            model.set_feature_stats(seq.mean, seq.var)
        frames = model.normalize(raw)
        window = config.get(f'{kind}.window')
        return lambda rng: codec_train_step(model, optimizer, frames, batch_size, window, rng)

    prompt_drop = config.get(f'{kind}.prompt_drop')
    if kind == 't2s':
        records = [(r.text, r.semantic) for r in load_split(corpus_dir, 't2s', 'train')]
        return lambda rng: t2s_train_step(model, optimizer, sample_batch(records, batch_size, rng),
                                          schedule, rng, prompt_drop)
    if kind == 's2a':
        records = [(r.semantic, r.grid) for r in load_split(corpus_dir, 's2a', 'train')]
        return lambda rng: s2a_train_step(model, optimizer, sample_batch(records, batch_size, rng),
                                          schedule, rng, prompt_drop)
    records = load_split(corpus_dir, 'duration', 'train')
    return lambda rng: fm_train_step(model, optimizer, sample_batch(records, batch_size, rng), rng, prompt_drop)


# ==================== 损失曲线 ====================

def write_loss_curve(path: str, rows: List[Dict], start_step: int):
    """写出损失曲线；续训时保留 step ≤ start_step 的旧记录"""
    frame = pd.DataFrame(rows, columns=['step', 'loss', 'lr'])
    if start_step > 0 and os.path.isfile(path):
        old = pd.read_csv(path)
        frame = pd.concat([old[old['step'] <= start_step], frame], ignore_index=True)
    frame.to_csv(path, index=False, float_format='%.8g')


def read_loss_curve(path: str) -> pd.DataFrame:
    if not os.path.isfile(path):
        raise MaskGCTError(f"loss curve not found: {path}", "E_IO")
    return pd.read_csv(path)


# ==================== 训练主循环 ====================

def train(kind: str, config: Config, corpus_dir: str, out_dir: str, resume: Optional[str] = None,
          steps: Optional[int] = None, progress: bool = True) -> TrainResult:
    """
    训练一个模块

    Args:
        kind: 模块类型
        config: 解析后的配置（corpus.* 会按语料清单同步）
        corpus_dir: gen_corpus 的输出目录
        out_dir: 检查点与损失曲线输出目录
        resume: 续训的检查点路径；步数计数从检查点继续
        steps: 目标总步数，默认取 <kind>.steps
        progress: 是否显示 tqdm 进度条

    Returns:
        TrainResult

    Raises:
        NumericError: 训练中出现非有限值（已保留最后一个正常检查点）
    """
    key = kind_key(kind)
    sync_corpus_config(config, spec_from_manifest(corpus_dir))
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, checkpoint_file(kind))
    curve_path = os.path.join(out_dir, loss_curve_file(kind))
    seed = config.get('seed')

    model = build_module(kind, config, Rng.derive(seed, key, _STREAM_INIT))
    optimizer = make_optimizer(kind, model, config)
    rng = Rng.derive(seed, key, _STREAM_TRAIN)
    if resume:
        ckpt = load_checkpoint(resume, expected_kind=kind)
        model.load_state_dict(ckpt.model_state())
        restore_extras(model, ckpt.extras())
        if ckpt.has_optimizer():
            restore_optimizer(ckpt, optimizer)
        rng = Rng.from_state(ckpt.rng)
        logger.info(f"🔁 从检查点续训: {resume} (step={ckpt.step})")
    step_fn = make_step(kind, model, optimizer, config, corpus_dir, fresh=not resume)

    start = optimizer.state.step
    target = config.get(f'{kind}.steps') if steps is None else int(steps)
    every = max(1, config.get('train.checkpoint_every'))
    log_every = max(1, config.get('train.log_every'))
    config_lines = config.to_lines()
    logger.info(f"🚀 开始训练 {kind}: step {start} → {target}, 参数量 {model.parameter_count()}, "
                f"config hash {config.hash()}")

    def snapshot():
        save_checkpoint(ckpt_path, pack_checkpoint(kind, config_lines, model, optimizer, rng,
                                                   module_extras(model)))

    if start == 0 or not os.path.isfile(ckpt_path):
        snapshot()

    rows: List[Dict] = []
    try:
        with tqdm(total=max(target - start, 0), desc=f"训练 {kind}", unit="step", disable=not progress) as pbar:
            for step in range(start + 1, target + 1):
                loss = step_fn(rng)
                if not np.isfinite(loss):
                    raise NumericError(f"{kind}_train_step", "non-finite loss")
                rows.append({'step': step, 'loss': loss, 'lr': optimizer.lr})
                pbar.update(1)
                pbar.set_postfix({'loss': f"{loss:.4f}", 'lr': f"{optimizer.lr:.2e}"})
                if step % log_every == 0:
                    logger.info(f"{kind} step {step}: loss={loss:.5f} lr={optimizer.lr:.3e}")
                if step % every == 0 or step == target:
                    snapshot()
    except NumericError as e:
        logger.error(f"❌ {kind} 训练在 step {start + len(rows) + 1} 出现数值错误，保留最后的检查点 {ckpt_path}: {e}")
        write_loss_curve(curve_path, rows, start)
        raise

    write_loss_curve(curve_path, rows, start)
    final_step = max(start, target)
    result = TrainResult(kind=kind, checkpoint=ckpt_path, loss_curve=curve_path, steps=final_step,
                         initial_loss=rows[0]['loss'] if rows else None,
                         final_loss=rows[-1]['loss'] if rows else None)
    if rows:
        logger.info(f"✅ {kind} 训练完成: step {final_step}, loss {result.initial_loss:.4f} → {result.final_loss:.4f}")
    else:
        logger.info(f"✅ {kind} 无需训练（已在 step {start}）")
    return result
