# -*- coding: utf-8 -*-
"""
合成语料生成与读取模块

由 SyntheticTaskSpec 与种子完全确定，生成带已知真值的小规模任务：
- 文本符号 → 语义 token 对（确定性单射，或 0.8/0.2 双候选的随机版本）
- 语义 token → 每层声学 token（逐层固定映射，保证 S2A 对齐）
- 音素时长：与音素相关的对数正态分布（可选恒定时长、可选句级语速因子）
- 编解码器训练用的聚类连续特征流

输出文件（train / heldout 两份，按种子 90/10 划分）：
    t2s_<split>.txt          TEXT_IDS | SEMANTIC_IDS
    s2a_<split>.txt          SEMANTIC_IDS | PROMPT_FRAMES | LAYER_1_IDS / LAYER_2_IDS / ...
    duration_<split>.txt     PHONE_IDS | DURATIONS
    semantic_features_<split>.mgft / acoustic_features_<split>.mgft
    corpus.txt               key=value 清单
"""

import logging
import os
from dataclasses import asdict
from typing import Dict, List, NamedTuple

import numpy as np

from src.core.constants import CORPUS_MANIFEST, SPLITS, corpus_file
from src.core.duration import DurationSample
from src.core.errors import ContractViolation, MaskGCTError
from src.core.numerics import Rng
from src.core.semantic_codec import read_features, write_features
from src.models import SyntheticTaskSpec, Utterance

logger = logging.getLogger('MaskGCT')

FRAMES_PER_SYMBOL = 2
PRIMARY_PROBABILITY = 0.8
S2A_PROMPT_FRACTION = 0.3
MAX_RUN = 4

# Rng.derive 的子流编号
_KEY_MAPS = 1
_KEY_UTTERANCES = 2
_KEY_SPLIT = 3
_KEY_SEMANTIC_FEATURES = 4
_KEY_ACOUSTIC_FEATURES = 5


class T2SRecord(NamedTuple):
    text: np.ndarray
    semantic: np.ndarray


class S2ARecord(NamedTuple):
    semantic: np.ndarray
    prompt_frames: int
    grid: np.ndarray


class TaskMaps(NamedTuple):
    """
    任务真值映射

    Attributes:
        pairs: (text_vocab, 2) 主语义 token 对
        alt_pairs: (text_vocab, 2) 备选 token 对（仅随机映射使用）
        layer_maps: (acoustic_layers, semantic_vocab) 语义 → 声学逐层映射
        duration_base: (text_vocab,) 每个音素分配帧数的相对权重
    """
    pairs: np.ndarray
    alt_pairs: np.ndarray
    layer_maps: np.ndarray
    duration_base: np.ndarray


def build_task_maps(spec: SyntheticTaskSpec) -> TaskMaps:
    rng = Rng.derive(spec.seed, _KEY_MAPS)
    n_pairs = spec.text_vocab * (2 if spec.mapping == 'stochastic' else 1)
    if n_pairs > spec.semantic_vocab ** 2:
        raise ContractViolation("E_CONFIG_VALUE", f"semantic vocab {spec.semantic_vocab} cannot hold {n_pairs} "
                                                  f"distinct token pairs")
    flat = rng.choice(spec.semantic_vocab ** 2, size=n_pairs, replace=False)
    all_pairs = np.stack([flat // spec.semantic_vocab, flat % spec.semantic_vocab], axis=1).astype(np.int64)
    pairs = all_pairs[:spec.text_vocab]
    alt_pairs = all_pairs[spec.text_vocab:] if spec.mapping == 'stochastic' else pairs.copy()
    layer_maps = rng.integers(0, spec.acoustic_codebook, size=(spec.acoustic_layers, spec.semantic_vocab))
    duration_base = rng.uniform(spec.text_vocab, 0.5, 2.0)
    return TaskMaps(pairs, alt_pairs, layer_maps.astype(np.int64), duration_base)


def expand_text(text: np.ndarray, maps: TaskMaps, rng: Rng, mapping: str = 'deterministic') -> np.ndarray:
    """文本符号 → 语义 token（每个符号 2 帧）"""
    text = np.asarray(text, dtype=np.int64)
    chosen = maps.pairs[text]
    if mapping == 'stochastic':
        use_alt = rng.uniform(len(text)) >= PRIMARY_PROBABILITY
        chosen = np.where(use_alt[:, None], maps.alt_pairs[text], chosen)
    return chosen.reshape(-1)


def acoustic_grid(semantic: np.ndarray, maps: TaskMaps) -> np.ndarray:
    """第 l 层第 f 帧 = layer_maps[l, S[f]]"""
    return maps.layer_maps[:, np.asarray(semantic, dtype=np.int64)]


def allocate_frames(weights: np.ndarray, total: int) -> np.ndarray:
    """把 total 帧按权重分给各音素：每个至少 1 帧，余数按最大小数部分分配，总和恰为 total"""
    weights = np.asarray(weights, dtype=np.float64)
    n = len(weights)
    if total < n:
        raise ContractViolation("E_RANGE", f"cannot give {n} phones at least one frame out of {total}")
    shares = (total - n) * weights / weights.sum()
    durations = np.floor(shares).astype(np.int64)
    left = total - n - int(durations.sum())
    durations[np.argsort(-(shares - durations), kind='stable')[:left]] += 1
    return durations + 1


def sample_durations(text: np.ndarray, spec: SyntheticTaskSpec, maps: TaskMaps, rng: Rng) -> np.ndarray:
    """
    音素时长（整数帧，≥ 1），总和等于该句的语义帧数 FRAMES_PER_SYMBOL·len(text)

    音素相关的基准权重叠加对数正态噪声；语速因子作为权重的指数，只改变帧在音素间的分配。
    duration_constant > 0 时每个音素均为 FRAMES_PER_SYMBOL 帧。
    """
    total = FRAMES_PER_SYMBOL * len(text)
    if spec.duration_constant > 0:
        return np.full(len(text), FRAMES_PER_SYMBOL, dtype=np.int64)
    tempo = float(rng.normal()) * spec.duration_tempo_sigma
    noise = rng.normal(len(text)) * spec.duration_sigma
    weights = (maps.duration_base[np.asarray(text)] * np.exp(noise)) ** np.exp(tempo)
    return allocate_frames(weights, total)


def generate_utterances(spec: SyntheticTaskSpec, maps: TaskMaps) -> List[Utterance]:
    rng = Rng.derive(spec.seed, _KEY_UTTERANCES)
    utterances = []
    for _ in range(spec.utterances):
        length = int(rng.integers(spec.min_symbols, spec.max_symbols + 1))
        text = rng.integers(0, spec.text_vocab, size=length).astype(np.int64)
        semantic = expand_text(text, maps, rng, spec.mapping)
        utterances.append(Utterance(text, semantic, acoustic_grid(semantic, maps),
                                    sample_durations(text, spec, maps, rng)))
    return utterances


def split_indices(spec: SyntheticTaskSpec) -> Dict[str, np.ndarray]:
    order = Rng.derive(spec.seed, _KEY_SPLIT).permutation(spec.utterances)
    n_heldout = max(1, int(round(spec.utterances * spec.heldout_fraction)))
    return {'train': np.sort(order[n_heldout:]), 'heldout': np.sort(order[:n_heldout])}


def clustered_features(spec: SyntheticTaskSpec, frames: int, rng: Rng, centers: np.ndarray) -> np.ndarray:
    """由若干簇中心组成的特征流：每段 1–4 帧取同一簇，叠加小噪声"""
    labels = []
    while len(labels) < frames:
        labels.extend([int(rng.integers(0, len(centers)))] * int(rng.integers(1, MAX_RUN + 1)))
    labels = np.asarray(labels[:frames])
    noise = rng.normal((frames, spec.feature_dim)) * spec.feature_noise
    return (centers[labels] + noise).astype(np.float32)


def prompt_frames_for(text: np.ndarray) -> int:
    return FRAMES_PER_SYMBOL * int(S2A_PROMPT_FRACTION * len(text))


def _ids(values) -> str:
    return ' '.join(str(int(v)) for v in values)


def format_t2s_record(utt: Utterance) -> str:
    return f"{_ids(utt.text)} | {_ids(utt.semantic)}"


def format_s2a_record(semantic: np.ndarray, prompt_frames: int, grid: np.ndarray) -> str:
    layers = ' / '.join(_ids(row) for row in grid)
    return f"{_ids(semantic)} | {prompt_frames} | {layers}"


def format_duration_record(utt: Utterance) -> str:
    return f"{_ids(utt.text)} | {_ids(utt.durations)}"


def _write_lines(path: str, lines: List[str]):
    try:
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write('\n'.join(lines) + '\n')
    except OSError as e:
        raise MaskGCTError(f"cannot write corpus file {path}: {e}", "E_IO") from e


def gen_corpus(spec: SyntheticTaskSpec, out_dir: str) -> Dict[str, str]:
    """
    生成全部语料文件

    Args:
        spec: 任务描述
        out_dir: 输出目录（不存在则创建）

    Returns:
        文件类型 → 路径

    Raises:
        MaskGCTError: 目录不可写（E_IO）
    """
    spec.validate()
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise MaskGCTError(f"cannot create corpus directory {out_dir}: {e}", "E_IO") from e

    maps = build_task_maps(spec)
    utterances = generate_utterances(spec, maps)
    splits = split_indices(spec)
    paths: Dict[str, str] = {}

    for split in SPLITS:
        chosen = [utterances[i] for i in splits[split]]
        records = {
            't2s': [format_t2s_record(u) for u in chosen],
            's2a': [format_s2a_record(u.semantic, prompt_frames_for(u.text), u.grid) for u in chosen],
            'duration': [format_duration_record(u) for u in chosen],
        }
        for kind, lines in records.items():
            path = os.path.join(out_dir, corpus_file(kind, split))
            _write_lines(path, lines)
            paths[f'{kind}_{split}'] = path

    for kind, key in (('semantic_features', _KEY_SEMANTIC_FEATURES), ('acoustic_features', _KEY_ACOUSTIC_FEATURES)):
        rng = Rng.derive(spec.seed, key)
        centers = rng.normal((spec.feature_clusters, spec.feature_dim))
        sizes = {'train': spec.feature_frames,
                 'heldout': max(64, int(spec.feature_frames * spec.heldout_fraction))}
        for split in SPLITS:
            path = os.path.join(out_dir, corpus_file(kind, split))
            write_features(path, clustered_features(spec, sizes[split], rng, centers))
            paths[f'{kind}_{split}'] = path

    manifest = [f"{k}={v}" for k, v in sorted(asdict(spec).items())]
    manifest += [f"count_{split}={len(splits[split])}" for split in SPLITS]
    manifest += [f"file_{k}={os.path.basename(v)}" for k, v in sorted(paths.items())]
    paths['manifest'] = os.path.join(out_dir, CORPUS_MANIFEST)
    _write_lines(paths['manifest'], manifest)
    logger.info(f"📦 语料已生成: {out_dir} (train={len(splits['train'])}, heldout={len(splits['heldout'])}, "
                f"mapping={spec.mapping})")
    return paths


# ==================== 读取 ====================

def _read_lines(path: str) -> List[str]:
    if not os.path.isfile(path):
        raise MaskGCTError(f"corpus file not found: {path}", "E_IO")
    with open(path, 'r', encoding='utf-8') as f:
        return [ln.strip() for ln in f if ln.strip()]


def _parse_ids(text: str, path: str, lineno: int) -> np.ndarray:
    try:
        return np.asarray([int(v) for v in text.split()], dtype=np.int64)
    except ValueError as e:
        raise ContractViolation("E_FORMAT", f"{path}:{lineno}: bad integer list '{text.strip()}'") from e


def _fields(line: str, count: int, path: str, lineno: int) -> List[str]:
    parts = line.split('|')
    if len(parts) != count:
        raise ContractViolation("E_FORMAT", f"{path}:{lineno}: expected {count} '|'-separated fields, "
                                            f"got {len(parts)}")
    return parts


def read_t2s_corpus(path: str) -> List[T2SRecord]:
    records = []
    for n, line in enumerate(_read_lines(path), 1):
        text, semantic = _fields(line, 2, path, n)
        records.append(T2SRecord(_parse_ids(text, path, n), _parse_ids(semantic, path, n)))
    return records


def read_s2a_corpus(path: str) -> List[S2ARecord]:
    """读取并校验对齐：|S| == 每层帧数，且提示帧数小于总帧数"""
    records = []
    for n, line in enumerate(_read_lines(path), 1):
        semantic, prompt, layers = _fields(line, 3, path, n)
        semantic = _parse_ids(semantic, path, n)
        rows = [_parse_ids(row, path, n) for row in layers.split('/')]
        if any(len(r) != len(semantic) for r in rows):
            raise ContractViolation("E_ALIGNMENT", f"{path}:{n}: layer lengths {[len(r) for r in rows]} "
                                                   f"!= semantic length {len(semantic)}")
        try:
            prompt_frames = int(prompt)
        except ValueError as e:
            raise ContractViolation("E_FORMAT", f"{path}:{n}: bad prompt frame count '{prompt.strip()}'") from e
        if not (0 <= prompt_frames < len(semantic)):
            raise ContractViolation("E_ALIGNMENT", f"{path}:{n}: prompt frames {prompt_frames} outside "
                                                   f"[0, {len(semantic)})")
        records.append(S2ARecord(semantic, prompt_frames, np.stack(rows)))
    return records


def read_duration_corpus(path: str) -> List[DurationSample]:
    records = []
    for n, line in enumerate(_read_lines(path), 1):
        phones, durations = _fields(line, 2, path, n)
        records.append(DurationSample(_parse_ids(phones, path, n), _parse_ids(durations, path, n)))
    return records


def read_manifest(corpus_dir: str) -> Dict[str, str]:
    lines = _read_lines(os.path.join(corpus_dir, CORPUS_MANIFEST))
    return dict(ln.split('=', 1) for ln in lines if '=' in ln)


def spec_from_manifest(corpus_dir: str) -> SyntheticTaskSpec:
    """从清单恢复 SyntheticTaskSpec（按字段默认值的类型转换）"""
    values = read_manifest(corpus_dir)
    defaults = asdict(SyntheticTaskSpec())
    kwargs = {}
    for key, default in defaults.items():
        if key in values:
            kwargs[key] = type(default)(values[key])
    return SyntheticTaskSpec(**kwargs).validate()


def load_features(corpus_dir: str, kind: str, split: str) -> np.ndarray:
    return read_features(os.path.join(corpus_dir, corpus_file(kind, split)))


def load_split(corpus_dir: str, kind: str, split: str):
    """按类型读取某一划分的语料记录"""
    path = os.path.join(corpus_dir, corpus_file(kind, split))
    readers = {'t2s': read_t2s_corpus, 's2a': read_s2a_corpus, 'duration': read_duration_corpus}
    if kind not in readers:
        raise ContractViolation("E_RANGE", f"unknown corpus kind '{kind}'")
    return readers[kind](path)

