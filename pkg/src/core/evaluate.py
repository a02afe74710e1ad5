# -*- coding: utf-8 -*-
"""
评估模块

在留出集上计算：
- T2S：目标 token 准确率与整句完全匹配率
- S2A：每层声学 token 准确率与全网格完全匹配率
- 端到端：T2S 生成的语义接 S2A 后与真值网格的完全匹配率；另以时长模型预测目标长度，报告长度相对误差与网格匹配率
- 时长：总时长相对误差与 ±10% 命中率
- 语义码本使用率

可选扫描：T2S 解码步数、S2A 分层步数预设、时长倍率。
每条句子使用 Rng.derive(seed, 阶段, 句子序号) 派生独立随机流，线程池按序号汇总，
因此结果与并发度无关。
"""

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.core.config import Config
from src.core.constants import checkpoint_file
from src.core.corpus import FRAMES_PER_SYMBOL, S2ARecord, T2SRecord, load_features, load_split
from src.core.duration import DurationSample, predict_total_duration
from src.core.errors import ContractViolation, MaskGCTError
from src.core.masking import MaskSchedule, MaskState, decode_iterative
from src.core.numerics import Rng
from src.core.s2a import resolve_layer_steps, s2a_generate
from src.core.t2s import t2s_generate
from src.core.training import load_module
from src.models import DecodeConfig, EvalReport, SweepRow, rates_of

logger = logging.getLogger('MaskGCT')

REPORT_TEXT = 'report.txt'
REPORT_TABLE = 'report.csv'

# Rng.derive 阶段编号
_STAGE_T2S = 1
_STAGE_S2A = 2
_STAGE_E2E = 3
_STAGE_DURATION = 4
_STAGE_E2E_PREDICT = 5

# (文本, 提示语义, 目标长度, rng) -> 目标语义
SemanticGenerator = Callable[[np.ndarray, np.ndarray, int, Rng], np.ndarray]
# (完整语义, 提示网格, rng) -> 目标网格
GridGenerator = Callable[[np.ndarray, np.ndarray, Rng], np.ndarray]
# (目标音素, 提示音素, 提示时长, rng) -> 目标总帧数
LengthPredictor = Callable[[np.ndarray, np.ndarray, np.ndarray, Rng], int]


@dataclass
class SequenceScore:
    correct: int
    total: int
    exact: bool


def prompt_symbols(text: np.ndarray, fraction: float) -> int:
    """提示占用的文本符号数（严格少于整句）"""
    return min(int(fraction * len(text)), len(text) - 1)


def score_sequence(predicted: np.ndarray, truth: np.ndarray) -> SequenceScore:
    """逐位置比较；长度不同时按重叠部分计数，且不算完全匹配"""
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    n = min(len(predicted), len(truth))
    correct = int(np.sum(predicted[:n] == truth[:n]))
    return SequenceScore(correct, len(truth), len(predicted) == len(truth) and correct == len(truth))


def _run(fn: Callable[[int], object], count: int, workers: int) -> List:
    """按序号并行执行，结果按序号返回"""
    if workers <= 1 or count <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, range(count)))


def _limit(records: List, max_utterances: int) -> List:
    return records[:max_utterances] if max_utterances > 0 else records


def _rates(scores: Sequence[SequenceScore]):
    total = sum(s.total for s in scores)
    accuracy = sum(s.correct for s in scores) / total if total else 0.0
    exact = sum(s.exact for s in scores) / len(scores) if scores else 0.0
    return float(accuracy), float(exact)


# ==================== 生成器 ====================

def model_t2s_generator(model, cfg: DecodeConfig, schedule: MaskSchedule) -> SemanticGenerator:
    return lambda text, prompt, length, rng: t2s_generate(model, text, prompt, length, cfg, rng, schedule)


def model_s2a_generator(model, layer_steps: List[int], cfg: DecodeConfig, schedule: MaskSchedule) -> GridGenerator:
    return lambda semantic, prompt_grid, rng: s2a_generate(model, semantic, prompt_grid, layer_steps, cfg, rng,
                                                           schedule)


def model_length_predictor(model, steps: int, w_cfg: float) -> LengthPredictor:
    return lambda phones, prompt_phones, prompt_durations, rng: predict_total_duration(
        model, phones, prompt_phones, prompt_durations, rng, steps, w_cfg)


def oracle_predictor(truth: np.ndarray, vocab_size: int):
    """直接给出真值的预测器：真值位置 logit 为 0，其余为 −50"""
    logits = np.full((len(truth), vocab_size), -50.0)
    logits[np.arange(len(truth)), truth] = 0.0

    def predict(state: MaskState):
        return logits, None
    return predict


def oracle_t2s_generator(records: Sequence[T2SRecord], vocab_size: int, cfg: DecodeConfig,
                         schedule: Optional[MaskSchedule] = None) -> SemanticGenerator:
    """
    以真值为预测的 T2S 生成器，仍走完整的迭代解码流程

    按 (文本, 提示) 查找真值目标。
    """
    table = {tuple(r.text.tolist()): r.semantic for r in records}

    def generate(text, prompt, length, rng):
        semantic = table[tuple(np.asarray(text).tolist())]
        truth = semantic[len(prompt):len(prompt) + length]
        if len(truth) != length:
            raise ContractViolation("E_RANGE", "oracle cannot produce a target of a different length")
        return decode_iterative(oracle_predictor(truth, vocab_size), length, cfg, rng, schedule)
    return generate


# ==================== 各阶段评估 ====================

def evaluate_t2s(generate: SemanticGenerator, records: Sequence[T2SRecord], seed: int, prompt_fraction: float = 0.3,
                 workers: int = 1, multiplier: float = 1.0) -> List[SequenceScore]:
    """
    提示取前 prompt_fraction 的文本符号对应的语义帧，生成剩余部分

    multiplier ≠ 1 时按倍率改变目标长度（语速扫描），逐位置比较重叠部分。
    """
    def one(i: int) -> SequenceScore:
        r = records[i]
        prompt_len = FRAMES_PER_SYMBOL * prompt_symbols(r.text, prompt_fraction)
        target = r.semantic[prompt_len:]
        length = max(1, int(np.floor(len(target) * multiplier + 0.5)))
        out = generate(r.text, r.semantic[:prompt_len], length, Rng.derive(seed, _STAGE_T2S, i))
        return score_sequence(out, target)
    return _run(one, len(records), workers)


def evaluate_s2a(generate: GridGenerator, records: Sequence[S2ARecord], seed: int,
                 workers: int = 1) -> List[List[SequenceScore]]:
    """每条记录返回每层一个 SequenceScore"""
    def one(i: int) -> List[SequenceScore]:
        r = records[i]
        out = generate(r.semantic, r.grid[:, :r.prompt_frames], Rng.derive(seed, _STAGE_S2A, i))
        return [score_sequence(out[l], r.grid[l, r.prompt_frames:]) for l in range(r.grid.shape[0])]
    return _run(one, len(records), workers)


def evaluate_e2e(t2s_gen: SemanticGenerator, s2a_gen: GridGenerator, t2s_records: Sequence[T2SRecord],
                 s2a_records: Sequence[S2ARecord], seed: int, prompt_fraction: float = 0.3,
                 workers: int = 1) -> List[bool]:
    """T2S → S2A 串联，比较目标区全网格"""
    if len(t2s_records) != len(s2a_records):
        raise ContractViolation("E_ALIGNMENT", "t2s and s2a held-out sets differ in size")

    def one(i: int) -> bool:
        text_rec, grid_rec = t2s_records[i], s2a_records[i]
        prompt_len = FRAMES_PER_SYMBOL * prompt_symbols(text_rec.text, prompt_fraction)
        rng = Rng.derive(seed, _STAGE_E2E, i)
        semantic = t2s_gen(text_rec.text, text_rec.semantic[:prompt_len], len(text_rec.semantic) - prompt_len,
                           rng.split(1))
        full = np.concatenate([text_rec.semantic[:prompt_len], semantic])
        grid = s2a_gen(full, grid_rec.grid[:, :prompt_len], rng.split(2))
        return bool(np.array_equal(grid, grid_rec.grid[:, prompt_len:]))
    return _run(one, len(t2s_records), workers)


def evaluate_e2e_predict(t2s_gen: SemanticGenerator, s2a_gen: GridGenerator, length_fn: LengthPredictor,
                         t2s_records: Sequence[T2SRecord], s2a_records: Sequence[S2ARecord],
                         samples: Sequence[DurationSample], seed: int, prompt_fraction: float = 0.3,
                         workers: int = 1) -> List[Tuple[float, bool]]:
    """
    T2S → S2A 串联，目标长度由 length_fn 预测

    Returns:
        每句 (长度相对误差, 全网格完全匹配)；预测长度与真值不同时网格不算匹配
    """
    if not (len(t2s_records) == len(s2a_records) == len(samples)):
        raise ContractViolation("E_ALIGNMENT", "t2s, s2a and duration held-out sets differ in size")

    def one(i: int) -> Tuple[float, bool]:
        text_rec, grid_rec, sample = t2s_records[i], s2a_records[i], samples[i]
        k = prompt_symbols(text_rec.text, prompt_fraction)
        prompt_len = FRAMES_PER_SYMBOL * k
        truth_len = len(text_rec.semantic) - prompt_len
        rng = Rng.derive(seed, _STAGE_E2E_PREDICT, i)
        length = length_fn(sample.phones[k:], sample.phones[:k], sample.durations[:k], rng.split(0))
        semantic = t2s_gen(text_rec.text, text_rec.semantic[:prompt_len], length, rng.split(1))
        full = np.concatenate([text_rec.semantic[:prompt_len], semantic])
        grid = s2a_gen(full, grid_rec.grid[:, :prompt_len], rng.split(2))
        return abs(length - truth_len) / truth_len, bool(np.array_equal(grid, grid_rec.grid[:, prompt_len:]))
    return _run(one, len(t2s_records), workers)


def evaluate_duration(model, samples: Sequence[DurationSample], seed: int, prompt_fraction: float = 0.3,
                      steps: int = 4, w_cfg: float = 1.0, workers: int = 1) -> np.ndarray:
    """返回每句的总时长相对误差"""
    def one(i: int) -> float:
        s = samples[i]
        k = prompt_symbols(s.phones, prompt_fraction)
        predicted = predict_total_duration(model, s.phones[k:], s.phones[:k], s.durations[:k],
                                           Rng.derive(seed, _STAGE_DURATION, i), steps, w_cfg)
        truth = float(np.sum(s.durations[k:]))
        return abs(predicted - truth) / truth
    return np.asarray(_run(one, len(samples), workers), dtype=np.float64)


def codebook_utilization(codec, frames: np.ndarray) -> int:
    return codec.codebook.utilization(codec.tokenize(frames))


# ==================== 汇总 ====================

def evaluate(ckpt_dir: str, corpus_dir: str, config: Config, sweep: bool = False) -> EvalReport:
    """
    计算完整的 EvalReport

    缺少的检查点对应的指标保持 0 并记录警告。
    """
    started = time.perf_counter()
    seed = config.get('seed')
    fraction = config.get('eval.prompt_fraction')
    workers = config.get('eval.workers')
    limit = config.get('eval.max_utterances')
    schedule = MaskSchedule(config.get('mask.schedule'))

    paths: Dict[str, Optional[str]] = {}
    for kind in ('t2s', 's2a', 'duration', 'semantic_codec'):
        p = os.path.join(ckpt_dir, checkpoint_file(kind))
        paths[kind] = p if os.path.isfile(p) else None
        if paths[kind] is None:
            logger.warning(f"⚠️ 缺少 {kind} 检查点，跳过相关指标: {p}")

    report = EvalReport(config_hash=config.hash())
    t2s_records = _limit(load_split(corpus_dir, 't2s', 'heldout'), limit)
    s2a_records = _limit(load_split(corpus_dir, 's2a', 'heldout'), limit)
    report.utterances = len(t2s_records)

    t2s_gen = s2a_gen = None
    if paths['t2s']:
        t2s_model = load_module(paths['t2s'], 't2s')[0]
        t2s_gen = model_t2s_generator(t2s_model, config.decode('t2s'), schedule)
        report.token_accuracy, report.exact_match = _rates(evaluate_t2s(t2s_gen, t2s_records, seed, fraction,
                                                                         workers))
        logger.info(f"📊 T2S: accuracy={report.token_accuracy:.4f} exact={report.exact_match:.4f}")
        if sweep:
            for steps in config.list_of('eval.sweep', int):
                gen = model_t2s_generator(t2s_model, config.decode('t2s', steps), schedule)
                acc, exact = _rates(evaluate_t2s(gen, t2s_records, seed, fraction, workers))
                report.sweep.append(SweepRow('t2s', str(steps), acc, exact))
            for m in config.list_of('eval.duration_multipliers', float):
                acc, exact = _rates(evaluate_t2s(t2s_gen, t2s_records, seed, fraction, workers, m))
                report.sweep.append(SweepRow('duration', repr(float(m)), acc, exact))

    if paths['s2a']:
        s2a_model = load_module(paths['s2a'], 's2a')[0]
        layer_steps = resolve_layer_steps(config.get('s2a.layer_steps'), s2a_model.layers)
        s2a_gen = model_s2a_generator(s2a_model, layer_steps, config.decode('s2a'), schedule)
        per_record = evaluate_s2a(s2a_gen, s2a_records, seed, workers)
        report.layer_accuracy = [_rates([rec[l] for rec in per_record])[0] for l in range(s2a_model.layers)]
        report.grid_exact_match = float(np.mean([all(s.exact for s in rec) for rec in per_record])) \
            if per_record else 0.0
        logger.info(f"📊 S2A: layers={[round(a, 4) for a in report.layer_accuracy]} "
                    f"grid_exact={report.grid_exact_match:.4f}")
        if sweep:
            for preset in config.list_of('eval.s2a_presets', str):
                gen = model_s2a_generator(s2a_model, resolve_layer_steps(preset, s2a_model.layers),
                                          config.decode('s2a'), schedule)
                recs = evaluate_s2a(gen, s2a_records, seed, workers)
                acc = _rates([s for rec in recs for s in rec])[0]
                exact = float(np.mean([all(s.exact for s in rec) for rec in recs])) if recs else 0.0
                report.sweep.append(SweepRow('s2a', preset, acc, exact))

    if t2s_gen and s2a_gen:
        matches = evaluate_e2e(t2s_gen, s2a_gen, t2s_records, s2a_records, seed, fraction, workers)
        report.e2e_grid_exact_match = float(np.mean(matches)) if matches else 0.0
        logger.info(f"📊 端到端: grid_exact={report.e2e_grid_exact_match:.4f}")

    if paths['duration']:
        samples = _limit(load_split(corpus_dir, 'duration', 'heldout'), limit)
        duration_model = load_module(paths['duration'], 'duration')[0]
        solver_steps, duration_cfg_w = config.get('duration.solver_steps'), config.get('duration.cfg_w')
        errors = evaluate_duration(duration_model, samples, seed, fraction, solver_steps, duration_cfg_w, workers)
        report.duration_relative_error = float(errors.mean()) if errors.size else 0.0
        report.duration_within_10pct = float(np.mean(errors <= 0.1)) if errors.size else 0.0
        logger.info(f"📊 时长: rel_err={report.duration_relative_error:.4f} "
                    f"within10%={report.duration_within_10pct:.4f}")

        if t2s_gen and s2a_gen:
            rows = evaluate_e2e_predict(t2s_gen, s2a_gen,
                                        model_length_predictor(duration_model, solver_steps, duration_cfg_w),
                                        t2s_records, s2a_records, samples, seed, fraction, workers)
            if rows:
                report.e2e_predict_length_error = float(np.mean([err for err, _ in rows]))
                report.e2e_predict_grid_exact_match = float(np.mean([match for _, match in rows]))
            logger.info(f"📊 端到端（预测长度）: len_err={report.e2e_predict_length_error:.4f} "
                        f"grid_exact={report.e2e_predict_grid_exact_match:.4f}")

    if paths['semantic_codec']:
        codec = load_module(paths['semantic_codec'], 'semantic_codec')[0]
        used = codebook_utilization(codec, load_features(corpus_dir, 'semantic_features', 'heldout'))
        report.codes_used = used
        report.codebook_utilization = used / codec.config.codebook_size
        logger.info(f"📊 语义码本: {used}/{codec.config.codebook_size}")

    for name, value in rates_of(report):
        if not 0.0 <= value <= 1.0:
            raise ContractViolation("E_RANGE", f"report rate {name}={value} outside [0, 1]")
    report.wall_clock = time.perf_counter() - started
    return report


# ==================== 报告读写 ====================

_SCALAR_FIELDS = ('token_accuracy', 'exact_match', 'grid_exact_match', 'e2e_grid_exact_match',
                  'e2e_predict_grid_exact_match', 'e2e_predict_length_error', 'codebook_utilization',
                  'duration_relative_error', 'duration_within_10pct', 'wall_clock')


def report_to_text(report: EvalReport) -> str:
    lines = [f"{name}={getattr(report, name)!r}" for name in _SCALAR_FIELDS]
    lines.append(f"layer_accuracy={','.join(repr(float(v)) for v in report.layer_accuracy)}")
    lines.append(f"codes_used={report.codes_used}")
    lines.append(f"utterances={report.utterances}")
    lines.append(f"config_hash={report.config_hash}")
    lines.append(f"sweep_rows={len(report.sweep)}")
    return '\n'.join(lines) + '\n'


def write_report(report: EvalReport, out_dir: str) -> Dict[str, str]:
    """report.txt（key=value）+ report.csv（扫描表）"""
    try:
        os.makedirs(out_dir, exist_ok=True)
        paths = {'text': os.path.join(out_dir, REPORT_TEXT), 'table': os.path.join(out_dir, REPORT_TABLE)}
        with open(paths['text'], 'w', encoding='utf-8') as f:
            f.write(report_to_text(report))
        table = pd.DataFrame([vars(row) for row in report.sweep],
                             columns=['stage', 'setting', 'token_accuracy', 'exact_match'])
        table.to_csv(paths['table'], index=False, float_format='%.17g')
    except OSError as e:
        raise MaskGCTError(f"cannot write report to {out_dir}: {e}", "E_IO") from e
    logger.info(f"📝 评估报告已写出: {paths['text']}")
    return paths


def read_report(out_dir: str) -> EvalReport:
    text_path = os.path.join(out_dir, REPORT_TEXT)
    if not os.path.isfile(text_path):
        raise MaskGCTError(f"report not found: {text_path}", "E_IO")
    with open(text_path, 'r', encoding='utf-8') as f:
        values = dict(ln.rstrip('\n').split('=', 1) for ln in f if '=' in ln)
    try:
        report = EvalReport(**{name: float(values[name]) for name in _SCALAR_FIELDS})
        report.layer_accuracy = [float(v) for v in values['layer_accuracy'].split(',') if v]
        report.codes_used = int(values['codes_used'])
        report.utterances = int(values['utterances'])
        report.config_hash = values['config_hash']
    except (KeyError, ValueError) as e:
        raise ContractViolation("E_FORMAT", f"bad report file {text_path}: {e}") from e

    table_path = os.path.join(out_dir, REPORT_TABLE)
    if os.path.isfile(table_path) and int(values.get('sweep_rows', '0')) > 0:
        table = pd.read_csv(table_path, dtype={'stage': str, 'setting': str}, float_precision='round_trip')
        report.sweep = [SweepRow(r.stage, r.setting, float(r.token_accuracy), float(r.exact_match))
                        for r in table.itertuples(index=False)]
    return report
