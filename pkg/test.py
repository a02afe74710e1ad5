# -*- coding: utf-8 -*-
#!/usr/bin/env python3
"""
桌面规模验收运行器

生成 desk 语料，依次训练五个模块，完成一次合成与完整评估，
逐项打印 OK / FAIL；任何一项失败时返回非零退出码。
所有产物写入 results/acceptance/<run_id>/ 以供人工检查。

此文件保留在根目录作为兼容性入口点，实际导入来自 src/ 目录。
"""

import argparse
import math
import os
import sys
import time
from typing import Callable, List, Tuple

import numpy as np

# 添加项目根目录到路径以支持 src/ 导入
project_root = os.path.dirname(os.path.abspath(__file__))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from src.core import numerics as F
from src.core.checkpoint import encode_checkpoint, load_checkpoint
from src.core.config import Config
from src.core.constants import MODULE_KINDS, checkpoint_file
from src.core.corpus import FRAMES_PER_SYMBOL, gen_corpus, load_features, load_split
from src.core.evaluate import evaluate, prompt_symbols, write_report
from src.core.masking import MaskSchedule, cfg_combine, decode_iterative, remask_count
from src.core.numerics import Rng
from src.core.s2a import layer_probabilities, sample_layer
from src.core.synthesis import MaskGCTPipeline
from src.core.training import load_module, train
from src.models import DecodeConfig, PromptRecord
from src.utils.log import setup_logging

Check = Tuple[str, Callable[[], Tuple[bool, str]]]


# ==================== 不需要训练的性质检查 ====================

def check_greedy_oracle() -> Tuple[bool, str]:
    rng = np.random.default_rng(1)
    greedy = dict(top_k=1, temp_start=0.0, temp_end=0.0, gumbel=False, w_cfg=0.0)
    hits = 0
    for _ in range(100):
        n, vocab = int(rng.integers(1, 7)), int(rng.integers(2, 7))
        logits = rng.normal(size=(n, vocab)) * 2
        cfg = DecodeConfig(steps=int(rng.integers(1, n + 1)), **greedy)
        out = decode_iterative(lambda s: (logits, None), n, cfg, Rng(2))
        hits += int(np.array_equal(out, logits.argmax(axis=-1)))
    return hits == 100, f"{hits}/100"


def check_remask_counts() -> Tuple[bool, str]:
    schedule = MaskSchedule('sine')
    bad = 0
    for n in range(1, 65):
        for steps in range(1, 65):
            for i in range(1, steps + 1):
                expected = math.floor(n * math.sin(math.pi * (1.0 - i * 1.0 / steps) / 2.0))
                bad += int(remask_count(n, schedule, steps, i) != expected)
    return bad == 0, f"mismatches={bad}"


def check_cfg_identities() -> Tuple[bool, str]:
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        cond, uncond = rng.normal(size=(2, 4, 9)).astype(np.float32)
        if not np.array_equal(cfg_combine(cond, uncond, 0.0, 0.75), cond):
            return False, "w_cfg=0 changed g_cond"
        if not np.array_equal(cfg_combine(cond, cond, 2.5, 0.75), cond):
            return False, "identical branches changed g_cond"
        out = cfg_combine(cond, uncond, 2.5, 1.0)
        worst = max(worst, float(np.abs(out.std(axis=-1) - cond.std(axis=-1)).max()))
    return worst <= 1e-5, f"max std gap={worst:.2e}"


def check_layer_sampling() -> Tuple[bool, str]:
    n, draws = 4, 100_000
    rng = Rng(4)
    counts = np.bincount([sample_layer(n, rng) - 1 for _ in range(draws)], minlength=n)
    p = layer_probabilities(n)
    sigma = np.sqrt(draws * p * (1 - p))
    worst = float(np.max(np.abs(counts - draws * p) / sigma))
    return worst <= 3.0, f"max deviation={worst:.2f}σ"


# ==================== 训练后的阈值检查 ====================

def check_codec(ckpt_dir: str, corpus_dir: str) -> Tuple[bool, str]:
    codec = load_module(os.path.join(ckpt_dir, checkpoint_file('semantic_codec')), 'semantic_codec')[0]
    frames = load_features(corpus_dir, 'semantic_features', 'heldout')
    with F.no_grad():
        rec = float(codec.loss(codec.normalize(frames)).rec.data)
    used = codec.codebook.utilization(codec.tokenize(frames))
    return rec < 0.05 and used >= 8, f"rec_l1={rec:.4f} codes_used={used}"


def check_persistence(ckpt_dir: str) -> Tuple[bool, str]:
    for kind in MODULE_KINDS:
        path = os.path.join(ckpt_dir, checkpoint_file(kind))
        with open(path, 'rb') as f:
            if encode_checkpoint(load_checkpoint(path)) != f.read():
                return False, f"{kind} 重新编码后不一致"
    return True, f"{len(MODULE_KINDS)} checkpoints"


def check_synthesis(ckpt_dir: str, corpus_dir: str, out_dir: str) -> Tuple[bool, str]:
    t2s = load_split(corpus_dir, 't2s', 'heldout')[0]
    s2a = load_split(corpus_dir, 's2a', 'heldout')[0]
    durations = load_split(corpus_dir, 'duration', 'heldout')[0]
    k = prompt_symbols(t2s.text, 0.3)
    frames = FRAMES_PER_SYMBOL * k
    prompt = PromptRecord(t2s.text[:k], t2s.semantic[:frames], s2a.grid[:, :frames], durations.durations[:k])
    pipeline = MaskGCTPipeline(ckpt_dir, need_duration=True)
    given = pipeline.synthesize(t2s.text[k:], prompt, length=len(t2s.semantic) - frames, rng=Rng(5),
                                out_dir=os.path.join(out_dir, 'given'))
    predicted = pipeline.synthesize(t2s.text[k:], prompt, rng=Rng(6), out_dir=os.path.join(out_dir, 'predict'))
    truth = len(t2s.semantic) - frames
    ok = given.grid.shape[1] == given.length and predicted.grid.shape[1] == predicted.length
    ok = ok and abs(predicted.length - truth) / truth <= 0.2
    return ok, f"given={given.length} predicted={predicted.length} truth={truth}"


def run_checks(checks: List[Check]) -> List[str]:
    failures = []
    for name, fn in checks:
        started = time.perf_counter()
        try:
            ok, info = fn()
        except Exception as e:
            ok, info = False, f"{type(e).__name__}: {e}"
        elapsed = time.perf_counter() - started
        print(f"   {'OK  ' if ok else 'FAIL'} {name}: {info} ({elapsed:.1f}s)")
        if not ok:
            failures.append(name)
    return failures


def main():
    parser = argparse.ArgumentParser(description="MaskGCT 桌面规模验收")
    parser.add_argument("--seed", type=int, default=None, help="覆盖 seed")
    parser.add_argument("--out", default=None, help="输出目录，默认 results/acceptance/<run_id>")
    args = parser.parse_args()

    setup_logging(level='WARNING')
    run_id = str(int(time.time()))
    out_root = args.out or os.path.join(project_root, 'results', 'acceptance', run_id)
    corpus_dir = os.path.join(out_root, 'corpus')
    ckpt_dir = os.path.join(out_root, 'checkpoints')
    os.makedirs(out_root, exist_ok=True)

    def desk() -> Config:
        config = Config('desk')
        if args.seed is not None:
            config.set('seed', args.seed)
        return config

    print("\n== 性质检查 ==")
    failures = run_checks([
        ("greedy decoding equals exhaustive argmax", check_greedy_oracle),
        ("remask counts follow the sine schedule", check_remask_counts),
        ("classifier-free guidance identities", check_cfg_identities),
        ("S2A layer sampling frequencies", check_layer_sampling),
    ])

    print("\n== 生成语料并训练 ==")
    gen_corpus(desk().task_spec(), corpus_dir)
    for kind in MODULE_KINDS:
        started = time.perf_counter()
        result = train(kind, desk(), corpus_dir, ckpt_dir)
        print(f"-- {kind}: step={result.steps} loss {result.initial_loss} -> {result.final_loss} "
              f"({time.perf_counter() - started:.1f}s)")

    print("\n== 评估 ==")
    report = evaluate(ckpt_dir, corpus_dir, desk(), sweep=True)
    write_report(report, os.path.join(out_root, 'eval'))
    t2s_sweep = {row.setting: row.token_accuracy for row in report.sweep if row.stage == 't2s'}

    failures += run_checks([
        ("semantic codec reconstruction and utilization", lambda: check_codec(ckpt_dir, corpus_dir)),
        ("T2S held-out exact match", lambda: (report.exact_match >= 0.95, f"exact={report.exact_match:.4f}")),
        ("T2S 25 steps not worse than 5", lambda: (t2s_sweep.get('25', 0.0) >= t2s_sweep.get('5', 1.0),
                                                   f"sweep={t2s_sweep}")),
        ("S2A full-grid exact match", lambda: (report.grid_exact_match >= 0.95,
                                               f"grid_exact={report.grid_exact_match:.4f}")),
        ("duration totals within 10%", lambda: (report.duration_within_10pct >= 0.9,
                                                f"within10%={report.duration_within_10pct:.4f}")),
        ("end-to-end grid exact match", lambda: (report.e2e_grid_exact_match >= 0.9,
                                                 f"e2e={report.e2e_grid_exact_match:.4f}")),
        ("end-to-end predicted length", lambda: (report.e2e_predict_length_error <= 0.15,
                                                 f"len_err={report.e2e_predict_length_error:.4f} "
                                                 f"grid={report.e2e_predict_grid_exact_match:.4f}")),
        ("evaluation is reproducible", lambda: (evaluate(ckpt_dir, corpus_dir, desk(), sweep=True) == report,
                                                f"hash={report.config_hash}")),
        ("checkpoints re-encode bit-exact", lambda: check_persistence(ckpt_dir)),
        ("synthesis chain (given and predicted length)",
         lambda: check_synthesis(ckpt_dir, corpus_dir, os.path.join(out_root, 'synthesis'))),
    ])

    if failures:
        print("\nFailures:")
        for name in failures:
            print(f"- {name}")
        return 2

    print(f"\nAll acceptance checks passed. Results: {out_root}")
    return 0


if __name__ == '__main__':
    raise SystemExit(main())
