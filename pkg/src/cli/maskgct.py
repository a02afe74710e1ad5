# -*- coding: utf-8 -*-
"""
MaskGCT 命令行工具

子命令：
    gen-corpus            生成合成语料
    train-semantic-codec  训练语义 VQ-VAE
    train-acoustic-codec  训练声学 RVQ 编解码器
    train-t2s             训练文本到语义模型
    train-s2a             训练语义到声学模型
    train-duration        训练流匹配时长预测器
    synthesize            端到端合成
    eval                  评估（可选步数扫描）
    inspect-checkpoint    打印检查点内容

通用参数：--config PATH、--set key=value（可重复）、--seed、--out DIR、--preset {desk,paper}（full 为 paper 的别名）。
出错时向 stderr 输出单行 `error code=<CODE> message="..."`，
退出码：2 契约违例、3 数值错误、4 I/O 错误。
"""

import argparse
import logging
import sys
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from src.core.acoustic_codec import AcousticTokenGrid
from src.core.checkpoint import describe_checkpoint, load_checkpoint
from src.core.config import Config, get_config, resolve_config, set_config
from src.core.constants import EXIT_CONTRACT, EXIT_FAILURE, EXIT_IO, EXIT_NUMERIC, EXIT_OK
from src.core.corpus import FRAMES_PER_SYMBOL, gen_corpus, load_split
from src.core.errors import ContractViolation, MaskGCTError, NumericError
from src.core.evaluate import evaluate, prompt_symbols, report_to_text, write_report
from src.core.synthesis import MaskGCTPipeline
from src.core.training import train
from src.models import PromptRecord
from src.utils.log import setup_logging

logger = logging.getLogger('MaskGCT')

TRAIN_COMMANDS = {
    'train-semantic-codec': 'semantic_codec',
    'train-acoustic-codec': 'acoustic_codec',
    'train-t2s': 't2s',
    'train-s2a': 's2a',
    'train-duration': 'duration',
}


def parse_ids(text: Optional[str]) -> np.ndarray:
    """'1 2 3' 或 '1,2,3' → 整数数组"""
    if text is None:
        return np.zeros(0, dtype=np.int64)
    try:
        return np.asarray([int(v) for v in text.replace(',', ' ').split()], dtype=np.int64)
    except ValueError as e:
        raise ContractViolation("E_FORMAT", f"bad id list '{text}'") from e


def exit_code_for(error: MaskGCTError) -> int:
    if isinstance(error, NumericError):
        return EXIT_NUMERIC
    if isinstance(error, ContractViolation):
        return EXIT_CONTRACT
    if error.code == 'E_IO':
        return EXIT_IO
    return EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="key=value 配置文件")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="覆盖单个配置项（可重复）")
    common.add_argument("--seed", type=int, default=None, help="随机种子（覆盖 seed）")
    common.add_argument("--out", default=None, help="输出目录")
    common.add_argument("--preset", choices=sorted([*Config.PRESETS, *Config.PRESET_ALIASES]), default=None,
                        help="配置预设 (默认: desk)")
    common.add_argument("--quiet", action="store_true", help="不显示进度条")

    parser = argparse.ArgumentParser(prog="maskgct", description="MaskGCT 桌面规模训练 / 合成 / 评估工具")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-corpus", parents=[common], help="生成合成语料（--out 默认 ./corpus）")

    for command in TRAIN_COMMANDS:
        p = sub.add_parser(command, parents=[common], help=f"训练 {TRAIN_COMMANDS[command]}")
        p.add_argument("--corpus", required=True, help="语料目录")
        p.add_argument("--resume", default=None, help="从该检查点续训")
        p.add_argument("--steps", type=int, default=None, help="目标总步数（覆盖 <kind>.steps）")

    p = sub.add_parser("synthesize", parents=[common], help="端到端合成")
    p.add_argument("--ckpt", required=True, help="检查点目录")
    p.add_argument("--text", default=None, help="目标文本 ID（空格或逗号分隔）")
    p.add_argument("--length", default="predict", help="目标语义长度，或 predict 使用时长预测器")
    p.add_argument("--corpus", default=None, help="与 --prompt-index 配合，从留出集取提示")
    p.add_argument("--prompt-index", type=int, default=None, help="留出集句子序号")
    p.add_argument("--prompt-text", default=None, help="提示文本 ID")
    p.add_argument("--prompt-semantic", default=None, help="提示语义 token")
    p.add_argument("--prompt-grid", default=None, help="提示声学网格文件（layers=N frames=F 文本格式）")
    p.add_argument("--prompt-durations", default=None, help="提示音素时长")
    p.add_argument("--t2s-steps", type=int, default=None, help="覆盖 t2s.decode_steps")
    p.add_argument("--layer-steps", default=None, help="覆盖 s2a.layer_steps（预设名或逗号列表）")

    p = sub.add_parser("eval", parents=[common], help="在留出集上评估")
    p.add_argument("--ckpt", required=True, help="检查点目录")
    p.add_argument("--corpus", required=True, help="语料目录")
    p.add_argument("--sweep", action="store_true", help="附加解码步数 / 分层预设 / 时长倍率扫描")

    p = sub.add_parser("inspect-checkpoint", parents=[common], help="打印检查点内容")
    p.add_argument("path", help="检查点文件")
    return parser


def _prompt_from_args(args, layers: int):
    """
    构造 (目标文本, 提示记录)

    --prompt-index 从留出集取一句：前 eval.prompt_fraction 的符号作为提示，其余作为目标文本（--text 可覆盖）。
    """
    if args.prompt_index is not None:
        if not args.corpus:
            raise ContractViolation("E_CONFIG_VALUE", "--prompt-index requires --corpus")
        t2s = load_split(args.corpus, 't2s', 'heldout')
        s2a = load_split(args.corpus, 's2a', 'heldout')
        dur = load_split(args.corpus, 'duration', 'heldout')
        if not (0 <= args.prompt_index < len(t2s)):
            raise ContractViolation("E_RANGE", f"prompt index must be in [0, {len(t2s)}), got {args.prompt_index}")
        rec = t2s[args.prompt_index]
        k = prompt_symbols(rec.text, get_config().get('eval.prompt_fraction'))
        frames = FRAMES_PER_SYMBOL * k
        prompt = PromptRecord(rec.text[:k], rec.semantic[:frames], s2a[args.prompt_index].grid[:, :frames],
                              dur[args.prompt_index].durations[:k])
        text = parse_ids(args.text) if args.text else rec.text[k:]
        return text, prompt

    semantic = parse_ids(args.prompt_semantic)
    if args.prompt_grid:
        grid = AcousticTokenGrid.load(args.prompt_grid).codes
    else:
        grid = np.zeros((layers, 0), dtype=np.int64)
    durations = parse_ids(args.prompt_durations) if args.prompt_durations else None
    return parse_ids(args.text), PromptRecord(parse_ids(args.prompt_text), semantic, grid, durations)


def run_command(args) -> int:
    config = get_config()
    command = args.command

    if command == 'gen-corpus':
        out = args.out or './corpus'
        paths = gen_corpus(config.task_spec(), out)
        tqdm.write(f"[+] 语料已生成: {out} ({len(paths)} 个文件)")
        return EXIT_OK

    if command in TRAIN_COMMANDS:
        result = train(TRAIN_COMMANDS[command], config, args.corpus, args.out or './checkpoints',
                       resume=args.resume, steps=args.steps, progress=not args.quiet)
        tqdm.write(f"[+] 检查点: {result.checkpoint} (step={result.steps})")
        tqdm.write(f"[+] 损失曲线: {result.loss_curve}")
        return EXIT_OK

    if command == 'synthesize':
        predict = str(args.length).strip().lower() == 'predict'
        length = None
        if not predict:
            try:
                length = int(args.length)
            except ValueError as e:
                raise ContractViolation("E_CONFIG_VALUE", f"--length must be an integer or 'predict', "
                                                          f"got '{args.length}'") from e
        pipeline = MaskGCTPipeline(args.ckpt, config, need_duration=predict)
        text, prompt = _prompt_from_args(args, pipeline.s2a.layers)
        result = pipeline.synthesize(text, prompt, length, out_dir=args.out or './synthesis',
                                     t2s_steps=args.t2s_steps, layer_steps=args.layer_steps)
        print(f"length={result.length} length_mode={result.length_mode}")
        print(f"semantic={' '.join(str(int(v)) for v in result.semantic)}")
        for name, path in sorted(result.artifacts.items()):
            print(f"artifact {name}={path}")
        return EXIT_OK

    if command == 'eval':
        report = evaluate(args.ckpt, args.corpus, config, sweep=args.sweep)
        write_report(report, args.out or './eval')
        sys.stdout.write(report_to_text(report))
        return EXIT_OK

    if command == 'inspect-checkpoint':
        print(describe_checkpoint(load_checkpoint(args.path)))
        return EXIT_OK

    raise ContractViolation("E_CONFIG_VALUE", f"unknown command '{command}'")


def main(argv: Optional[List[str]] = None) -> int:
    """命令行入口，返回退出码"""
    args = build_parser().parse_args(argv)
    try:
        setup_logging(level='WARNING' if args.quiet else None)
        config = resolve_config(args.preset, args.config, args.set, args.seed)
        set_config(config)
        config.log_resolved()
        return run_command(args)
    except MaskGCTError as e:
        logger.debug(f"{args.command} 失败", exc_info=True)
        print(e.one_line(), file=sys.stderr)
        return exit_code_for(e)
    except KeyboardInterrupt:
        print('error code=E_INTERRUPTED message="interrupted"', file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
