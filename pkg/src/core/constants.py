# -*- coding: utf-8 -*-
"""
核心常量定义模块

集中管理跨模块共享的常量（文件格式魔数、版本号、语料文件名、退出码），
避免重复定义。
"""

# 二进制格式
CHECKPOINT_MAGIC = b'MGCT'
CHECKPOINT_VERSION = 1
FEATURE_MAGIC = b'MGFT'
FEATURE_VERSION = 1

# 可训练模块类型，与 train-<kind> 子命令一一对应
MODULE_KINDS = ('semantic_codec', 'acoustic_codec', 't2s', 's2a', 'duration')

# 语料目录中的文件名
CORPUS_MANIFEST = 'corpus.txt'
SPLITS = ('train', 'heldout')


def corpus_file(kind: str, split: str) -> str:
    """语料文件名，例如 t2s_train.txt / semantic_features_heldout.mgft"""
    if kind in ('semantic_features', 'acoustic_features'):
        return f'{kind}_{split}.mgft'
    return f'{kind}_{split}.txt'


def checkpoint_file(kind: str) -> str:
    return f'{kind}.mgct'


def loss_curve_file(kind: str) -> str:
    return f'{kind}_loss.csv'


# 命令行退出码
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONTRACT = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

# 数值常量
ATTENTION_PAD_BIAS = -1e9
RMS_EPS = 1e-6
