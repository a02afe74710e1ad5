# -*- coding: utf-8 -*-
"""
测试公共夹具

- --runslow：运行标记为 slow 的桌面规模训练测试
- tiny_config / tiny_corpus / trained_dir：几秒内可完成的极小配置、语料与检查点
"""

import os

import pytest

from src.core.config import Config, reset_config
from src.core.constants import MODULE_KINDS
from src.core.corpus import gen_corpus
from src.core.training import train

# 极小规模配置：所有模块几步即可训练完
TINY = {
    'seed': 7,
    'corpus.utterances': 40,
    'corpus.text_vocab': 8,
    'corpus.semantic_vocab': 16,
    'corpus.min_symbols': 3,
    'corpus.max_symbols': 6,
    'corpus.acoustic_layers': 2,
    'corpus.acoustic_codebook': 8,
    'corpus.feature_dim': 4,
    'corpus.feature_clusters': 3,
    'corpus.feature_frames': 256,
    'train.checkpoint_every': 2,
    'train.log_every': 1,
    't2s.decode_steps': 4,
    'eval.sweep': '2,4',
    'eval.workers': 2,
}
for _kind in ('semantic_codec', 'acoustic_codec'):
    TINY.update({f'{_kind}.hidden': 8, f'{_kind}.blocks': 1, f'{_kind}.code_dim': 2,
                 f'{_kind}.batch': 2, f'{_kind}.window': 8, f'{_kind}.steps': 3, f'{_kind}.warmup': 2})
TINY['semantic_codec.codebook'] = 8
for _kind in ('t2s', 's2a', 'duration'):
    TINY.update({f'{_kind}.layers': 1, f'{_kind}.dim': 16, f'{_kind}.ffn': 32, f'{_kind}.heads': 2,
                 f'{_kind}.batch': 4, f'{_kind}.steps': 3, f'{_kind}.warmup': 2})


def make_tiny_config() -> Config:
    config = Config('desk')
    config.update(TINY)
    return config


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行桌面规模训练测试")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch, tmp_path):
    monkeypatch.delenv('MGCT_PRESET', raising=False)
    monkeypatch.setenv('MGCT_LOG_DIR', str(tmp_path / 'logs'))
    reset_config()
    yield
    reset_config()


@pytest.fixture
def tiny_config() -> Config:
    return make_tiny_config()


@pytest.fixture
def tiny_config_file(tmp_path) -> str:
    """TINY 覆盖项写成 --config 文件"""
    path = tmp_path / 'tiny.env'
    path.write_text(''.join(f"{k}={v}\n" for k, v in TINY.items()), encoding='utf-8')
    return str(path)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory) -> str:
    out = str(tmp_path_factory.mktemp('corpus'))
    gen_corpus(make_tiny_config().task_spec(), out)
    return out


@pytest.fixture(scope="session")
def trained_dir(tmp_path_factory, tiny_corpus) -> str:
    """五个模块各训练 3 步后的检查点目录"""
    out = str(tmp_path_factory.mktemp('ckpt'))
    for kind in MODULE_KINDS:
        train(kind, make_tiny_config(), tiny_corpus, out, progress=False)
    assert all(os.path.isfile(os.path.join(out, f'{kind}.mgct')) for kind in MODULE_KINDS)
    return out
