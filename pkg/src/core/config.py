# -*- coding: utf-8 -*-
"""
运行配置模块

扁平的命名空间键（module.param = value），解析顺序：
    默认值（desk 预设）→ 预设覆盖 → --config 文件 → --set 覆盖 → --seed
未知键一律拒绝；每次运行都会记录完整解析后的配置及其哈希。
"""

import hashlib
import logging
import os
from typing import Any, Dict, Iterable, List, Optional

from dotenv import dotenv_values, load_dotenv

from src.core.errors import ContractViolation, MaskGCTError
from src.models import CodecConfig, DecodeConfig, SyntheticTaskSpec, TransformerConfig

logger = logging.getLogger('MaskGCT')


class Config:
    """
    解析后的运行配置

    DEFAULTS 即 desk 预设；PRESETS['paper'] 给出论文规模的覆盖值（未在桌面环境测试），'full' 为其别名。
    """

    DEFAULTS: Dict[str, Any] = {
        'seed': 1234,
        'mask.schedule': 'sine',
        'model.rope_theta': 10000.0,

        # 优化器
        'optim.beta1': 0.9,
        'optim.beta2': 0.999,
        'optim.eps': 1e-8,
        'optim.weight_decay': 0.01,

        # 训练流程
        'train.checkpoint_every': 500,
        'train.log_every': 100,

        # 合成语料
        'corpus.utterances': 600,
        'corpus.text_vocab': 16,
        'corpus.semantic_vocab': 64,
        'corpus.min_symbols': 4,
        'corpus.max_symbols': 12,
        'corpus.mapping': 'deterministic',
        'corpus.acoustic_layers': 4,
        'corpus.acoustic_codebook': 32,
        'corpus.feature_dim': 16,
        'corpus.feature_clusters': 8,
        'corpus.feature_noise': 0.02,
        'corpus.feature_frames': 4096,
        'corpus.duration_sigma': 0.1,
        'corpus.duration_constant': 0,
        'corpus.duration_tempo_sigma': 0.0,
        'corpus.heldout_fraction': 0.1,

        # 语义编解码器
        'semantic_codec.hidden': 32,
        'semantic_codec.blocks': 2,
        'semantic_codec.codebook': 64,
        'semantic_codec.code_dim': 4,
        'semantic_codec.lambda_rec': 1.0,
        'semantic_codec.lambda_codebook': 1.0,
        'semantic_codec.lambda_commit': 0.25,
        'semantic_codec.dead_after': 200,
        'semantic_codec.lr': 2e-3,
        'semantic_codec.warmup': 100,
        'semantic_codec.steps': 2000,
        'semantic_codec.batch': 8,
        'semantic_codec.window': 32,

        # 声学编解码器（层数与码本大小取自 corpus.acoustic_*）
        'acoustic_codec.hidden': 32,
        'acoustic_codec.blocks': 2,
        'acoustic_codec.code_dim': 8,
        'acoustic_codec.lambda_rec': 10.0,
        'acoustic_codec.lambda_codebook': 1.0,
        'acoustic_codec.lambda_commit': 0.25,
        'acoustic_codec.dead_after': 200,
        'acoustic_codec.lr': 2e-3,
        'acoustic_codec.warmup': 100,
        'acoustic_codec.steps': 1500,
        'acoustic_codec.batch': 8,
        'acoustic_codec.window': 32,

        # T2S
        't2s.layers': 2,
        't2s.dim': 64,
        't2s.ffn': 256,
        't2s.heads': 4,
        't2s.lr': 2e-3,
        't2s.warmup': 100,
        't2s.steps': 2000,
        't2s.batch': 16,
        't2s.prompt_drop': 0.15,
        't2s.decode_steps': 25,
        't2s.top_k': 20,
        't2s.temp_start': 1.5,
        't2s.temp_end': 0.0,
        't2s.gumbel': True,

        # S2A
        's2a.layers': 2,
        's2a.dim': 64,
        's2a.ffn': 256,
        's2a.heads': 4,
        's2a.lr': 2e-3,
        's2a.warmup': 100,
        's2a.steps': 1500,
        's2a.batch': 16,
        's2a.prompt_drop': 0.15,
        's2a.layer_steps': 'desk',
        's2a.top_k': 20,
        's2a.temp_start': 1.5,
        's2a.temp_end': 0.0,
        's2a.gumbel': True,

        # 时长预测器
        'duration.layers': 2,
        'duration.dim': 64,
        'duration.ffn': 256,
        'duration.heads': 4,
        'duration.lr': 2e-3,
        'duration.warmup': 100,
        'duration.steps': 1500,
        'duration.batch': 16,
        'duration.prompt_drop': 0.15,
        'duration.solver_steps': 4,
        'duration.cfg_w': 1.0,

        # classifier-free guidance
        'cfg.w': 2.5,
        'cfg.rescale': 0.75,

        # 合成
        'synth.duration_multiplier': 1.0,

        # 评估
        'eval.sweep': '5,10,25,50',
        'eval.s2a_presets': 'desk,fast,quality',
        'eval.duration_multipliers': '1.0',
        'eval.prompt_fraction': 0.3,
        'eval.max_utterances': 0,
        'eval.workers': 4,
    }

    PRESETS: Dict[str, Dict[str, Any]] = {
        'desk': {},
        'paper': {
            'optim.weight_decay': 0.01,
            'corpus.semantic_vocab': 8192,
            'corpus.acoustic_layers': 12,
            'corpus.acoustic_codebook': 1024,
            'semantic_codec.hidden': 384,
            'semantic_codec.blocks': 12,
            'semantic_codec.codebook': 8192,
            'semantic_codec.code_dim': 8,
            'semantic_codec.lr': 1e-4,
            'semantic_codec.warmup': 32000,
            'acoustic_codec.hidden': 384,
            'acoustic_codec.blocks': 12,
            'acoustic_codec.code_dim': 8,
            'acoustic_codec.lr': 1e-4,
            'acoustic_codec.warmup': 32000,
            't2s.layers': 16,
            't2s.dim': 1024,
            't2s.ffn': 4096,
            't2s.heads': 16,
            't2s.lr': 1e-4,
            't2s.warmup': 32000,
            't2s.decode_steps': 50,
            's2a.layers': 16,
            's2a.dim': 1024,
            's2a.ffn': 4096,
            's2a.heads': 16,
            's2a.lr': 1e-4,
            's2a.warmup': 32000,
            's2a.layer_steps': 'quality',
            'duration.layers': 12,
            'duration.dim': 768,
            'duration.ffn': 3072,
            'duration.heads': 12,
            'duration.lr': 1e-4,
            'duration.warmup': 32000,
        },
    }
    PRESET_ALIASES: Dict[str, str] = {'full': 'paper'}

    def __init__(self, preset: Optional[str] = None):
        load_dotenv()
        preset = preset or os.getenv('MGCT_PRESET', 'desk')
        preset = self.PRESET_ALIASES.get(preset, preset)
        if preset not in self.PRESETS:
            raise ContractViolation("E_CONFIG_VALUE", f"unknown preset '{preset}', "
                                                      f"expected one of {sorted(self.PRESETS)}")
        self.preset = preset
        self._values: Dict[str, Any] = dict(self.DEFAULTS)
        for key, value in self.PRESETS[preset].items():
            self.set(key, value)

    # ---------- 读写 ----------

    def set(self, key: str, value: Any):
        """设置单个键，值按默认值的类型转换"""
        key = key.strip()
        if key not in self.DEFAULTS:
            raise ContractViolation("E_CONFIG_KEY", f"unknown config key '{key}'")
        self._values[key] = self._coerce(key, value)

    def get(self, key: str) -> Any:
        if key not in self._values:
            raise ContractViolation("E_CONFIG_KEY", f"unknown config key '{key}'")
        return self._values[key]

    def __getitem__(self, key: str) -> Any:
        return self.get(key)

    def update(self, values: Dict[str, Any]):
        for key, value in values.items():
            self.set(key, value)

    def apply_overrides(self, overrides: Iterable[str]):
        """应用 --set key=value 列表"""
        for item in overrides or []:
            if '=' not in item:
                raise ContractViolation("E_CONFIG_VALUE", f"override must look like key=value, got '{item}'")
            key, value = item.split('=', 1)
            self.set(key, value)

    def load_file(self, path: str):
        """读取 key=value 配置文件（python-dotenv 语法）"""
        if not os.path.isfile(path):
            raise MaskGCTError(f"config file not found: {path}", "E_IO")
        values = dotenv_values(path)
        for key, value in values.items():
            if value is None:
                raise ContractViolation("E_CONFIG_VALUE", f"config key '{key}' in {path} has no value")
            self.set(key, value)
        logger.info(f"📄 已加载配置文件: {path} ({len(values)} 项)")

    def _coerce(self, key: str, value: Any) -> Any:
        default = self.DEFAULTS[key]
        try:
            if isinstance(default, bool):
                if isinstance(value, bool):
                    return value
                text = str(value).strip().lower()
                if text in ('1', 'true', 'yes', 'on'):
                    return True
                if text in ('0', 'false', 'no', 'off'):
                    return False
                raise ValueError(text)
            if isinstance(default, int):
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError(value)
                return int(str(value).strip()) if not isinstance(value, (int, float)) else int(value)
            if isinstance(default, float):
                return float(value)
            return str(value).strip()
        except (TypeError, ValueError) as e:
            raise ContractViolation("E_CONFIG_VALUE", f"bad value {value!r} for '{key}' "
                                                      f"(expected {type(default).__name__})") from e

    # ---------- 导出 ----------

    def as_dict(self) -> Dict[str, Any]:
        return dict(self._values)

    def to_lines(self) -> List[str]:
        return [f"{key}={self._format(self._values[key])}" for key in sorted(self._values)]

    @staticmethod
    def _format(value: Any) -> str:
        if isinstance(value, bool):
            return 'true' if value else 'false'
        if isinstance(value, float):
            return repr(value)
        return str(value)

    def hash(self) -> str:
        """排序后 key=value 行的 sha256 前 16 位"""
        return hashlib.sha256('\n'.join(self.to_lines()).encode('utf-8')).hexdigest()[:16]

    def log_resolved(self):
        logger.info(f"⚙️ 配置（preset={self.preset}, hash={self.hash()}）:")
        for line in self.to_lines():
            logger.info(f"    {line}")

    @classmethod
    def from_snapshot(cls, values: Dict[str, str]) -> 'Config':
        """由检查点内保存的 key=value 快照重建配置"""
        config = cls('desk')
        for key, value in values.items():
            config.set(key, value)
        return config

    # ---------- 派生配置 ----------

    def list_of(self, key: str, cast=float) -> List:
        text = str(self.get(key))
        try:
            return [cast(v.strip()) for v in text.split(',') if v.strip()]
        except ValueError as e:
            raise ContractViolation("E_CONFIG_VALUE", f"bad list value '{text}' for '{key}'") from e

    def transformer(self, prefix: str) -> TransformerConfig:
        return TransformerConfig(
            layers=self.get(f'{prefix}.layers'),
            model_dim=self.get(f'{prefix}.dim'),
            ffn_dim=self.get(f'{prefix}.ffn'),
            heads=self.get(f'{prefix}.heads'),
            rope_theta=self.get('model.rope_theta'),
        ).validate()

    def decode(self, prefix: str, steps: Optional[int] = None) -> DecodeConfig:
        if steps is None:
            steps = self.get('t2s.decode_steps') if prefix == 't2s' else 1
        return DecodeConfig(
            steps=steps,
            top_k=self.get(f'{prefix}.top_k'),
            temp_start=self.get(f'{prefix}.temp_start'),
            temp_end=self.get(f'{prefix}.temp_end'),
            gumbel=self.get(f'{prefix}.gumbel'),
            w_cfg=self.get('cfg.w'),
            w_rescale=self.get('cfg.rescale'),
        ).validate()

    def codec(self, kind: str) -> CodecConfig:
        if kind == 'semantic_codec':
            size, layers = self.get('semantic_codec.codebook'), 1
        else:
            size, layers = self.get('corpus.acoustic_codebook'), self.get('corpus.acoustic_layers')
        return CodecConfig(
            feature_dim=self.get('corpus.feature_dim'),
            hidden=self.get(f'{kind}.hidden'),
            blocks=self.get(f'{kind}.blocks'),
            codebook_size=size,
            code_dim=self.get(f'{kind}.code_dim'),
            layers=layers,
            lambda_rec=self.get(f'{kind}.lambda_rec'),
            lambda_codebook=self.get(f'{kind}.lambda_codebook'),
            lambda_commit=self.get(f'{kind}.lambda_commit'),
            dead_after=self.get(f'{kind}.dead_after'),
        )

    def task_spec(self) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(
            seed=self.get('seed'),
            utterances=self.get('corpus.utterances'),
            text_vocab=self.get('corpus.text_vocab'),
            semantic_vocab=self.get('corpus.semantic_vocab'),
            min_symbols=self.get('corpus.min_symbols'),
            max_symbols=self.get('corpus.max_symbols'),
            mapping=self.get('corpus.mapping'),
            acoustic_layers=self.get('corpus.acoustic_layers'),
            acoustic_codebook=self.get('corpus.acoustic_codebook'),
            feature_dim=self.get('corpus.feature_dim'),
            feature_clusters=self.get('corpus.feature_clusters'),
            feature_noise=self.get('corpus.feature_noise'),
            feature_frames=self.get('corpus.feature_frames'),
            duration_sigma=self.get('corpus.duration_sigma'),
            duration_constant=self.get('corpus.duration_constant'),
            duration_tempo_sigma=self.get('corpus.duration_tempo_sigma'),
            heldout_fraction=self.get('corpus.heldout_fraction'),
        ).validate()


def resolve_config(preset: Optional[str] = None, config_file: Optional[str] = None,
                   overrides: Optional[Iterable[str]] = None, seed: Optional[int] = None) -> Config:
    """按 默认值 → 预设 → 配置文件 → --set → --seed 的顺序解析"""
    config = Config(preset)
    if config_file:
        config.load_file(config_file)
    config.apply_overrides(overrides or [])
    if seed is not None:
        config.set('seed', seed)
    return config


# 模块级配置实例（延迟初始化）
_config: Optional[Config] = None


def get_config() -> Config:
    """获取全局配置实例"""
    global _config
    if _config is None:
        _config = Config()
    return _config


def set_config(config: Config):
    global _config
    _config = config


def reset_config():
    """重置全局配置（主要用于测试）"""
    global _config
    _config = None
