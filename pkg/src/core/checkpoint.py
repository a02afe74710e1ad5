# -*- coding: utf-8 -*-
"""
检查点读写模块

单一版本化二进制格式（小端）：
    magic "MGCT" | u32 版本 | u16+utf8 模块类型 | u32+utf8 配置快照（key=value 行）
    | u64 步数 | u64 RNG 种子 | u64 RNG 位置 | u32 张量数
    | 张量索引：u16+utf8 名称, u8 维数, u32×维数 形状, u64 数据偏移
    | 张量数据：float32 小端，紧密排列

张量名前缀：model.（模型参数）、optim.m.N / optim.v.N（AdamW 矩）、extra.（特征统计量等）。
"""

import io
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from src.core.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, MODULE_KINDS
from src.core.errors import ContractViolation, MaskGCTError
from src.core.numerics import AdamW, Rng, RngState

logger = logging.getLogger('MaskGCT')

MODEL_PREFIX = 'model.'
MOMENT_PREFIXES = ('optim.m.', 'optim.v.')
EXTRA_PREFIX = 'extra.'


@dataclass
class Checkpoint:
    """
    内存中的检查点

    Attributes:
        kind: 模块类型（semantic_codec / acoustic_codec / t2s / s2a / duration）
        config: 解析后配置的 key=value 快照
        step: 已完成的训练步数
        rng: 训练随机流状态
        tensors: 名称 → 数组（保持写入顺序）
    """
    kind: str
    config: Dict[str, str] = field(default_factory=dict)
    step: int = 0
    rng: RngState = field(default_factory=lambda: RngState(0, 0))
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def with_prefix(self, prefix: str) -> Dict[str, np.ndarray]:
        return {name[len(prefix):]: value for name, value in self.tensors.items() if name.startswith(prefix)}

    def model_state(self) -> Dict[str, np.ndarray]:
        return self.with_prefix(MODEL_PREFIX)

    def extras(self) -> Dict[str, np.ndarray]:
        return self.with_prefix(EXTRA_PREFIX)

    def has_optimizer(self) -> bool:
        return any(name.startswith(MOMENT_PREFIXES[0]) for name in self.tensors)


def _pack_str(text: str, width: str) -> bytes:
    data = text.encode('utf-8')
    return struct.pack('<' + width, len(data)) + data


class _Reader:
    """带边界检查的顺序读取器"""

    def __init__(self, data: bytes, path: str):
        self.buf = io.BytesIO(data)
        self.path = path

    def take(self, n: int) -> bytes:
        chunk = self.buf.read(n)
        if len(chunk) != n:
            raise ContractViolation("E_FORMAT", f"truncated checkpoint {self.path}")
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack('<' + fmt, self.take(struct.calcsize('<' + fmt)))

    def string(self, width: str) -> str:
        (n,) = self.unpack(width)
        try:
            return self.take(n).decode('utf-8')
        except UnicodeDecodeError as e:
            raise ContractViolation("E_FORMAT", f"bad string in checkpoint {self.path}") from e


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    if ckpt.kind not in MODULE_KINDS:
        raise ContractViolation("E_CKPT_KIND", f"unknown module kind '{ckpt.kind}'")
    config_text = '\n'.join(f"{k}={v}" for k, v in sorted(ckpt.config.items()))
    header = [CHECKPOINT_MAGIC, struct.pack('<I', CHECKPOINT_VERSION),
              _pack_str(ckpt.kind, 'H'), _pack_str(config_text, 'I'),
              struct.pack('<QQQ', ckpt.step, ckpt.rng.seed & 0xFFFFFFFFFFFFFFFF, ckpt.rng.position),
              struct.pack('<I', len(ckpt.tensors))]

    index, payloads, offset = [], [], 0
    for name, value in ckpt.tensors.items():
        array = np.ascontiguousarray(np.asarray(value), dtype='<f4')
        index.append(_pack_str(name, 'H') + struct.pack('<B', array.ndim)
                     + struct.pack(f'<{array.ndim}I', *array.shape) + struct.pack('<Q', offset))
        raw = array.tobytes()
        payloads.append(raw)
        offset += len(raw)
    return b''.join(header + index + payloads)


def decode_checkpoint(data: bytes, path: str = '<memory>') -> Checkpoint:
    reader = _Reader(data, path)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise ContractViolation("E_CKPT_MAGIC", f"{path} is not a checkpoint (bad magic)")
    (version,) = reader.unpack('I')
    if version != CHECKPOINT_VERSION:
        raise ContractViolation("E_CKPT_VERSION", f"{path} has format version {version}, "
                                                  f"expected {CHECKPOINT_VERSION}")
    kind = reader.string('H')
    config_text = reader.string('I')
    config = dict(line.split('=', 1) for line in config_text.splitlines() if '=' in line)
    step, seed, position = reader.unpack('QQQ')
    (count,) = reader.unpack('I')

    entries = []
    for _ in range(count):
        name = reader.string('H')
        (ndim,) = reader.unpack('B')
        shape = reader.unpack(f'{ndim}I') if ndim else ()
        (offset,) = reader.unpack('Q')
        entries.append((name, tuple(shape), offset))

    base = reader.buf.tell()
    tensors = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        start = base + offset
        end = start + 4 * n
        if end > len(data):
            raise ContractViolation("E_FORMAT", f"truncated tensor '{name}' in {path}")
        tensors[name] = np.frombuffer(data[start:end], dtype='<f4').astype(np.float32).reshape(shape)
    return Checkpoint(kind, config, int(step), RngState(int(seed), int(position)), tensors)


def save_checkpoint(path: str, ckpt: Checkpoint) -> str:
    """
    原子写入检查点（先写临时文件再替换）

    Returns:
        写入的路径
    """
    data = encode_checkpoint(ckpt)
    tmp = path + '.tmp'
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(tmp, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        raise MaskGCTError(f"cannot write checkpoint {path}: {e}", "E_IO") from e
    logger.debug(f"💾 检查点已保存: {path} (kind={ckpt.kind}, step={ckpt.step}, tensors={len(ckpt.tensors)})")
    return path


def load_checkpoint(path: str, expected_kind: Optional[str] = None) -> Checkpoint:
    """
    读取检查点

    Raises:
        MaskGCTError: 文件不存在或不可读（E_IO）
        ContractViolation: 魔数/版本/模块类型不符
    """
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise MaskGCTError(f"cannot read checkpoint {path}: {e}", "E_IO") from e
    ckpt = decode_checkpoint(data, path)
    if expected_kind is not None and ckpt.kind != expected_kind:
        raise ContractViolation("E_CKPT_KIND", f"{path} holds a '{ckpt.kind}' checkpoint, "
                                               f"expected '{expected_kind}'")
    return ckpt


def pack_checkpoint(kind: str, config_lines, model, optimizer: Optional[AdamW] = None, rng: Optional[Rng] = None,
                    extras: Optional[Dict[str, np.ndarray]] = None) -> Checkpoint:
    """
    把模型（及可选的优化器、随机流、附加数组）打包为检查点

    Args:
        config_lines: Config.to_lines() 的输出
    """
    config = dict(line.split('=', 1) for line in config_lines)
    tensors = {MODEL_PREFIX + name: value for name, value in model.state_dict().items()}
    step = 0
    if optimizer is not None:
        step = optimizer.state.step
        for i, (m, v) in enumerate(zip(optimizer.state.m, optimizer.state.v)):
            tensors[f'{MOMENT_PREFIXES[0]}{i}'] = m
            tensors[f'{MOMENT_PREFIXES[1]}{i}'] = v
    for name, value in (extras or {}).items():
        tensors[EXTRA_PREFIX + name] = np.asarray(value)
    rng_state = rng.state() if rng is not None else RngState(0, 0)
    return Checkpoint(kind, config, step, rng_state, tensors)


def restore_optimizer(ckpt: Checkpoint, optimizer: AdamW):
    """恢复 AdamW 的矩与步数"""
    m = ckpt.with_prefix(MOMENT_PREFIXES[0])
    v = ckpt.with_prefix(MOMENT_PREFIXES[1])
    if len(m) != len(optimizer.state.m) or len(v) != len(optimizer.state.v):
        raise ContractViolation("E_FORMAT", f"checkpoint has {len(m)} optimizer moments, "
                                            f"optimizer expects {len(optimizer.state.m)}")
    for i in range(len(optimizer.state.m)):
        if m[str(i)].shape != optimizer.state.m[i].shape:
            raise ContractViolation("E_SHAPE", f"optimizer moment {i} shape mismatch")
        optimizer.state.m[i] = m[str(i)].astype(optimizer.state.m[i].dtype, copy=True)
        optimizer.state.v[i] = v[str(i)].astype(optimizer.state.v[i].dtype, copy=True)
    optimizer.state.step = ckpt.step


def describe_checkpoint(ckpt: Checkpoint) -> str:
    """inspect-checkpoint 的文本输出"""
    model = ckpt.model_state()
    lines = [f"kind={ckpt.kind}",
             f"version={CHECKPOINT_VERSION}",
             f"step={ckpt.step}",
             f"rng_seed={ckpt.rng.seed}",
             f"rng_position={ckpt.rng.position}",
             f"tensors={len(ckpt.tensors)}",
             f"parameters={int(sum(v.size for v in model.values()))}"]
    for name, value in ckpt.tensors.items():
        lines.append(f"tensor {name} shape={'x'.join(str(s) for s in value.shape) or 'scalar'}")
    for key in sorted(ckpt.config):
        lines.append(f"config {key}={ckpt.config[key]}")
    return '\n'.join(lines)
