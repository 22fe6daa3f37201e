# app/services/checkpoint.py
"""RFCK 二进制检查点。

布局（小端）: "RFCK" | u32 版本 | u64 步数 | u32 参数个数 |
每个参数: u32 名称长度 + UTF-8 名称, u32 维数 + u64 各维, f64 值, f64 一阶矩, f64 二阶矩, u64 矩步数 |
u32 配置长度 + UTF-8 JSON 配置快照
"""
import logging
import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from app.models.errors import CheckpointError
from app.models.schemas import TrainConfig
from app.services.autodiff import ParamStore
from app.services.storage import atomic_write

logger = logging.getLogger(__name__)

MAGIC = b"RFCK"
VERSION = 1


class CheckpointEntry(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str
    values: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int


class Checkpoint(BaseModel):
    """检查点内容: 步数、全部参数及其优化器状态、训练配置快照"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    version: int = VERSION
    step: int
    entries: List[CheckpointEntry]
    config_json: str

    def config(self) -> TrainConfig:
        try:
            return TrainConfig.model_validate_json(self.config_json)
        except ValidationError as e:
            raise CheckpointError(f"检查点中的配置快照无效: {e}")

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {entry.name: entry.values for entry in self.entries}

    def restore(self, store: ParamStore):
        """把参数值与优化器状态写回已初始化的存储，名称与形状必须完全一致"""
        names = [entry.name for entry in self.entries]
        if sorted(names) != sorted(store):
            extra = sorted(set(names) - set(store))
            missing = sorted(set(store) - set(names))
            raise CheckpointError(f"检查点与网络结构不匹配: 多出 {extra[:3]}，缺少 {missing[:3]}")
        for entry in self.entries:
            param = store.get(entry.name)
            if param.values.shape != entry.values.shape:
                raise CheckpointError(
                    f"参数 {entry.name} 形状不匹配: 检查点 {entry.values.shape} vs 网络 {param.values.shape}")
            param.values[...] = entry.values
            param.m[...] = entry.m
            param.v[...] = entry.v
            param.step = entry.step

    @classmethod
    def capture(cls, store: ParamStore, step: int, config: TrainConfig) -> "Checkpoint":
        entries = [CheckpointEntry(name=name, values=p.values.copy(), m=p.m.copy(), v=p.v.copy(), step=p.step)
                   for name, p in store.items()]
        return cls(step=step, entries=entries, config_json=config.snapshot_json())


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    chunks = [MAGIC, struct.pack("<IQI", checkpoint.version, checkpoint.step, len(checkpoint.entries))]
    for entry in checkpoint.entries:
        name = entry.name.encode("utf-8")
        shape = entry.values.shape
        chunks.append(struct.pack("<I", len(name)) + name)
        chunks.append(struct.pack(f"<I{len(shape)}Q", len(shape), *shape))
        for array in (entry.values, entry.m, entry.v):
            chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
        chunks.append(struct.pack("<Q", entry.step))
    config = checkpoint.config_json.encode("utf-8")
    chunks.append(struct.pack("<I", len(config)) + config)
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointError(f"检查点在读取{what}时被截断 ({self.path}, 字节{self.offset})")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes, path: str = "<memory>") -> Checkpoint:
    reader = _Reader(data, path)
    magic = reader.take(4, "魔数")
    if magic != MAGIC:
        raise CheckpointError(f"检查点魔数错误: {magic!r} ({path})")
    version, step, count = reader.unpack("<IQI", "文件头")
    if version != VERSION:
        raise CheckpointError(f"不支持的检查点版本 {version}，当前版本 {VERSION} ({path})")

    entries: List[CheckpointEntry] = []
    for _ in range(count):
        (name_len,) = reader.unpack("<I", "参数名长度")
        try:
            name = reader.take(name_len, "参数名").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"参数名不是合法 UTF-8 ({path}, 字节{reader.offset}): {e}")
        (rank,) = reader.unpack("<I", f"{name} 的维数")
        shape = reader.unpack(f"<{rank}Q", f"{name} 的形状")
        size = int(np.prod(shape, dtype=np.int64))
        arrays = [np.frombuffer(reader.take(8 * size, f"{name} 的数据"), dtype="<f8").astype(np.float64).reshape(shape)
                  for _ in range(3)]
        (moment_step,) = reader.unpack("<Q", f"{name} 的矩步数")
        entries.append(CheckpointEntry(name=name, values=arrays[0], m=arrays[1], v=arrays[2], step=moment_step))

    (config_len,) = reader.unpack("<I", "配置长度")
    try:
        config_json = reader.take(config_len, "配置快照").decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointError(f"配置快照不是合法 UTF-8 ({path}): {e}")
    if reader.offset != len(data):
        raise CheckpointError(f"检查点尾部有多余数据 ({path}, 字节{reader.offset})")
    return Checkpoint(version=version, step=step, entries=entries, config_json=config_json)


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    with atomic_write(path) as handle:
        handle.write(encode_checkpoint(checkpoint))
    logger.info(f"检查点已保存: {path} (step={checkpoint.step})")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        logger.error(f"读取检查点失败: {e}")
        raise CheckpointError(f"无法读取检查点 {path}: {e}")
    return decode_checkpoint(data, str(path))
