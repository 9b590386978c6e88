"""
KDSM Engine - 检查点存储（KCKP）与分组文件（KGRP）

KCKP 布局（整数均为小端）：
    "KCKP" | u32 version | u32 CRC32(payload) | u64 payload 长度 | payload
payload：
    u32 JSON 长度 | UTF-8 JSON（config / step / meta / log_tail，sort_keys）
    u32 张量个数 | 按名字排序的 {u16 名字长度, 名字, u8 rank, u32 dims…, f64 数据}
    u8 是否含分组 | [分组段]
分组段：
    u32 O | u32 C₀ | f64 中心 O×C₀ | u32 pair 数 |
    {u16 长度, species, u16 长度, category, u32 group}… | f64 objective | u32 n | f64 history…

设计原则：
- 先校验再解析（长度不足 → truncated，CRC 不符 → checksum），不会部分加载
- 同一 Checkpoint 两次保存逐字节相同
- 读取时若调用方给出的配置与快照不同，以快照为准并告警
"""

import io
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from models.errors import CheckpointError
from models.matching_types import Grouping

logger = logging.getLogger(__name__)

KCKP_MAGIC = b"KCKP"
KGRP_MAGIC = b"KGRP"
FORMAT_VERSION = 1
_HEADER = struct.Struct('<4sIIQ')


@dataclass
class Checkpoint:
    """
    检查点

    tensors 同时包含模型参数与 Adam 状态（adam.*）
    """
    config: Dict[str, Any]
    tensors: Dict[str, np.ndarray]
    grouping: Optional[Grouping] = None
    log_tail: List[Dict[str, float]] = field(default_factory=list)
    step: int = 0
    meta: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def param_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith('adam.')}

    @property
    def optimizer_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith('adam.')}


# ==========================================
# 底层读写
# ==========================================

class _Reader:
    """带越界检查的顺序读取器"""

    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError('truncated', f"{self.source}: unexpected end of data")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack('<H')
        return self.take(n).decode('utf-8')

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype='<f8').astype(np.float64)


def _write_text(buf: io.BytesIO, text: str) -> None:
    raw = text.encode('utf-8')
    buf.write(struct.pack('<H', len(raw)))
    buf.write(raw)


def _write_grouping(buf: io.BytesIO, grouping: Grouping) -> None:
    centroids = np.asarray(grouping.centroids, dtype='<f8')
    buf.write(struct.pack('<II', *centroids.shape))
    buf.write(centroids.tobytes())
    items = sorted(grouping.assignment.items())
    buf.write(struct.pack('<I', len(items)))
    for (species, category), g in items:
        _write_text(buf, species)
        _write_text(buf, category)
        buf.write(struct.pack('<I', g))
    buf.write(struct.pack('<d', grouping.objective))
    buf.write(struct.pack('<I', len(grouping.objective_history)))
    buf.write(np.asarray(grouping.objective_history, dtype='<f8').tobytes())


def _read_grouping(reader: _Reader) -> Grouping:
    n_groups, width = reader.unpack('<II')
    centroids = reader.floats(n_groups * width).reshape(n_groups, width)
    (count,) = reader.unpack('<I')
    assignment = {}
    for _ in range(count):
        species = reader.text()
        category = reader.text()
        (g,) = reader.unpack('<I')
        assignment[(species, category)] = int(g)
    (objective,) = reader.unpack('<d')
    (n_hist,) = reader.unpack('<I')
    history = tuple(float(v) for v in reader.floats(n_hist))
    return Grouping(centroids=centroids, assignment=assignment,
                    objective=float(objective), objective_history=history)


def _frame(magic: bytes, payload: bytes) -> bytes:
    return _HEADER.pack(magic, FORMAT_VERSION, zlib.crc32(payload) & 0xffffffff, len(payload)) + payload


def _unframe(data: bytes, magic: bytes, source: str) -> bytes:
    if len(data) < _HEADER.size:
        raise CheckpointError('truncated', f"{source}: file shorter than header")
    found, version, crc, length = _HEADER.unpack_from(data, 0)
    if found != magic:
        raise CheckpointError('bad_magic', f"{source}: bad magic {found!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError('version_mismatch', f"{source}: format version {version}, expected {FORMAT_VERSION}")
    payload = data[_HEADER.size:]
    if len(payload) < length:
        raise CheckpointError('truncated', f"{source}: payload has {len(payload)} of {length} bytes")
    payload = payload[:length]
    if zlib.crc32(payload) & 0xffffffff != crc:
        raise CheckpointError('checksum', f"{source}: CRC32 mismatch")
    return payload


# ==========================================
# 检查点
# ==========================================

def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    header = json.dumps({'config': ckpt.config, 'step': ckpt.step, 'meta': ckpt.meta,
                         'log_tail': ckpt.log_tail}, sort_keys=True, separators=(',', ':'))
    raw = header.encode('utf-8')
    buf.write(struct.pack('<I', len(raw)))
    buf.write(raw)

    buf.write(struct.pack('<I', len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype='<f8')
        _write_text(buf, name)
        buf.write(struct.pack('<B', arr.ndim))
        buf.write(struct.pack(f'<{arr.ndim}I', *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())

    if ckpt.grouping is None:
        buf.write(struct.pack('<B', 0))
    else:
        buf.write(struct.pack('<B', 1))
        _write_grouping(buf, ckpt.grouping)
    return _frame(KCKP_MAGIC, buf.getvalue())


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(_unframe(data, KCKP_MAGIC, source), source)
    (json_len,) = reader.unpack('<I')
    header = json.loads(reader.take(json_len).decode('utf-8'))

    tensors = {}
    (count,) = reader.unpack('<I')
    for _ in range(count):
        name = reader.text()
        (rank,) = reader.unpack('<B')
        shape = reader.unpack(f'<{rank}I') if rank else ()
        tensors[name] = reader.floats(int(np.prod(shape))).reshape(shape)

    (has_grouping,) = reader.unpack('<B')
    grouping = _read_grouping(reader) if has_grouping else None
    return Checkpoint(config=header['config'], tensors=tensors, grouping=grouping,
                      log_tail=header.get('log_tail', []), step=int(header.get('step', 0)),
                      meta=header.get('meta', {}))


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """写出 KCKP；含分组时另写一份 <path>.groups.txt"""
    target = Path(path)
    if target.parent and not target.parent.exists():
        target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(encode_checkpoint(ckpt))
    if ckpt.grouping is not None:
        write_grouping_sidecar(ckpt.grouping, f"{path}.groups.txt")
    logger.info(f"Saved checkpoint (step {ckpt.step}, {len(ckpt.tensors)} tensors) → {path}")


def load_checkpoint(path: str, requested_config: Optional[Dict[str, Any]] = None) -> Checkpoint:
    """
    读取 KCKP

    Raises:
        CheckpointError: bad_magic / version_mismatch / truncated / checksum
    """
    target = Path(path)
    if not target.exists():
        raise CheckpointError('missing', f"checkpoint not found: {path}")
    ckpt = decode_checkpoint(target.read_bytes(), source=str(path))
    if requested_config is not None and requested_config != ckpt.config:
        logger.warning(f"Config differs from the snapshot stored in {path}; using the stored snapshot")
    return ckpt


# ==========================================
# 独立分组文件
# ==========================================

def write_grouping_sidecar(grouping: Grouping, path: str) -> None:
    lines = ["# species\tcategory\tgroup"] + grouping.sidecar_lines()
    Path(path).write_text("\n".join(lines) + "\n", encoding='utf-8')


def save_grouping(grouping: Grouping, path: str) -> None:
    buf = io.BytesIO()
    _write_grouping(buf, grouping)
    Path(path).write_bytes(_frame(KGRP_MAGIC, buf.getvalue()))
    write_grouping_sidecar(grouping, f"{path}.txt")
    logger.info(f"Saved grouping ({len(grouping.assignment)} pairs, O={grouping.O}) → {path}")


def load_grouping(path: str) -> Grouping:
    data = Path(path).read_bytes()
    return _read_grouping(_Reader(_unframe(data, KGRP_MAGIC, str(path)), str(path)))
