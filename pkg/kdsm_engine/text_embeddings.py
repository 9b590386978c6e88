"""
KDSM Engine - 文本嵌入

负责：
1. prompt 构造（模板 + 占位 prompt）
2. 确定性合成编码器（FNV-1a 64 位哈希 → 每个 token 一个高斯向量 → 求和 → L2 归一化）
3. KEMB 嵌入表读写（导入外部预计算的文本编码器输出）
4. embed_batch：补齐到 K 行

设计原则：
- 文本编码器冻结：输出是常量，不参与反传
- 表中缺键时只有 allow_synth_fallback 打开才退回合成编码，否则报错
- 分词：小写 + 按非字母数字切分（"Left Eye" 与 "left eye" 等价）
"""

import logging
import re
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from models.errors import (
    CapacityError, ConfigValidationError, EmbeddingParseError, PromptValidationError,
)
from models.keypoint_types import PLACEHOLDER_PROMPT, PROMPT_TEMPLATE, PromptBatch, PromptSpec

logger = logging.getLogger(__name__)

KEMB_MAGIC = b"KEMB"
KEMB_VERSION = 1

_FNV_OFFSET = 0xcbf29ce484222325
_FNV_PRIME = 0x100000001b3
_MASK64 = (1 << 64) - 1

# KEMB 向量按 float32 存储；落盘前先把平方范数调到 1 ± 1e-10 以内
NORM_SQ_TOLERANCE = 1e-10


# ==========================================
# Prompt
# ==========================================

def build_prompt(species: str, keypoint_category: str) -> PromptSpec:
    """
    构造 prompt

    Raises:
        PromptValidationError: 物种或类别为空
    """
    if not species or not species.strip():
        raise PromptValidationError("prompt species must be non-empty")
    if not keypoint_category or not keypoint_category.strip():
        raise PromptValidationError("prompt keypoint category must be non-empty")
    rendered = PROMPT_TEMPLATE.format(category=keypoint_category, species=species)
    return PromptSpec(species=species, keypoint_category=keypoint_category, rendered=rendered)


def build_prompts(species: str, categories: Iterable[str]) -> List[PromptSpec]:
    return [build_prompt(species, c) for c in categories]


def placeholder_prompt() -> str:
    return PLACEHOLDER_PROMPT


def parse_prompt_arg(text: str) -> PromptSpec:
    """解析 CLI 的 "species:category" 形式"""
    species, sep, category = text.partition(':')
    if not sep:
        raise PromptValidationError(f"prompt '{text}' must look like 'species:category'")
    return build_prompt(species.strip(), category.strip())


# ==========================================
# 合成编码器
# ==========================================

def tokenize(text: str) -> List[str]:
    return re.findall(r'[a-z0-9]+', text.lower())


def fnv1a_64(token: str) -> int:
    h = _FNV_OFFSET
    for byte in token.encode('utf-8'):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=4096)
def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([fnv1a_64(token), seed])
    vec = rng.standard_normal(dim)
    vec.setflags(write=False)
    return vec


def synthetic_encode(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """
    确定性合成文本编码

    同一文本在任意运行/平台上得到逐位相同的单位向量
    """
    if dim < 8:
        raise ConfigValidationError(f"synthetic encoder needs dim >= 8, got {dim}")
    tokens = tokenize(text)
    if not tokens:
        raise PromptValidationError(f"nothing to encode in '{text}'")
    total = np.zeros(dim)
    for token in tokens:
        total = total + _token_vector(token, dim, seed)
    return total / np.linalg.norm(total)


# ==========================================
# 嵌入表
# ==========================================

def unit_float32(vec: np.ndarray, key: str = "") -> np.ndarray:
    """
    单位化并落到 float32 可表示的值上

    先归一化后取整到 float32，再逐次把一个或两个分量挪一个 ulp，
    直到 float64 下 |‖v‖² − 1| ≤ NORM_SQ_TOLERANCE（范数误差约 5e-11）。
    各分量幅值全部相同时 ulp 步长一致，可能停在 1e-8 量级，此时记一条 warning。
    调整停在不动点上，所以反复调用结果不变。

    Returns:
        只读 float64 数组，每个值都能无损写成 '<f4'

    Raises:
        EmbeddingParseError: 零向量或非有限值（reason = zero_vector）
    """
    v = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if not np.isfinite(norm) or norm == 0.0:
        raise EmbeddingParseError('zero_vector', f"embedding '{key}' cannot be normalized (norm={norm})")

    q = v.astype(np.float32)
    # 已是 float32 且接近单位长度的向量直接从自身开始调整
    if not np.array_equal(q.astype(np.float64), v) or abs(norm - 1.0) > 1e-6:
        q = (v / norm).astype(np.float32)

    n = q.size
    up = np.float32(np.inf)
    owner = np.arange(2 * n) % n
    same_owner = owner[:, None] == owner[None, :]
    # |err| 每轮严格下降，循环必然终止，终点是不动点
    while True:
        w = q.astype(np.float64)
        err = float(w @ w) - 1.0
        if abs(err) <= NORM_SQ_TOLERANCE:
            break
        # 候选：每个分量向外或向 0 挪一个 ulp
        candidates = np.concatenate([np.nextafter(q, np.where(q < 0, -up, up)),
                                     np.nextafter(q, np.float32(0.0))])
        delta = candidates.astype(np.float64) ** 2 - np.concatenate([w, w]) ** 2
        single = np.abs(err + delta)
        best = int(np.argmin(single))
        if single[best] < abs(err) * (1.0 - 1e-6):
            q[owner[best]] = candidates[best]
            continue
        # 单步无改进时，两个不同分量同时挪
        pair = np.abs(err + delta[:, None] + delta[None, :])
        pair[same_owner] = np.inf
        i, j = np.unravel_index(int(np.argmin(pair)), pair.shape)
        if pair[i, j] >= abs(err) * (1.0 - 1e-6):
            break
        q[owner[i]] = candidates[i]
        q[owner[j]] = candidates[j]

    out = q.astype(np.float64)
    if abs(float(np.linalg.norm(out)) - 1.0) > 1e-9:
        logger.warning(f"embedding '{key}' norm settled at {np.linalg.norm(out)!r}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class EmbeddingTable:
    """
    文本嵌入表（加载后只读）

    entries: 渲染后的 prompt / 类别名 → 长度 C₀ 的单位向量
    构造时每个向量都经 unit_float32 处理，save → load 逐位不变
    normalized: KEMB 头部的归一化标志（原样写回）
    """
    dim: int
    entries: Dict[str, np.ndarray] = field(default_factory=dict)
    normalized: bool = True

    def __post_init__(self):
        for key, vec in self.entries.items():
            if np.shape(vec) != (self.dim,):
                raise ConfigValidationError(
                    f"embedding '{key}' has width {np.shape(vec)[-1]} but table dim is {self.dim}"
                )
        object.__setattr__(self, 'entries', {k: unit_float32(v, k) for k, v in self.entries.items()})

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, key: str) -> Optional[np.ndarray]:
        return self.entries.get(key)

    @classmethod
    def from_texts(cls, texts: Iterable[str], dim: int, seed: int = 0) -> 'EmbeddingTable':
        """用合成编码器生成一张表（导出给外部工具或测试用）"""
        return cls(dim=dim, entries={t: synthetic_encode(t, dim, seed) for t in texts})


def save_table(table: EmbeddingTable, path: str) -> None:
    """按 KEMB 格式写出（32 位浮点，小端）"""
    chunks = [KEMB_MAGIC, struct.pack('<IIIB', KEMB_VERSION, table.dim, len(table), int(table.normalized))]
    for key, vec in table.entries.items():
        raw_key = key.encode('utf-8')
        chunks.append(struct.pack('<H', len(raw_key)))
        chunks.append(raw_key)
        chunks.append(np.asarray(vec, dtype='<f4').tobytes())
    Path(path).write_bytes(b"".join(chunks))
    logger.info(f"Saved embedding table: {len(table)} entries (dim={table.dim}) → {path}")


def load_table(path: str, expected_dim: Optional[int] = None) -> EmbeddingTable:
    """
    读取 KEMB 文件

    读入的向量统一经 unit_float32 归一化；头部标志只原样保留

    Raises:
        EmbeddingParseError: bad_magic / bad_version / truncated / duplicate_key / zero_vector
        ConfigValidationError: dim 与 expected_dim 不一致
    """
    data = Path(path).read_bytes()
    if data[:4] != KEMB_MAGIC:
        raise EmbeddingParseError('bad_magic', f"{path}: bad magic {data[:4]!r}")
    header_size = 4 + struct.calcsize('<IIIB')
    if len(data) < header_size:
        raise EmbeddingParseError('truncated', f"{path}: truncated header")
    version, dim, count, normalized = struct.unpack_from('<IIIB', data, 4)
    if version != KEMB_VERSION:
        raise EmbeddingParseError('bad_version', f"{path}: unsupported version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise ConfigValidationError(f"{path}: table dim {dim} does not match C0={expected_dim}")

    entries: Dict[str, np.ndarray] = {}
    offset = header_size
    vec_bytes = 4 * dim
    for _ in range(count):
        if offset + 2 > len(data):
            raise EmbeddingParseError('truncated', f"{path}: truncated record header")
        (key_len,) = struct.unpack_from('<H', data, offset)
        offset += 2
        if offset + key_len + vec_bytes > len(data):
            raise EmbeddingParseError('truncated', f"{path}: truncated record body")
        key = data[offset:offset + key_len].decode('utf-8')
        offset += key_len
        if key in entries:
            raise EmbeddingParseError('duplicate_key', f"{path}: duplicate key '{key}'")
        entries[key] = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).astype(np.float64)
        offset += vec_bytes

    logger.info(f"Loaded embedding table: {count} entries (dim={dim}) from {path}")
    return EmbeddingTable(dim=dim, entries=entries, normalized=bool(normalized))


# ==========================================
# 嵌入来源
# ==========================================

class EmbeddingSource(ABC):
    """冻结文本编码器的接口"""

    @property
    @abstractmethod
    def dim(self) -> int:
        pass

    @abstractmethod
    def encode(self, text: str) -> np.ndarray:
        pass


class SyntheticEncoder(EmbeddingSource):
    """合成编码器"""

    def __init__(self, dim: int, seed: int = 0):
        if dim < 8:
            raise ConfigValidationError(f"synthetic encoder needs dim >= 8, got {dim}")
        self._dim = dim
        self.seed = seed

    @property
    def dim(self) -> int:
        return self._dim

    def encode(self, text: str) -> np.ndarray:
        return synthetic_encode(text, self._dim, self.seed)


class TableEncoder(EmbeddingSource):
    """
    嵌入表查表

    缺键时：有 fallback 则用合成编码（每个键告警一次），否则报配置错误
    """

    def __init__(self, table: EmbeddingTable, fallback: Optional[SyntheticEncoder] = None):
        if fallback is not None and fallback.dim != table.dim:
            raise ConfigValidationError(
                f"fallback encoder dim {fallback.dim} does not match table dim {table.dim}"
            )
        self.table = table
        self.fallback = fallback
        self._warned = set()

    @property
    def dim(self) -> int:
        return self.table.dim

    def encode(self, text: str) -> np.ndarray:
        vec = self.table.get(text)
        if vec is not None:
            return vec
        if self.fallback is None:
            raise ConfigValidationError(
                f"embedding table has no entry for '{text}' (set allow_synth_fallback to use the synthetic encoder)"
            )
        if text not in self._warned:
            self._warned.add(text)
            logger.warning(f"No table entry for '{text}', falling back to synthetic encoding")
        return self.fallback.encode(text)


def make_source(dim: int, seed: int = 0, table_path: Optional[str] = None,
                allow_synth_fallback: bool = False) -> EmbeddingSource:
    """按配置构造嵌入来源"""
    if not table_path:
        return SyntheticEncoder(dim, seed)
    table = load_table(table_path, expected_dim=dim)
    fallback = SyntheticEncoder(dim, seed) if allow_synth_fallback else None
    return TableEncoder(table, fallback)


# ==========================================
# 批量嵌入
# ==========================================

def embed_batch(prompts: Sequence[PromptSpec], source: EmbeddingSource, K: int) -> PromptBatch:
    """
    嵌入一组 prompt 并用占位嵌入补齐到 K 行

    Raises:
        CapacityError: prompt 数超过 K
    """
    if len(prompts) > K:
        raise CapacityError(f"{len(prompts)} prompts exceed capacity K={K}")
    raw = np.empty((K, source.dim))
    for i, prompt in enumerate(prompts):
        raw[i] = source.encode(prompt.rendered)
    if len(prompts) < K:
        raw[len(prompts):] = source.encode(PLACEHOLDER_PROMPT)
    return PromptBatch(prompts=list(prompts), raw=raw, K=K, K_valid=len(prompts))


def category_embeddings(pairs: Iterable[Tuple[str, str]],
                        source: EmbeddingSource) -> List[Tuple[Tuple[str, str], np.ndarray]]:
    """
    聚类输入：每个 (species, category) 取类别名本身的嵌入

    同名类别在不同物种间得到完全相同的向量
    """
    return [((species, category), source.encode(category)) for species, category in pairs]
