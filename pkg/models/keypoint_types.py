"""
KDSM - 关键点/prompt/热图数据类

设计原则：
- 数值数据统一为 float64 numpy 数组
- 标识类对象不可变（frozen=True）
- 坐标单位：图像像素（x 向右，y 向下）
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigValidationError


PROMPT_TEMPLATE = "The {category} of a {species} in the photo."
PLACEHOLDER_PROMPT = "There is not the keypoint we are looking for."


@dataclass(frozen=True)
class PromptSpec:
    """单个 prompt：(物种, 关键点类别) 及渲染后的句子"""
    species: str
    keypoint_category: str
    rendered: str

    @property
    def pair(self) -> Tuple[str, str]:
        return (self.species, self.keypoint_category)


@dataclass
class PromptBatch:
    """
    补齐到 K 行的 prompt 嵌入

    raw 的第 K_valid..K-1 行都是占位 prompt 的嵌入
    """
    prompts: List[PromptSpec]
    raw: np.ndarray          # K × C₀
    K: int
    K_valid: int

    @property
    def pairs(self) -> List[Tuple[str, str]]:
        return [p.pair for p in self.prompts]


@dataclass
class KeypointSet:
    """一张图上的关键点真值"""
    coords: np.ndarray                       # N × 2, (x, y)
    visible: np.ndarray                      # N, bool
    bbox: Tuple[float, float, float, float]  # (x0, y0, x1, y1)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if len(self.visible) != len(self.coords):
            raise ConfigValidationError(
                f"KeypointSet: {len(self.coords)} coords but {len(self.visible)} visibility flags"
            )
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ConfigValidationError(f"KeypointSet: degenerate bbox {self.bbox}")
        if not np.all(np.isfinite(self.coords)):
            raise ConfigValidationError("KeypointSet: non-finite coordinates")

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def longest_side(self) -> float:
        x0, y0, x1, y1 = self.bbox
        return float(max(x1 - x0, y1 - y0))

    def subset(self, indices: Sequence[int]) -> 'KeypointSet':
        """按索引取子集（bbox 保持不变）"""
        idx = np.asarray(list(indices), dtype=np.int64)
        return KeypointSet(coords=self.coords[idx], visible=self.visible[idx], bbox=self.bbox)

    def to_dict(self) -> Dict:
        return {
            'coords': self.coords.tolist(),
            'visible': [bool(v) for v in self.visible],
            'bbox': [float(v) for v in self.bbox],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'KeypointSet':
        return cls(coords=np.asarray(data['coords'], dtype=np.float64),
                   visible=np.asarray(data['visible'], dtype=bool),
                   bbox=tuple(data['bbox']))


@dataclass
class HeatmapStack:
    """
    热图栈（真值 G、原始预测 H′、重排后 H）

    channels: N × hei × wid；前 valid 个通道有意义
    visible: 编码阶段每个通道的可见性（窗口完全出界时被清除）
    """
    channels: np.ndarray
    valid: int
    visible: Optional[np.ndarray] = None

    @property
    def n_channels(self) -> int:
        return int(self.channels.shape[0])

    @property
    def size(self) -> Tuple[int, int]:
        return int(self.channels.shape[1]), int(self.channels.shape[2])


@dataclass(frozen=True)
class DecodedKeypoint:
    """argmax 解码结果（热图坐标）"""
    x: int
    y: int
    score: float
    valid: bool


@dataclass(frozen=True)
class SpeciesTemplate:
    """
    物种模板

    categories 与 base_layout / render_style 一一对应；
    render_style 为图案编号，同名类别在所有物种中共享同一编号
    """
    name: str
    categories: Tuple[str, ...]
    base_layout: Tuple[Tuple[float, float], ...]
    render_style: Tuple[int, ...]

    def category_index(self, category: str) -> int:
        return self.categories.index(category)

    def to_dict(self) -> Dict:
        return {
            'name': self.name,
            'categories': list(self.categories),
            'base_layout': [list(p) for p in self.base_layout],
            'render_style': list(self.render_style),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'SpeciesTemplate':
        return cls(name=data['name'],
                   categories=tuple(data['categories']),
                   base_layout=tuple(tuple(float(v) for v in p) for p in data['base_layout']),
                   render_style=tuple(int(v) for v in data['render_style']))


@dataclass
class Sample:
    """
    数据集元素 (I, T(s,k), G(s,k))

    kps 与 prompts 按物种类别顺序一一对应
    """
    image: np.ndarray            # 1 × S × S, 取值 [0, 1]
    kps: KeypointSet
    species: str
    prompts: List[PromptSpec]
    sample_id: int = -1

    @property
    def categories(self) -> List[str]:
        return [p.keypoint_category for p in self.prompts]

    def restrict(self, categories: Sequence[str]) -> 'Sample':
        """只保留给定类别的 prompt 与关键点（保持原顺序）"""
        wanted = set(categories)
        keep = [i for i, p in enumerate(self.prompts) if p.keypoint_category in wanted]
        return replace(self,
                       kps=self.kps.subset(keep),
                       prompts=[self.prompts[i] for i in keep])


@dataclass(frozen=True)
class SplitPlan:
    """
    单个 fold 的训练/测试划分

    Setting A: 同一物种在两侧都出现，但类别不相交
    Setting B: 物种集合不相交
    """
    setting: str
    fold: int
    train_pairs: Tuple[Tuple[str, str], ...]
    test_pairs: Tuple[Tuple[str, str], ...]
    train_species: Tuple[str, ...]
    test_species: Tuple[str, ...]
    train_samples: Tuple[int, ...] = field(default_factory=tuple)
    test_samples: Tuple[int, ...] = field(default_factory=tuple)

    def categories_for(self, species: str, side: str) -> List[str]:
        pairs = self.train_pairs if side == 'train' else self.test_pairs
        return [c for s, c in pairs if s == species]

    def to_dict(self) -> Dict:
        return {
            'setting': self.setting,
            'fold': self.fold,
            'train_pairs': [list(p) for p in self.train_pairs],
            'test_pairs': [list(p) for p in self.test_pairs],
            'train_species': list(self.train_species),
            'test_species': list(self.test_species),
            'train_samples': list(self.train_samples),
            'test_samples': list(self.test_samples),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'SplitPlan':
        return cls(setting=data['setting'],
                   fold=int(data['fold']),
                   train_pairs=tuple(tuple(p) for p in data['train_pairs']),
                   test_pairs=tuple(tuple(p) for p in data['test_pairs']),
                   train_species=tuple(data['train_species']),
                   test_species=tuple(data['test_species']),
                   train_samples=tuple(int(i) for i in data.get('train_samples', [])),
                   test_samples=tuple(int(i) for i in data.get('test_samples', [])))
