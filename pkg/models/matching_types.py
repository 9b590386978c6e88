"""
KDSM - 分组与匹配数据类

Grouping / DomainMatrix 由离线聚类阶段产生；
PredictedMatrix / Assignment 由推理阶段产生。
"""

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np


@dataclass(frozen=True)
class Grouping:
    """
    约束 K-means 的结果

    不变量：同一物种的所有类别映射到两两不同的分组，分组编号 < O
    """
    centroids: np.ndarray                              # O × C₀
    assignment: Dict[Tuple[str, str], int]
    objective: float = 0.0
    objective_history: Tuple[float, ...] = field(default_factory=tuple)

    @property
    def O(self) -> int:
        return int(self.centroids.shape[0])

    def group_of(self, species: str, category: str) -> int:
        return self.assignment[(species, category)]

    def members(self, group: int) -> List[Tuple[str, str]]:
        return sorted(pair for pair, g in self.assignment.items() if g == group)

    def sidecar_lines(self) -> List[str]:
        """人类可读的 (species, category) → group 列表"""
        return [f"{s}\t{c}\t{g}" for (s, c), g in sorted(self.assignment.items())]


@dataclass(frozen=True)
class DomainMatrix:
    """
    二值域分布矩阵 D (K × O)

    前 K_valid 行各有且仅有一个 1，其余行全 0
    """
    d: np.ndarray
    K_valid: int

    @property
    def selections(self) -> List[int]:
        return [int(np.argmax(self.d[i])) for i in range(self.K_valid)]


@dataclass(frozen=True)
class PredictedMatrix:
    """预测分布矩阵 P (K × O)，按行 softmax"""
    p: np.ndarray


@dataclass(frozen=True)
class Assignment:
    """每个关键点分配到的热图通道，未分配为 -1"""
    l: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.l)

    def has_collision(self, upto: int = None) -> bool:
        """前 upto 个条目中是否有两个关键点落到同一通道"""
        chosen = [o for o in self.l[:upto] if o >= 0]
        return len(chosen) != len(set(chosen))
