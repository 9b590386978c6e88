"""
KDSM Engine - 约束 K-means 分组（离线阶段）

负责：
1. 把训练集全部 (species, category) 的类别嵌入聚成 O 组
   约束：同一物种的各类别必须落在两两不同的组
2. 为每个样本构造二值域分布矩阵 D (K × O)

算法：
- k-means++ 初始化（由 seed 决定）
- 分配步：每个物种在 “类别 × 中心” 的平方距离矩阵上解一次矩形指派
  （只有一个类别的物种直接取最近中心，并列取小编号）
- 更新步：中心取成员均值；空簇重置到离自身中心最远的点（距离 > 0 时）
- 分配不再变化或达到 max_iter 时停止
- n_init 次重启取目标值最小者
"""

import logging
from collections import defaultdict
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from models.errors import (
    CapacityError, ConfigValidationError, DataError, DimensionError, GroupLookupError,
)
from models.keypoint_types import PromptSpec
from models.matching_types import DomainMatrix, Grouping

logger = logging.getLogger(__name__)

Pair = Tuple[str, str]

# 指派求解的并列打破：编号越小代价越低
_TIE_EPS = 1e-13


def _squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return (diff * diff).sum(axis=2)


def _kmeans_pp(x: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ 播种；剩余距离全为 0 时均匀抽取"""
    n = len(x)
    centroids = np.empty((n_clusters, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, n_clusters):
        total = closest.sum()
        if total > 0:
            pick = rng.choice(n, p=closest / total)
        else:
            pick = rng.integers(n)
        centroids[j] = x[pick]
        closest = np.minimum(closest, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


class _ConstrainedLloyd:
    """单次约束 Lloyd 迭代"""

    def __init__(self, x: np.ndarray, species_members: List[np.ndarray], n_clusters: int, max_iter: int):
        self.x = x
        self.species_members = species_members
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.tie = _TIE_EPS * np.arange(n_clusters)

    def assign(self, centroids: np.ndarray) -> Tuple[np.ndarray, float]:
        cost = _squared_distances(self.x, centroids)
        labels = np.empty(len(self.x), dtype=np.int64)
        for members in self.species_members:
            if len(members) == 1:
                labels[members[0]] = int(np.argmin(cost[members[0]]))
                continue
            rows, cols = linear_sum_assignment(cost[members] + self.tie)
            labels[members[rows]] = cols
        objective = float(cost[np.arange(len(self.x)), labels].sum())
        return labels, objective

    def update(self, labels: np.ndarray, centroids: np.ndarray, reseed: bool = True) -> np.ndarray:
        updated = centroids.copy()
        empty = []
        for j in range(self.n_clusters):
            mask = labels == j
            if mask.any():
                updated[j] = self.x[mask].mean(axis=0)
            else:
                empty.append(j)
        if reseed and empty:
            own = ((self.x - updated[labels]) ** 2).sum(axis=1)
            order = np.argsort(-own, kind='stable')
            candidates = [int(i) for i in order if own[i] > 0]
            for j, point in zip(empty, candidates):
                updated[j] = self.x[point]
                logger.debug(f"Reseeded empty cluster {j} at point {point} (distance {own[point]:.3g})")
        return updated

    def run(self, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, List[float]]:
        centroids = _kmeans_pp(self.x, self.n_clusters, rng)
        labels = None
        history: List[float] = []
        for _ in range(self.max_iter):
            new_labels, objective = self.assign(centroids)
            history.append(objective)
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            centroids = self.update(labels, centroids)
        centroids = self.update(labels, centroids, reseed=False)
        final = float(((self.x - centroids[labels]) ** 2).sum())
        if final < history[-1]:
            history.append(final)
        return labels, centroids, history


def constrained_kmeans(embeddings: Sequence[Tuple[Pair, np.ndarray]], O: int, seed: int = 0,
                       max_iter: int = 100, n_init: int = 10) -> Grouping:
    """
    约束 K-means

    Args:
        embeddings: [((species, category), 向量), ...]
        O: 分组数
        seed: 随机种子
        max_iter: 单次运行的最大 Lloyd 迭代数
        n_init: 重启次数

    Returns:
        Grouping

    Raises:
        ConfigValidationError: O 小于某物种的类别数（列出这些物种）
    """
    if not embeddings:
        raise ConfigValidationError("constrained_kmeans: no embeddings to cluster")
    if O < 1 or n_init < 1 or max_iter < 1:
        raise ConfigValidationError(f"constrained_kmeans: invalid O={O}, n_init={n_init}, max_iter={max_iter}")

    pairs = [pair for pair, _ in embeddings]
    width = len(embeddings[0][1])
    for pair, vec in embeddings:
        if len(vec) != width:
            raise DimensionError(f"constrained_kmeans[{pair}]", (width,), (len(vec),))
    if len(set(pairs)) != len(pairs):
        raise ConfigValidationError("constrained_kmeans: duplicate (species, category) pairs")
    x = np.stack([np.asarray(vec, dtype=np.float64) for _, vec in embeddings])

    by_species: Dict[str, List[int]] = defaultdict(list)
    for i, (species, _) in enumerate(pairs):
        by_species[species].append(i)
    offending = sorted(s for s, idx in by_species.items() if len(idx) > O)
    if offending:
        raise ConfigValidationError(
            f"O={O} is infeasible: species with more categories than groups: {', '.join(offending)}"
        )

    lloyd = _ConstrainedLloyd(x, [np.asarray(idx) for _, idx in sorted(by_species.items())], O, max_iter)
    master = np.random.default_rng(seed)
    best = None
    for run in range(n_init):
        labels, centroids, history = lloyd.run(np.random.default_rng(master.integers(2 ** 63)))
        logger.debug(f"kmeans run {run}: objective={history[-1]:.6g} after {len(history)} steps")
        if best is None or history[-1] < best[2][-1]:
            best = (labels, centroids, history)

    labels, centroids, history = best
    assignment = {pair: int(g) for pair, g in zip(pairs, labels)}
    used = len(set(assignment.values()))
    logger.info(f"Clustered {len(pairs)} pairs into {used}/{O} groups (objective {history[-1]:.6g})")
    return Grouping(centroids=centroids, assignment=assignment,
                    objective=history[-1], objective_history=tuple(history))


def build_domain_matrix(prompts: Sequence[Union[Pair, PromptSpec]], grouping: Grouping, K: int) -> DomainMatrix:
    """
    构造二值域分布矩阵 D

    第 i 行在 grouping 指定的组上为 1；第 K_valid 行之后全为 0

    Raises:
        CapacityError: prompt 数超过 K
        GroupLookupError: (species, category) 不在聚类结果中
    """
    pairs = [p.pair if isinstance(p, PromptSpec) else tuple(p) for p in prompts]
    if len(pairs) > K:
        raise CapacityError(f"{len(pairs)} prompts exceed capacity K={K}")
    d = np.zeros((K, grouping.O))
    seen = {}
    for i, pair in enumerate(pairs):
        if pair not in grouping.assignment:
            raise GroupLookupError(f"pair {pair} was not clustered")
        g = grouping.assignment[pair]
        if g in seen:
            raise DataError(f"prompts {pairs[seen[g]]} and {pair} share group {g} within one sample")
        seen[g] = i
        d[i, g] = 1.0
    return DomainMatrix(d=d, K_valid=len(pairs))
