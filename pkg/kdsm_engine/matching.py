"""
KDSM Engine - 域分布矩阵匹配（运行时）

负责：
1. 预测分布矩阵 P = softmax_rows(T′ × V′)
2. 匹配损失 −Σ D_ij log P_ij（P 下限 1e-12）与总损失 α·L_match + β·MSE
3. 通道重排：训练用 D，测试用 P 的分配结果
4. 推理分配：逐行最大值（默认）/ 优先队列贪心一对一（可选）
"""

import heapq
from typing import List, Sequence, Tuple, Union

import numpy as np

from models.enums import AssignmentMode
from models.errors import DimensionError, UsageError
from models.keypoint_types import HeatmapStack
from models.matching_types import Assignment, DomainMatrix, PredictedMatrix
from .autograd import Tensor, as_tensor
from .layers import clamped_log, mse_loss, select_channels, softmax_rows

MatrixLike = Union[Tensor, PredictedMatrix, np.ndarray]


def _array(p: MatrixLike) -> np.ndarray:
    if isinstance(p, PredictedMatrix):
        return p.p
    if isinstance(p, Tensor):
        return p.data
    return np.asarray(p, dtype=np.float64)


def predict_P(logits: MatrixLike) -> PredictedMatrix:
    """逐行 softmax（不可微版本，推理用）"""
    return PredictedMatrix(p=softmax_rows(as_tensor(_array(logits))).data)


# ==========================================
# 损失
# ==========================================

def match_loss(p: Union[Tensor, PredictedMatrix], d: DomainMatrix, clamp: float = 1e-12) -> Tensor:
    """
    −Σ_ij D_ij log P_ij

    D 的全零行贡献 0；p 为 Tensor 时可反传
    """
    p_t = p if isinstance(p, Tensor) else Tensor(p.p)
    if p_t.shape != d.d.shape:
        raise DimensionError("match_loss", p_t.shape, d.d.shape)
    return -(clamped_log(p_t, clamp) * d.d).sum()


def heatmap_mse(h: Tensor, g: Union[HeatmapStack, np.ndarray], channels: int = None) -> Tensor:
    """
    热图 MSE（对元素求平均）

    channels 给定时只比较前 channels 个通道（baseline 的 K_valid 掩码）
    """
    target = g.channels if isinstance(g, HeatmapStack) else np.asarray(g)
    if channels is None:
        return mse_loss(h, target)
    if channels == 0:
        return Tensor(0.0)
    return mse_loss(select_channels(h, range(channels), channels), target[:channels])


def total_loss(h_reordered: Tensor, g: Union[HeatmapStack, np.ndarray], p: Tensor, d: DomainMatrix,
               alpha: float, beta: float, clamp: float = 1e-12) -> Tuple[Tensor, dict]:
    """
    α·L_match + β·MSE（MSE 覆盖全部 O 个通道）

    Returns:
        (总损失, {'match': float, 'mse': float})
    """
    target = g.channels if isinstance(g, HeatmapStack) else np.asarray(g)
    if h_reordered.shape != target.shape:
        raise DimensionError("total_loss", h_reordered.shape, target.shape)
    mse = heatmap_mse(h_reordered, target)
    total = mse * beta
    parts = {'mse': mse.item(), 'match': 0.0}
    if alpha != 0.0:
        match = match_loss(p, d, clamp)
        parts['match'] = match.item()
        total = total + match * alpha
    return total, parts


# ==========================================
# 通道重排
# ==========================================

def selections_from_matrix(m: Union[DomainMatrix, np.ndarray], K_valid: int) -> List[int]:
    """
    每个有效行选中的通道（one-hot 行取 1 的位置，否则取 argmax）

    Raises:
        UsageError: 有效行没有任何选择
    """
    arr = m.d if isinstance(m, DomainMatrix) else np.asarray(m)
    picks = []
    for i in range(K_valid):
        row = arr[i]
        if not np.any(row > 0):
            raise UsageError(f"row {i} of the selection matrix selects no channel")
        picks.append(int(np.argmax(row)))
    return picks


def reorder_heatmaps(h_raw: Tensor, selections: Sequence[int], n_out: int = None) -> Tensor:
    """
    输出通道 i = 输入通道 selections[i]；-1 与 K_valid 之后的通道为 0
    """
    n_out = h_raw.shape[0] if n_out is None else n_out
    return select_channels(h_raw, selections, n_out)


# ==========================================
# 推理分配
# ==========================================

def greedy_assign(p: MatrixLike) -> Assignment:
    """
    优先队列贪心分配

    所有 (score, k, o) 入最大堆；依次弹出，k 与 o 都未分配时成交；
    堆空或 K 个关键点都已分配时停止；未分配的关键点保持 -1
    """
    arr = _array(p)
    n_k, n_o = arr.shape
    heap = [(-arr[k, o], k, o) for k in range(n_k) for o in range(n_o)]
    heapq.heapify(heap)
    result = [-1] * n_k
    used = set()
    assigned = 0
    while heap and assigned < n_k:
        _, k, o = heapq.heappop(heap)
        if result[k] == -1 and o not in used:
            result[k] = o
            used.add(o)
            assigned += 1
    return Assignment(l=tuple(result))


def max_value_assign(p: MatrixLike) -> Assignment:
    """逐行 argmax（并列取小编号），允许重复"""
    arr = _array(p)
    return Assignment(l=tuple(int(i) for i in np.argmax(arr, axis=1)))


def assign(p: MatrixLike, mode: Union[AssignmentMode, str] = AssignmentMode.MAX) -> Assignment:
    mode = AssignmentMode(mode) if isinstance(mode, str) else mode
    return greedy_assign(p) if mode == AssignmentMode.GREEDY else max_value_assign(p)
