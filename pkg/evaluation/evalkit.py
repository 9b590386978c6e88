"""
评估层 - 关键点指标

负责：
1. normalized_errors：每个可见关键点的 ‖pred − gt‖₂ / L（L = 真值 bbox 最长边）
2. pck / nme：单张图的 PCK@σ 与 NME（×100）
3. KeypointTally：fold 内逐关键点累积（可按超类拆分）
4. aggregate：跨 fold 等权平均

设计原则：
- 阈值比较取闭区间（≤）
- 模型判为无效的预测（热图全零）按未命中处理，归一化误差记 1.0
- 没有可见关键点时返回 None（跳过），不记 0
- 均值用 math.fsum，结果与 fold 顺序无关
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from models.enums import SuperCategory
from models.errors import DimensionError, UsageError
from models.keypoint_types import KeypointSet
from models.metric_report import FoldMetrics, MetricReport

logger = logging.getLogger(__name__)

INVALID_ERROR = 1.0
PCK_THRESHOLDS = (0.2, 0.05)


def normalized_errors(pred: np.ndarray, gt: KeypointSet,
                      valid: Optional[Sequence[bool]] = None) -> np.ndarray:
    """
    可见关键点的归一化误差

    Args:
        pred: N × 2 预测坐标
        gt: 真值
        valid: 每个预测是否有效（默认全部有效）

    Returns:
        长度 = 可见关键点数 的数组
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    if len(pred) != len(gt):
        raise DimensionError("normalized_errors", pred.shape, gt.coords.shape)
    valid = np.ones(len(gt), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    errors = np.linalg.norm(pred - gt.coords, axis=1) / gt.longest_side
    errors = np.where(valid, errors, INVALID_ERROR)
    return errors[gt.visible]


def pck(pred: np.ndarray, gt: KeypointSet, threshold: float,
        valid: Optional[Sequence[bool]] = None) -> Optional[float]:
    """PCK@threshold；无可见关键点时返回 None"""
    errors = normalized_errors(pred, gt, valid)
    if errors.size == 0:
        return None
    return float(np.count_nonzero(errors <= threshold)) / errors.size


def nme(pred: np.ndarray, gt: KeypointSet, valid: Optional[Sequence[bool]] = None) -> Optional[float]:
    """NME ×100；无可见关键点时返回 None"""
    errors = normalized_errors(pred, gt, valid)
    if errors.size == 0:
        return None
    return 100.0 * math.fsum(errors) / errors.size


@dataclass
class KeypointTally:
    """fold 内逐关键点累积的归一化误差"""
    errors: List[float] = field(default_factory=list)
    by_super_category: Dict[str, List[float]] = field(default_factory=dict)
    n_samples: int = 0
    collision_samples: int = 0

    def add(self, pred: np.ndarray, gt: KeypointSet, species: str,
            valid: Optional[Sequence[bool]] = None, collision: bool = False) -> None:
        errs = normalized_errors(pred, gt, valid).tolist()
        self.n_samples += 1
        self.collision_samples += int(collision)
        self.errors.extend(errs)
        key = SuperCategory.of_species(species).value
        self.by_super_category.setdefault(key, []).extend(errs)

    @staticmethod
    def _pck(errors: List[float], threshold: float) -> float:
        return sum(1 for e in errors if e <= threshold) / len(errors) if errors else 0.0

    def to_fold_metrics(self, fold: int, setting: str = "", assignment: str = "max") -> FoldMetrics:
        if not self.errors:
            logger.warning(f"⚠️  Fold {fold}: no visible keypoints were evaluated")
        return FoldMetrics(
            fold=fold,
            pck_02=self._pck(self.errors, PCK_THRESHOLDS[0]),
            pck_005=self._pck(self.errors, PCK_THRESHOLDS[1]),
            nme=100.0 * math.fsum(self.errors) / len(self.errors) if self.errors else 0.0,
            n_keypoints=len(self.errors),
            setting=setting,
            assignment=assignment,
            collision_samples=self.collision_samples,
            n_samples=self.n_samples,
            pck_02_by_super_category={k: self._pck(v, PCK_THRESHOLDS[0])
                                      for k, v in sorted(self.by_super_category.items())},
        )


def aggregate(fold_reports: Sequence[FoldMetrics]) -> MetricReport:
    """
    跨 fold 等权平均（保留每个 fold 的值）

    Raises:
        UsageError: 没有 fold
    """
    if not fold_reports:
        raise UsageError("aggregate: no fold reports given")
    folds = sorted(fold_reports, key=lambda f: (f.setting, f.fold))
    n = len(folds)
    return MetricReport(
        folds=list(folds),
        mean_pck_02=math.fsum(f.pck_02 for f in folds) / n,
        mean_pck_005=math.fsum(f.pck_005 for f in folds) / n,
        mean_nme=math.fsum(f.nme for f in folds) / n,
        total_keypoints=sum(f.n_keypoints for f in folds),
    )
