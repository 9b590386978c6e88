"""
KDSM - 评估报告数据类

MetricReport 是评估层的标准化输出，可 JSON 序列化
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional


@dataclass
class FoldMetrics:
    """单个 fold 的指标"""
    fold: int
    pck_02: float              # [0, 1]
    pck_005: float             # [0, 1]
    nme: float                 # ×100
    n_keypoints: int
    setting: str = ""
    assignment: str = "max"
    collision_samples: int = 0
    n_samples: int = 0
    pck_02_by_super_category: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'fold': self.fold,
            'setting': self.setting,
            'assignment': self.assignment,
            'pck_02': self.pck_02,
            'pck_005': self.pck_005,
            'nme': self.nme,
            'n_keypoints': self.n_keypoints,
            'n_samples': self.n_samples,
            'collision_samples': self.collision_samples,
            'pck_02_by_super_category': dict(sorted(self.pck_02_by_super_category.items())),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'FoldMetrics':
        return cls(
            fold=int(data['fold']),
            pck_02=float(data['pck_02']),
            pck_005=float(data['pck_005']),
            nme=float(data['nme']),
            n_keypoints=int(data['n_keypoints']),
            setting=data.get('setting', ""),
            assignment=data.get('assignment', "max"),
            collision_samples=int(data.get('collision_samples', 0)),
            n_samples=int(data.get('n_samples', 0)),
            pck_02_by_super_category={k: float(v) for k, v in data.get('pck_02_by_super_category', {}).items()},
        )


@dataclass
class MetricReport:
    """
    跨 fold 汇总报告

    不变量：PCK ∈ [0,1]，NME ≥ 0，均值为各 fold 的算术平均
    """
    folds: List[FoldMetrics]
    mean_pck_02: float
    mean_pck_005: float
    mean_nme: float
    total_keypoints: int

    def to_dict(self) -> dict:
        return {
            'folds': [f.to_dict() for f in self.folds],
            'mean_pck_02': self.mean_pck_02,
            'mean_pck_005': self.mean_pck_005,
            'mean_nme': self.mean_nme,
            'total_keypoints': self.total_keypoints,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'MetricReport':
        return cls(
            folds=[FoldMetrics.from_dict(f) for f in data['folds']],
            mean_pck_02=float(data['mean_pck_02']),
            mean_pck_005=float(data['mean_pck_005']),
            mean_nme=float(data['mean_nme']),
            total_keypoints=int(data['total_keypoints']),
        )

    def fold(self, fold: int) -> Optional[FoldMetrics]:
        for f in self.folds:
            if f.fold == fold:
                return f
        return None
