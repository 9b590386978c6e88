"""
评估层 - 报告生成器

功能：
1. 单 fold 指标 / 汇总报告导出 JSON（sort_keys，同一输入逐字节相同）
2. 生成对齐的纯文本表格（pandas）
3. 消融实验对比表
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Sequence

import pandas as pd

from models.errors import DataError
from models.metric_report import FoldMetrics, MetricReport

logger = logging.getLogger(__name__)


class ReportGenerator:
    """
    评估报告生成器

    支持：
    - JSON 导出 / 读取
    - 文本表格
    """

    @staticmethod
    def to_json(data: Dict) -> str:
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def save_json(data: Dict, output_file: str) -> None:
        path = Path(output_file)
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(ReportGenerator.to_json(data), encoding='utf-8')
        logger.info(f"Report saved → {output_file}")

    @staticmethod
    def load_fold_reports(paths: Sequence[str]) -> List[FoldMetrics]:
        """
        读取 eval 输出的 JSON（单 fold 或汇总报告均可）

        Raises:
            DataError: 文件不存在或格式不对
        """
        folds = []
        for p in paths:
            try:
                data = json.loads(Path(p).read_text(encoding='utf-8'))
                if 'folds' in data:
                    folds.extend(MetricReport.from_dict(data).folds)
                else:
                    folds.append(FoldMetrics.from_dict(data))
            except (OSError, ValueError, KeyError) as e:
                raise DataError(f"cannot read report {p}: {e}") from e
        return folds

    @staticmethod
    def fold_frame(report: MetricReport) -> pd.DataFrame:
        rows = []
        for f in report.folds:
            row = {
                'setting': f.setting,
                'fold': f.fold,
                'assign': f.assignment,
                'PCK@0.2': f.pck_02 * 100.0,
                'PCK@0.05': f.pck_005 * 100.0,
                'NME': f.nme,
                'keypoints': f.n_keypoints,
                'collisions': f.collision_samples,
            }
            for name, value in f.pck_02_by_super_category.items():
                row[f'PCK@0.2[{name}]'] = value * 100.0
            rows.append(row)
        frame = pd.DataFrame(rows)
        mean = {'setting': '', 'fold': 'mean', 'assign': '',
                'PCK@0.2': report.mean_pck_02 * 100.0,
                'PCK@0.05': report.mean_pck_005 * 100.0,
                'NME': report.mean_nme,
                'keypoints': report.total_keypoints,
                'collisions': int(frame['collisions'].sum()) if len(frame) else 0}
        return pd.concat([frame, pd.DataFrame([mean])], ignore_index=True)

    @staticmethod
    def render_text(report: MetricReport) -> str:
        """对齐的纯文本表（PCK 以百分数显示，NME 已 ×100）"""
        frame = ReportGenerator.fold_frame(report)
        return frame.to_string(index=False, float_format=lambda v: f"{v:.2f}", na_rep='-') + "\n"

    @staticmethod
    def ablation_frame(rows: Sequence[Dict]) -> pd.DataFrame:
        """每行：{'variant': ..., 'pck_02': ..., 'pck_005': ..., 'nme': ...}"""
        frame = pd.DataFrame(list(rows))
        for col in ('pck_02', 'pck_005'):
            if col in frame:
                frame[col] = frame[col] * 100.0
        return frame.rename(columns={'pck_02': 'PCK@0.2', 'pck_005': 'PCK@0.05', 'nme': 'NME'})

    @staticmethod
    def render_ablation(rows: Sequence[Dict]) -> str:
        frame = ReportGenerator.ablation_frame(rows)
        return frame.to_string(index=False, float_format=lambda v: f"{v:.2f}") + "\n"
