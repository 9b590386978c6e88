"""
评估层 - 指标、零样本评估、推理与报告
"""

from .evalkit import aggregate, nme, normalized_errors, pck, KeypointTally
from .evaluator import LoadedModel, evaluate, infer, predict_samples
from .report_generator import ReportGenerator

__all__ = [
    'aggregate',
    'nme',
    'normalized_errors',
    'pck',
    'KeypointTally',
    'LoadedModel',
    'evaluate',
    'infer',
    'predict_samples',
    'ReportGenerator',
]
